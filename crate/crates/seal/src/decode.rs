//! Spec decoding with YAML support.

use seal_core::agent::SpecDecoder;
use seal_core::catalog::{parse_document, parse_json, CatalogError, DocumentFormat, EndpointCatalog};
use seal_core::json::decode_strict;

/// Decodes JSON and YAML specs.
#[derive(Debug, Clone, Copy, Default)]
pub struct FileSpecDecoder;

impl SpecDecoder for FileSpecDecoder {
    fn decode(
        &self,
        source_name: &str,
        format: DocumentFormat,
        text: &str,
    ) -> Result<EndpointCatalog, CatalogError> {
        match format {
            DocumentFormat::Json => parse_json(source_name, text),
            DocumentFormat::Yaml => {
                let doc = decode_strict(serde_yaml::Deserializer::from_str(text)).map_err(|e| {
                    CatalogError::MalformedDocument {
                        detail: e.to_string(),
                    }
                })?;
                parse_document(source_name, &doc)
            }
        }
    }
}

/// Parses a spec file's text, sniffing the format.
pub fn parse_spec(source_name: &str, text: &str) -> Result<EndpointCatalog, CatalogError> {
    FileSpecDecoder.decode(source_name, DocumentFormat::sniff(text), text)
}
