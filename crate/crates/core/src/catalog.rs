//! Endpoint catalog: a machine model of a Swagger 2.0 / OpenAPI 3.0 document
//! and the plain-text digest fed into the mapping prompt.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::json::{self, StrictDocument};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verb {
    Get,
    Post,
    Put,
    Delete,
    Patch,
    Head,
    Options,
}

impl Verb {
    pub const ALL: [Verb; 7] = [
        Verb::Get,
        Verb::Post,
        Verb::Put,
        Verb::Delete,
        Verb::Patch,
        Verb::Head,
        Verb::Options,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Get => "GET",
            Verb::Post => "POST",
            Verb::Put => "PUT",
            Verb::Delete => "DELETE",
            Verb::Patch => "PATCH",
            Verb::Head => "HEAD",
            Verb::Options => "OPTIONS",
        }
    }

    /// Maps a path-item key (`get`, `post`, ...) to a verb.
    pub fn from_operation_key(key: &str) -> Option<Verb> {
        Verb::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(key) && key.bytes().all(|b| b.is_ascii_lowercase()))
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown HTTP verb {0:?}")]
pub struct UnknownVerb(pub String);

impl FromStr for Verb {
    type Err = UnknownVerb;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Verb::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownVerb(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamLocation {
    Path,
    Query,
    Header,
    Body,
    Form,
}

impl ParamLocation {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamLocation::Path => "path",
            ParamLocation::Query => "query",
            ParamLocation::Header => "header",
            ParamLocation::Body => "body",
            ParamLocation::Form => "form",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub location: ParamLocation,
    pub schema_type: String,
    pub required: bool,
}

/// Catalog key of one operation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EndpointKey {
    pub verb: Verb,
    pub path: String,
}

impl EndpointKey {
    pub fn new(verb: Verb, path: impl Into<String>) -> Self {
        EndpointKey {
            verb,
            path: path.into(),
        }
    }
}

impl fmt::Display for EndpointKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.verb, self.path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub path: String,
    pub verb: Verb,
    pub tag: Option<String>,
    pub summary: Option<String>,
    pub description: Option<String>,
    pub operation_id: Option<String>,
    pub consumes: Vec<String>,
    pub produces: Vec<String>,
    pub parameters: Vec<Parameter>,
    /// Status code to response body type; `None` when the response has no body schema.
    pub responses: BTreeMap<String, Option<String>>,
}

impl Endpoint {
    pub fn key(&self) -> EndpointKey {
        EndpointKey::new(self.verb, self.path.clone())
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecVersion {
    Swagger2,
    Openapi3,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointCatalog {
    pub source_name: String,
    pub spec_version: SpecVersion,
    /// Operations in document order.
    pub endpoints: Vec<Endpoint>,
}

impl EndpointCatalog {
    /// Exact match on verb and path template.
    pub fn lookup(&self, verb: Verb, path: &str) -> Option<&Endpoint> {
        self.endpoints
            .iter()
            .find(|e| e.verb == verb && e.path == path)
    }

    pub fn get(&self, key: &EndpointKey) -> Option<&Endpoint> {
        self.lookup(key.verb, &key.path)
    }

    pub fn contains(&self, key: &EndpointKey) -> bool {
        self.get(key).is_some()
    }

    pub fn keys(&self) -> impl Iterator<Item = EndpointKey> + '_ {
        self.endpoints.iter().map(Endpoint::key)
    }

    pub fn len(&self) -> usize {
        self.endpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.endpoints.is_empty()
    }
}

/// Serialization of the source document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocumentFormat {
    Json,
    Yaml,
}

impl DocumentFormat {
    /// JSON documents start with `{`; anything else is treated as YAML.
    pub fn sniff(text: &str) -> DocumentFormat {
        match text.trim_start_matches('\u{feff}').trim_start().chars().next() {
            Some('{') => DocumentFormat::Json,
            _ => DocumentFormat::Yaml,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            DocumentFormat::Json => "json",
            DocumentFormat::Yaml => "yaml",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CatalogError {
    #[error("malformed document: {detail}")]
    MalformedDocument { detail: String },
    #[error("unsupported document version: {found}")]
    UnsupportedVersion { found: String },
    #[error("unresolvable reference {reference:?}")]
    UnresolvableRef { reference: String },
    #[error("duplicate operation: {detail}")]
    DuplicateOperation { detail: String },
}

impl CatalogError {
    pub fn code(&self) -> &'static str {
        match self {
            CatalogError::MalformedDocument { .. } => "MalformedDocument",
            CatalogError::UnsupportedVersion { .. } => "UnsupportedVersion",
            CatalogError::UnresolvableRef { .. } => "UnresolvableRef",
            CatalogError::DuplicateOperation { .. } => "DuplicateOperation",
        }
    }

    fn malformed(detail: impl Into<String>) -> Self {
        CatalogError::MalformedDocument {
            detail: detail.into(),
        }
    }
}

/// Parses JSON text. YAML documents are decoded by the caller with
/// [`json::decode_strict`] and handed to [`parse_document`].
pub fn parse_json(source_name: &str, text: &str) -> Result<EndpointCatalog, CatalogError> {
    let doc = json::parse_strict_json(text.trim_start_matches('\u{feff}'))
        .map_err(|e| CatalogError::malformed(e.to_string()))?;
    parse_document(source_name, &doc)
}

/// Builds a catalog from an already decoded document.
pub fn parse_document(
    source_name: &str,
    doc: &StrictDocument,
) -> Result<EndpointCatalog, CatalogError> {
    let root = doc
        .value
        .as_object()
        .ok_or_else(|| CatalogError::malformed("document root is not an object"))?;
    let spec_version = detect_version(root)?;
    check_duplicate_operations(&doc.duplicate_keys)?;

    let resolver = Resolver { root: &doc.value };
    resolver.check_all(&doc.value)?;

    let paths = match root.get("paths") {
        None | Some(Value::Null) => return Ok(empty(source_name, spec_version)),
        Some(Value::Object(paths)) => paths,
        Some(_) => return Err(CatalogError::malformed("`paths` is not an object")),
    };

    let ctx = OperationContext {
        version: spec_version,
        resolver: &resolver,
        root_consumes: string_list(root.get("consumes")),
        root_produces: string_list(root.get("produces")),
    };

    let mut endpoints = Vec::new();
    for (path, item) in paths {
        if path.starts_with("x-") {
            continue;
        }
        if !path.starts_with('/') {
            return Err(CatalogError::malformed(format!(
                "path {path:?} does not begin with '/'"
            )));
        }
        let item = resolver.follow(item)?;
        let item = item
            .as_object()
            .ok_or_else(|| CatalogError::malformed(format!("path item {path:?} is not an object")))?;
        let shared = match item.get("parameters") {
            Some(params) => ctx.parameters(params, &format!("path item {path:?}"))?,
            None => Vec::new(),
        };
        for (key, op) in item {
            let Some(verb) = Verb::from_operation_key(key) else {
                continue;
            };
            endpoints.push(ctx.endpoint(path, verb, op, &shared)?);
        }
    }

    let mut seen_keys = Vec::<EndpointKey>::new();
    let mut seen_ids = Vec::<&str>::new();
    for e in &endpoints {
        let key = e.key();
        if seen_keys.contains(&key) {
            return Err(CatalogError::DuplicateOperation {
                detail: key.to_string(),
            });
        }
        seen_keys.push(key);
        if let Some(id) = e.operation_id.as_deref() {
            if seen_ids.contains(&id) {
                return Err(CatalogError::DuplicateOperation {
                    detail: format!("operationId {id:?}"),
                });
            }
            seen_ids.push(id);
        }
    }

    Ok(EndpointCatalog {
        source_name: source_name.to_string(),
        spec_version,
        endpoints,
    })
}

fn empty(source_name: &str, spec_version: SpecVersion) -> EndpointCatalog {
    EndpointCatalog {
        source_name: source_name.to_string(),
        spec_version,
        endpoints: Vec::new(),
    }
}

fn detect_version(root: &Map<String, Value>) -> Result<SpecVersion, CatalogError> {
    let version_text = |v: &Value| match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    if let Some(v) = root.get("swagger") {
        let found = version_text(v);
        return if found == "2.0" || found == "2" {
            Ok(SpecVersion::Swagger2)
        } else {
            Err(CatalogError::UnsupportedVersion {
                found: format!("swagger {found}"),
            })
        };
    }
    if let Some(v) = root.get("openapi") {
        let found = version_text(v);
        return if found == "3.0" || found.starts_with("3.0.") {
            Ok(SpecVersion::Openapi3)
        } else {
            Err(CatalogError::UnsupportedVersion {
                found: format!("openapi {found}"),
            })
        };
    }
    Err(CatalogError::UnsupportedVersion {
        found: "no `swagger` or `openapi` field".to_string(),
    })
}

fn check_duplicate_operations(pointers: &[String]) -> Result<(), CatalogError> {
    for pointer in pointers {
        let mut tokens = pointer.split('/').skip(1).map(json::unescape_pointer_token);
        if tokens.next().as_deref() != Some("paths") {
            continue;
        }
        let Some(path) = tokens.next() else { continue };
        match tokens.next() {
            None => {
                return Err(CatalogError::DuplicateOperation {
                    detail: format!("path {path} declared more than once"),
                })
            }
            Some(key) if tokens.next().is_none() => {
                if let Some(verb) = Verb::from_operation_key(&key) {
                    return Err(CatalogError::DuplicateOperation {
                        detail: EndpointKey::new(verb, path).to_string(),
                    });
                }
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Internal `$ref` resolution against the document root.
struct Resolver<'a> {
    root: &'a Value,
}

const MAX_REF_HOPS: usize = 32;

impl<'a> Resolver<'a> {
    fn target(&self, reference: &str) -> Result<&'a Value, CatalogError> {
        let unresolvable = || CatalogError::UnresolvableRef {
            reference: reference.to_string(),
        };
        let pointer = reference.strip_prefix('#').ok_or_else(unresolvable)?;
        let pointer = percent_decode(pointer).ok_or_else(unresolvable)?;
        if pointer.is_empty() {
            return Ok(self.root);
        }
        if !pointer.starts_with('/') {
            return Err(unresolvable());
        }
        let mut node = self.root;
        for token in pointer.split('/').skip(1) {
            let token = json::unescape_pointer_token(token);
            node = match node {
                Value::Object(map) => map.get(&token),
                Value::Array(items) => token.parse::<usize>().ok().and_then(|i| items.get(i)),
                _ => None,
            }
            .ok_or_else(unresolvable)?;
        }
        Ok(node)
    }

    /// Follows a chain of `$ref` objects to the first non-reference node.
    fn follow(&self, mut node: &'a Value) -> Result<&'a Value, CatalogError> {
        for _ in 0..MAX_REF_HOPS {
            match ref_of(node) {
                Some(reference) => node = self.target(reference)?,
                None => return Ok(node),
            }
        }
        Err(CatalogError::UnresolvableRef {
            reference: ref_of(node).unwrap_or_default().to_string(),
        })
    }

    /// Every `$ref` in the document must point inside it.
    fn check_all(&self, node: &'a Value) -> Result<(), CatalogError> {
        match node {
            Value::Object(map) => {
                if let Some(reference) = ref_of(node) {
                    self.follow(self.target(reference)?)?;
                }
                for (key, child) in map {
                    if key == "example" || key == "examples" || key.starts_with("x-") {
                        continue;
                    }
                    self.check_all(child)?;
                }
                Ok(())
            }
            Value::Array(items) => items.iter().try_for_each(|v| self.check_all(v)),
            _ => Ok(()),
        }
    }
}

fn ref_of(node: &Value) -> Option<&str> {
    node.as_object()?.get("$ref")?.as_str()
}

fn percent_decode(s: &str) -> Option<String> {
    if !s.contains('%') {
        return Some(s.to_string());
    }
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

fn string_list(v: Option<&Value>) -> Vec<String> {
    v.and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(Value::as_str)
                .map(ToString::to_string)
                .collect()
        })
        .unwrap_or_default()
}

fn non_empty_str(v: Option<&Value>) -> Option<String> {
    v.and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(ToString::to_string)
}

fn push_unique(list: &mut Vec<String>, item: &str) {
    if !list.iter().any(|s| s == item) {
        list.push(item.to_string());
    }
}

struct OperationContext<'a> {
    version: SpecVersion,
    resolver: &'a Resolver<'a>,
    root_consumes: Vec<String>,
    root_produces: Vec<String>,
}

impl<'a> OperationContext<'a> {
    fn endpoint(
        &self,
        path: &str,
        verb: Verb,
        op: &'a Value,
        shared: &[Parameter],
    ) -> Result<Endpoint, CatalogError> {
        let key = EndpointKey::new(verb, path);
        let op = op
            .as_object()
            .ok_or_else(|| CatalogError::malformed(format!("operation {key} is not an object")))?;

        let mut parameters: Vec<Parameter> = shared.to_vec();
        if let Some(params) = op.get("parameters") {
            for p in self.parameters(params, &format!("operation {key}"))? {
                match parameters
                    .iter_mut()
                    .find(|q| q.name == p.name && q.location == p.location)
                {
                    Some(existing) => *existing = p,
                    None => parameters.push(p),
                }
            }
        }

        let (mut consumes, mut produces) = match self.version {
            SpecVersion::Swagger2 => (
                op.get("consumes")
                    .map(|v| string_list(Some(v)))
                    .unwrap_or_else(|| self.root_consumes.clone()),
                op.get("produces")
                    .map(|v| string_list(Some(v)))
                    .unwrap_or_else(|| self.root_produces.clone()),
            ),
            SpecVersion::Openapi3 => (Vec::new(), Vec::new()),
        };

        if self.version == SpecVersion::Openapi3 {
            if let Some(body) = op.get("requestBody") {
                let body = self.resolver.follow(body)?;
                let content = body.get("content").and_then(Value::as_object);
                let mut schema_type = None;
                for (media, entry) in content.into_iter().flatten() {
                    push_unique(&mut consumes, media);
                    if schema_type.is_none() {
                        schema_type = entry.get("schema").map(|s| self.schema_type(s));
                    }
                }
                parameters.push(Parameter {
                    name: "body".to_string(),
                    location: ParamLocation::Body,
                    schema_type: schema_type.unwrap_or_else(|| "any".to_string()),
                    required: body.get("required").and_then(Value::as_bool).unwrap_or(false),
                });
            }
        }

        let mut responses = BTreeMap::new();
        if let Some(resp) = op.get("responses").and_then(Value::as_object) {
            for (status, response) in resp {
                if status.starts_with("x-") {
                    continue;
                }
                let response = self.resolver.follow(response)?;
                let body_type = match self.version {
                    SpecVersion::Swagger2 => response.get("schema").map(|s| self.schema_type(s)),
                    SpecVersion::Openapi3 => {
                        let mut first = None;
                        if let Some(content) = response.get("content").and_then(Value::as_object) {
                            for (media, entry) in content {
                                push_unique(&mut produces, media);
                                if first.is_none() {
                                    first = entry.get("schema").map(|s| self.schema_type(s));
                                }
                            }
                        }
                        first
                    }
                };
                responses.insert(status.clone(), body_type);
            }
        }

        let endpoint = Endpoint {
            path: path.to_string(),
            verb,
            tag: op
                .get("tags")
                .and_then(Value::as_array)
                .and_then(|tags| tags.iter().find_map(Value::as_str))
                .map(ToString::to_string),
            summary: non_empty_str(op.get("summary")),
            description: non_empty_str(op.get("description")),
            operation_id: non_empty_str(op.get("operationId")),
            consumes,
            produces,
            parameters,
            responses,
        };
        check_path_closure(&endpoint)?;
        Ok(endpoint)
    }

    fn parameters(&self, list: &'a Value, owner: &str) -> Result<Vec<Parameter>, CatalogError> {
        let items = list
            .as_array()
            .ok_or_else(|| CatalogError::malformed(format!("{owner}: parameters is not a list")))?;
        items.iter().map(|p| self.parameter(p, owner)).collect()
    }

    fn parameter(&self, raw: &'a Value, owner: &str) -> Result<Parameter, CatalogError> {
        let p = self.resolver.follow(raw)?;
        let name = non_empty_str(p.get("name"))
            .ok_or_else(|| CatalogError::malformed(format!("{owner}: parameter without a name")))?;
        let location = match p.get("in").and_then(Value::as_str) {
            Some("path") => ParamLocation::Path,
            Some("query") => ParamLocation::Query,
            // Cookies travel in a header; the catalog has no separate location for them.
            Some("header") | Some("cookie") => ParamLocation::Header,
            Some("body") => ParamLocation::Body,
            Some("formData") => ParamLocation::Form,
            other => {
                return Err(CatalogError::malformed(format!(
                    "{owner}: parameter {name:?} has unsupported location {other:?}"
                )))
            }
        };
        let schema_type = match p.get("schema") {
            Some(schema) => self.schema_type(schema),
            None => self.schema_type(p),
        };
        let required =
            location == ParamLocation::Path || p.get("required").and_then(Value::as_bool) == Some(true);
        Ok(Parameter {
            name,
            location,
            schema_type,
            required,
        })
    }

    /// Short display name of a schema: a referenced definition's name, a
    /// primitive type, or `array<...>`.
    fn schema_type(&self, schema: &Value) -> String {
        self.schema_type_depth(schema, 0)
    }

    fn schema_type_depth(&self, schema: &Value, depth: usize) -> String {
        if depth > 8 {
            return "any".to_string();
        }
        if let Some(reference) = ref_of(schema) {
            let name = reference.rsplit('/').next().unwrap_or(reference);
            return percent_decode(&json::unescape_pointer_token(name))
                .unwrap_or_else(|| name.to_string());
        }
        match schema.get("type").and_then(Value::as_str) {
            Some("array") => {
                let inner = schema
                    .get("items")
                    .map(|items| self.schema_type_depth(items, depth + 1))
                    .unwrap_or_else(|| "any".to_string());
                format!("array<{inner}>")
            }
            Some(t) => t.to_string(),
            None if schema.get("properties").is_some() => "object".to_string(),
            None => "any".to_string(),
        }
    }
}

/// `{var}` tokens of a path template, in order of appearance.
pub fn path_template_variables(path: &str) -> Vec<String> {
    let mut vars = Vec::new();
    let mut rest = path;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                vars.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    vars
}

fn check_path_closure(endpoint: &Endpoint) -> Result<(), CatalogError> {
    let mut template = path_template_variables(&endpoint.path);
    template.sort();
    template.dedup();
    let mut declared: Vec<String> = endpoint
        .parameters
        .iter()
        .filter(|p| p.location == ParamLocation::Path)
        .map(|p| p.name.clone())
        .collect();
    declared.sort();
    declared.dedup();
    if template != declared {
        return Err(CatalogError::malformed(format!(
            "{}: path variables {:?} do not match path parameters {:?}",
            endpoint.key(),
            template,
            declared
        )));
    }
    Ok(())
}

const NONE_TOKEN: &str = "(none)";

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn or_none(v: Option<&String>) -> String {
    v.map(|s| one_line(s)).unwrap_or_else(|| NONE_TOKEN.to_string())
}

fn list_or_none(items: &[String]) -> String {
    if items.is_empty() {
        NONE_TOKEN.to_string()
    } else {
        items.join(", ")
    }
}

/// Plain-text listing of every endpoint, one block per endpoint separated by
/// a blank line. Each block starts with an unindented `VERB /path` line
/// followed by the indented fields path, verb, tag, summary, description,
/// operationId, consumes, produces and parameters. Absent values render as
/// `(none)`.
pub fn endpoint_digest(catalog: &EndpointCatalog) -> String {
    let mut out = String::new();
    for (i, e) in catalog.endpoints.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("{} {}\n", e.verb, e.path));
        out.push_str(&format!("  path: {}\n", e.path));
        out.push_str(&format!("  verb: {}\n", e.verb));
        out.push_str(&format!("  tag: {}\n", or_none(e.tag.as_ref())));
        out.push_str(&format!("  summary: {}\n", or_none(e.summary.as_ref())));
        out.push_str(&format!("  description: {}\n", or_none(e.description.as_ref())));
        out.push_str(&format!("  operationId: {}\n", or_none(e.operation_id.as_ref())));
        out.push_str(&format!("  consumes: {}\n", list_or_none(&e.consumes)));
        out.push_str(&format!("  produces: {}\n", list_or_none(&e.produces)));
        if e.parameters.is_empty() {
            out.push_str(&format!("  parameters: {NONE_TOKEN}\n"));
        } else {
            out.push_str("  parameters:\n");
            for p in &e.parameters {
                out.push_str(&format!(
                    "    - {} ({}, {}, {})\n",
                    p.name,
                    p.location.as_str(),
                    p.schema_type,
                    if p.required { "required" } else { "optional" }
                ));
            }
        }
    }
    out
}
