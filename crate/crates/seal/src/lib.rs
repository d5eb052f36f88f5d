//! Session storage, the live provider, the `seal` command line and the HTTP
//! service around [`seal_core`].

pub mod cli;
pub mod clock;
pub mod decode;
pub mod http;
pub mod live;
pub mod run;
pub mod store;

pub use decode::{parse_spec, FileSpecDecoder};
pub use store::{load_session, Store, StoreError};
