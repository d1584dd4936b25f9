//! Key-value config.
pub struct KvConfig;
