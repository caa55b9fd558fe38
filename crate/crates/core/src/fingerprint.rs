//! SHA-256 content fingerprints for datasets, tables, configs and weights.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub struct Hasher(Sha256);

impl Hasher {
    pub fn new(domain: &str) -> Self {
        let mut h = Sha256::new();
        h.update(domain.as_bytes());
        h.update([0u8]);
        Hasher(h)
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn f32s(&mut self, values: &[f32]) -> &mut Self {
        self.0.update((values.len() as u64).to_le_bytes());
        for v in values {
            self.0.update(v.to_le_bytes());
        }
        self
    }

    pub fn finish(&mut self) -> String {
        hex::encode(self.0.clone().finalize())
    }
}

/// Fingerprint of the canonical JSON encoding of `value`.
pub fn of_json<T: Serialize>(domain: &str, value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    Hasher::new(domain).bytes(&bytes).finish()
}

/// Short prefix used in file names and log lines.
pub fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}
