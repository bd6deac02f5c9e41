use serde::Serialize;
use sha2::{Digest, Sha256};

/// Short stable digest of a serializable value (its canonical JSON form).
pub fn digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable");
    let full = Sha256::digest(&json);
    hex::encode(&full[..8])
}
