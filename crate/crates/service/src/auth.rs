//! Stateless bearer tokens derived from the server secret.

use axum::http::HeaderMap;
use sha2::{Digest, Sha256};

fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h.update([0u8]);
        }
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn facilitator_token(secret: &str) -> String {
    digest(&[secret, "facilitator"])
}

/// Token scoped to one expert in one session.
pub fn expert_token(secret: &str, session_id: &str, expert_id: &str) -> String {
    digest(&[secret, "expert", session_id, expert_id])
}

pub(crate) fn tokens_equal(a: &str, b: &str) -> bool {
    a.len() == b.len() && a.bytes().zip(b.bytes()).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

pub(crate) fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(axum::http::header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}
