//! Text embeddings.

use super::{EmbedRole, Payload, Reasoner, ReasonerError, Response};

pub const DEFAULT_DIMENSION: usize = 256;

/// Maps text to a unit vector.
pub trait Embedder {
    fn embed(&self, text: &str, role: EmbedRole) -> Result<Vec<f64>, ReasonerError>;
}

/// Bag-of-tokens embedder: lowercase alphanumeric tokens, FNV-1a hashed
/// into a fixed number of bins, counted, then L2-normalized.
///
/// Texts whose tokens land in disjoint bins embed to orthogonal vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dimension: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_DIMENSION,
        }
    }
}

pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        Self { dimension }
    }

    /// Bin index of a token.
    pub fn bin(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dimension as u64) as usize
    }

    pub fn vector(&self, text: &str) -> Result<Vec<f64>, ReasonerError> {
        if self.dimension == 0 {
            return Err(ReasonerError::SchemaViolation("embedding dimension is zero".into()));
        }
        let mut v = vec![0.0; self.dimension];
        for t in tokens(text) {
            v[self.bin(&t)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(ReasonerError::SchemaViolation(format!("no tokens in `{text}`")));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str, _role: EmbedRole) -> Result<Vec<f64>, ReasonerError> {
        self.vector(text)
    }
}

impl Embedder for Reasoner {
    fn embed(&self, text: &str, role: EmbedRole) -> Result<Vec<f64>, ReasonerError> {
        match self.dispatch(Payload::Embed {
            role,
            text: text.to_string(),
        })? {
            Response::Embed { vector } => {
                let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(ReasonerError::SchemaViolation("zero embedding".into()));
                }
                Ok(vector.into_iter().map(|x| x / norm).collect())
            }
            _ => unreachable!("dispatch checks the response kind"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectors_are_unit_and_deterministic() {
        let e = HashEmbedder::default();
        let a = e.vector("Disk full on /var").unwrap();
        assert_eq!(a, e.vector("disk FULL on var").unwrap());
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(e.vector("  !! ").is_err());
    }

    #[test]
    fn bin_disjoint_texts_are_orthogonal() {
        let e = HashEmbedder::default();
        let a = "memory pressure";
        let b = "network partition";
        let bins_a: Vec<usize> = tokens(a).map(|t| e.bin(&t)).collect();
        assert!(tokens(b).all(|t| !bins_a.contains(&e.bin(&t))));
        let dot: f64 = e.vector(a).unwrap().iter().zip(e.vector(b).unwrap()).map(|(x, y)| x * y).sum();
        assert_eq!(dot, 0.0);
    }
}
