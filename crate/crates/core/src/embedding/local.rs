use super::{EmbeddingError, EmbeddingProvider, EmbeddingVector};

pub const LOCAL_DIMENSION: usize = 512;

/// Hashed character-trigram term frequencies.
///
/// The text is padded with one space on each side, every window of three
/// characters is hashed with 64-bit FNV-1a over its UTF-8 bytes, the hash
/// modulo the dimension selects a bucket whose count is incremented, and
/// the count vector is L2-normalized.
#[derive(Debug, Clone)]
pub struct LocalTrigramEmbedder {
    dimension: usize,
    id: String,
}

impl LocalTrigramEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension, id: format!("local-trigram-{dimension}") }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let padded: Vec<char> = std::iter::once(' ').chain(text.chars()).chain(std::iter::once(' ')).collect();
        let mut counts = vec![0.0f64; self.dimension];
        let mut buf = [0u8; 12];
        for window in padded.windows(3) {
            let mut len = 0;
            for c in window {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let bucket = (fnv1a(&buf[..len]) % self.dimension as u64) as usize;
            counts[bucket] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            for c in &mut counts {
                *c /= norm;
            }
        }
        counts
    }
}

impl Default for LocalTrigramEmbedder {
    fn default() -> Self {
        Self::new(LOCAL_DIMENSION)
    }
}

impl EmbeddingProvider for LocalTrigramEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts
            .iter()
            .map(|t| {
                if t.is_empty() {
                    Err(EmbeddingError::EmptyText)
                } else {
                    Ok(EmbeddingVector::new(self.vector(t), self.id.clone()))
                }
            })
            .collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
