use std::collections::HashMap;
use std::sync::Mutex;

use serde_json::json;

use super::client::post_with_retry;
use super::{text_digest, EndpointConfig, Transport};
use crate::error::{Error, Result};

pub const STUB_EMBED_DIM: usize = 256;

const REMOTE_BATCH: usize = 64;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn trigrams(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < 3 {
        return vec![text.to_string()];
    }
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

pub(crate) fn bucket(gram: &str, dim: usize) -> usize {
    (fnv1a(gram.as_bytes()) % dim as u64) as usize
}

/// Character-trigram counts hashed into `dim` buckets, L2-normalized.
pub fn stub_embedding(text: &str, dim: usize) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Err(Error::contract("cannot embed empty text"));
    }
    if dim == 0 {
        return Err(Error::config("embedding dimension must be positive"));
    }
    let mut v = vec![0.0; dim];
    for g in trigrams(text) {
        v[bucket(&g, dim)] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// Text embedder with a digest-keyed cache; remote unless the endpoint
/// config is offline.
pub struct Embedder {
    pub cfg: EndpointConfig,
    pub stub_dim: usize,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl Embedder {
    pub fn new(cfg: EndpointConfig) -> Self {
        Self {
            cfg,
            stub_dim: STUB_EMBED_DIM,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn is_offline(&self) -> bool {
        self.cfg.is_offline()
    }

    pub fn embed_many(&self, transport: &dyn Transport, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(Error::contract(format!("text {i} is empty")));
        }
        let digests: Vec<String> = texts.iter().map(|t| text_digest(t)).collect();
        let missing: Vec<usize> = {
            let cache = self.cache.lock().expect("embed cache lock");
            let mut seen = std::collections::HashSet::new();
            (0..texts.len())
                .filter(|&i| !cache.contains_key(&digests[i]) && seen.insert(&digests[i]))
                .collect()
        };
        for chunk in missing.chunks(REMOTE_BATCH) {
            let vectors = if self.is_offline() {
                chunk
                    .iter()
                    .map(|&i| stub_embedding(texts[i], self.stub_dim))
                    .collect::<Result<Vec<_>>>()?
            } else {
                self.remote(transport, chunk.iter().map(|&i| texts[i]).collect())?
            };
            let mut cache = self.cache.lock().expect("embed cache lock");
            for (&i, v) in chunk.iter().zip(vectors) {
                cache.insert(digests[i].clone(), v);
            }
        }
        let cache = self.cache.lock().expect("embed cache lock");
        Ok(digests.iter().map(|d| cache[d].clone()).collect())
    }

    fn remote(&self, transport: &dyn Transport, inputs: Vec<&str>) -> Result<Vec<Vec<f64>>> {
        let body = json!({ "model": self.cfg.embed_model, "input": inputs });
        let resp = post_with_retry(transport, &self.cfg, &self.cfg.url("embeddings")?, &body)?;
        let data = resp["data"]
            .as_array()
            .ok_or_else(|| Error::Transport("embedding response has no data array".into()))?;
        if data.len() != inputs.len() {
            return Err(Error::Transport(format!(
                "asked for {} embeddings, got {}",
                inputs.len(),
                data.len()
            )));
        }
        let mut out = vec![Vec::new(); inputs.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item["index"].as_u64().map_or(pos, |v| v as usize);
            let v: Vec<f64> = serde_json::from_value(item["embedding"].clone())?;
            if idx >= out.len() || v.is_empty() {
                return Err(Error::Transport(format!("malformed embedding entry {pos}")));
            }
            out[idx] = v;
        }
        Ok(out)
    }
}

pub fn embed_text(embedder: &Embedder, transport: &dyn Transport, text: &str) -> Result<Vec<f64>> {
    Ok(embedder.embed_many(transport, &[text])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmdiag::client::tests::{online, Scripted};
    use std::collections::BTreeSet;
    use std::sync::atomic::Ordering;

    fn offline() -> Embedder {
        Embedder::new(EndpointConfig {
            offline: true,
            ..EndpointConfig::default()
        })
    }

    #[test]
    fn stub_is_unit_and_deterministic() {
        let e = offline();
        let t = Scripted::new(vec![]);
        let a = embed_text(&e, &t, "mastered: loops").unwrap();
        let b = embed_text(&e, &t, "mastered: loops").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), STUB_EMBED_DIM);
        assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(embed_text(&e, &t, "").is_err());
        assert_eq!(stub_embedding("ab", 8).unwrap().iter().filter(|v| **v > 0.0).count(), 1);
    }

    #[test]
    fn disjoint_trigram_buckets_give_orthogonal_vectors() {
        let a = "aaaa bbbb";
        let b = "xyzw";
        let ba: BTreeSet<usize> = trigrams(a).iter().map(|g| bucket(g, STUB_EMBED_DIM)).collect();
        let bb: BTreeSet<usize> = trigrams(b).iter().map(|g| bucket(g, STUB_EMBED_DIM)).collect();
        assert!(ba.is_disjoint(&bb));
        let va = stub_embedding(a, STUB_EMBED_DIM).unwrap();
        let vb = stub_embedding(b, STUB_EMBED_DIM).unwrap();
        assert_eq!(va.iter().zip(&vb).map(|(x, y)| x * y).sum::<f64>(), 0.0);
    }

    #[test]
    fn remote_batches_and_caches() {
        let t = Scripted::new(vec![Ok(json!({ "data": [
            { "index": 1, "embedding": [0.0, 1.0] },
            { "index": 0, "embedding": [1.0, 0.0] },
        ]}))]);
        let e = Embedder::new(online());
        let v = e.embed_many(&t, &["first", "second", "first"]).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(embed_text(&e, &t, "second").unwrap(), vec![0.0, 1.0]);
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }
}
