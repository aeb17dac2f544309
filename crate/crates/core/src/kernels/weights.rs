//! Weight checkpoints: a little-endian `u64` header length, a UTF-8 JSON
//! header (schema `cscpr-weights/1`, seed, config echo, tensor names and
//! shapes), then every tensor as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cscc::{CsccConfig, CsccParams};
use super::extractor::{ExtractorConfig, ExtractorParams};
use super::params::Parameters;
use super::scc::{SccConfig, SccParams};
use crate::error::{Error, Result};

pub const WEIGHTS_SCHEMA: &str = "cscpr-weights/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub scc: SccConfig,
    pub cscc: CsccConfig,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        if self.scc.in_dim != self.extractor.rerank_dim() {
            return Err(Error::invalid(format!(
                "SCC input width {} does not match extractor rerank width {}",
                self.scc.in_dim,
                self.extractor.rerank_dim()
            )));
        }
        if self.scc.num_centers > self.extractor.rerank_points() {
            return Err(Error::invalid("SCC asks for more centers than rerank points"));
        }
        if self.cscc.center_dim != self.scc.center_dim {
            return Err(Error::invalid("CSCC center width must equal SCC output width"));
        }
        Ok(())
    }
}

/// All model parameters plus the seed and config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub seed: u64,
    pub config: ModelConfig,
    pub extractor: ExtractorParams,
    pub scc: SccParams,
    pub cscc: CsccParams,
}

impl ModelWeights {
    pub fn init(seed: u64, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = ExtractorParams::init(&mut rng, &config.extractor)?;
        let scc = SccParams::init(&mut rng, &config.scc)?;
        let cscc = CsccParams::init(&mut rng, &config.cscc)?;
        Ok(ModelWeights {
            seed,
            config,
            extractor,
            scc,
            cscc,
        })
    }

    fn visit_all(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.extractor.visit(f);
        self.scc.visit(f);
        self.cscc.visit(f);
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    seed: u64,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    value_count: usize,
}

pub fn encode_weights(w: &ModelWeights) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    w.visit_all(&mut |name, shape, v| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        for x in v {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    });
    let header = Header {
        schema: WEIGHTS_SCHEMA.into(),
        seed: w.seed,
        config: w.config.clone(),
        tensors,
        value_count: blob.len() / 8,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_weights(bytes: &[u8], origin: &Path) -> Result<ModelWeights> {
    let bad = |m: String| Error::format(origin, m);
    if bytes.len() < 8 {
        return Err(bad("truncated header length".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 8 + hlen {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| bad(format!("header: {e}")))?;
    if header.schema != WEIGHTS_SCHEMA {
        return Err(bad(format!("unsupported schema {:?}", header.schema)));
    }
    let blob = &bytes[8 + hlen..];
    if blob.len() != header.value_count * 8 {
        return Err(bad(format!(
            "blob holds {} bytes, header declares {} values",
            blob.len(),
            header.value_count
        )));
    }
    let mut w = ModelWeights::init(header.seed, header.config).map_err(|e| bad(e.to_string()))?;

    let mut expected = Vec::new();
    w.visit_all(&mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));
    if expected.len() != header.tensors.len()
        || expected
            .iter()
            .zip(&header.tensors)
            .any(|((n, s), t)| *n != t.name || *s != t.shape)
    {
        return Err(bad("tensor list does not match the declared config".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite weight".into()));
    }
    let mut at = 0;
    let mut assign = |_: &str, _: &[usize], v: &mut [f64]| {
        v.copy_from_slice(&values[at..at + v.len()]);
        at += v.len();
    };
    w.extractor.visit_mut(&mut assign);
    w.scc.visit_mut(&mut assign);
    w.cscc.visit_mut(&mut assign);
    Ok(w)
}

pub fn write_weights(path: impl AsRef<Path>, w: &ModelWeights) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(w)?).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path)
}
