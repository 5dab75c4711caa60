//! Gaussian prompt distributions and the reparameterized sampler.
//!
//! A prompt block is `theta = mu + eps * exp(log_scale)` with `eps ~ N(0, I)`.
//! Storing the scale in log space keeps `sigma` positive without clipping.
//! In [`SampleMode::Mean`] the noise is exactly zero and `theta == mu`.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoders::{TextEncoder, ANCHOR_TOKEN_BASE};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Initial standard deviation of every prompt distribution.
pub const INIT_SCALE: f64 = 0.01;
/// Standard deviation of learnable mean initialization.
pub const INIT_MEAN_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDistribution {
    pub mean: Tensor,
    pub log_scale: Tensor,
    pub mean_frozen: bool,
    /// Per-depth distributions for depths `1..D`, present only when deep
    /// prompts are stochastic.
    pub deep_means: Vec<Tensor>,
    pub deep_log_scales: Vec<Tensor>,
}

pub enum SampleMode<'a> {
    Sample(&'a mut Stream),
    Mean,
}

/// Noise drawn for one distribution: depth 0 first, then each deep block.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptNoise {
    pub eps: Tensor,
    pub deep: Vec<Tensor>,
}

/// Anchor token ids standing in for the "A photo" prompt of length `m`.
pub fn anchor_tokens(m: usize) -> Vec<u32> {
    (0..m as u32).map(|i| ANCHOR_TOKEN_BASE + i).collect()
}

impl PromptDistribution {
    /// Distribution whose mean is pinned to the frozen embedding rows of the
    /// anchor tokens. Only the scale is learnable.
    pub fn fixed_mean(anchor: &[u32], m: usize, enc: &TextEncoder) -> Result<Self> {
        if anchor.len() != m {
            return Err(Error::Config(format!(
                "anchor has {} tokens but prompt length is {m}",
                anchor.len()
            )));
        }
        let mean = enc.embed(anchor)?;
        let (r, c) = mean.shape();
        Ok(Self {
            mean,
            log_scale: Tensor::filled(r, c, INIT_SCALE.ln()),
            mean_frozen: true,
            deep_means: Vec::new(),
            deep_log_scales: Vec::new(),
        })
    }

    /// Fully learnable distribution, `mu ~ N(0, 0.02^2)`, `sigma = 0.01`.
    pub fn learnable(m: usize, d: usize, init_seed: u64) -> Self {
        let mut rng = rng::stream(init_seed);
        Self {
            mean: rng::normal_tensor(&mut rng, m, d, INIT_MEAN_STD),
            log_scale: Tensor::filled(m, d, INIT_SCALE.ln()),
            mean_frozen: false,
            deep_means: Vec::new(),
            deep_log_scales: Vec::new(),
        }
    }

    /// Adds `count` learnable deep distributions drawn from `init_seed`.
    pub fn with_stochastic_deep(mut self, count: usize, init_seed: u64) -> Self {
        let (m, d) = self.mean.shape();
        let mut rng = rng::stream(init_seed);
        self.deep_means = (0..count)
            .map(|_| rng::normal_tensor(&mut rng, m, d, INIT_MEAN_STD))
            .collect();
        self.deep_log_scales = vec![Tensor::filled(m, d, INIT_SCALE.ln()); count];
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }

    pub fn scale(&self) -> Tensor {
        self.log_scale.map(f64::exp)
    }

    /// Draws `eps` for depth 0 and every deep block; zeros in mean mode.
    pub fn draw_noise(&self, mode: &mut SampleMode<'_>) -> PromptNoise {
        let (m, d) = self.shape();
        let mut draw = || match mode {
            SampleMode::Sample(rng) => rng::normal_tensor(&mut **rng, m, d, 1.0),
            SampleMode::Mean => Tensor::zeros(m, d),
        };
        let eps = draw();
        let deep = (0..self.deep_means.len()).map(|_| draw()).collect();
        PromptNoise { eps, deep }
    }

    /// `mu + eps * sigma` for the depth-0 block.
    pub fn sample_with(&self, eps: &Tensor) -> Tensor {
        reparameterize_values(&self.mean, &self.log_scale, eps)
    }

    pub fn sample(&self, mut mode: SampleMode<'_>) -> Tensor {
        match mode {
            SampleMode::Mean => self.mean.clone(),
            SampleMode::Sample(_) => {
                let noise = self.draw_noise(&mut mode);
                self.sample_with(&noise.eps)
            }
        }
    }
}

pub fn reparameterize_values(mean: &Tensor, log_scale: &Tensor, eps: &Tensor) -> Tensor {
    let sigma = log_scale.map(f64::exp);
    let noise = eps.zip_map(&sigma, |e, s| e * s);
    mean.zip_map(&noise, |m, n| m + n)
}

/// `mean + eps * exp(log_scale)` on the tape; `eps` is a constant, so
/// `d theta / d log_scale = eps * sigma`.
pub fn reparameterize(tape: &mut Tape, mean: Var, log_scale: Var, eps: &Tensor) -> Result<Var> {
    let sigma = tape.exp(log_scale)?;
    let e = tape.constant(eps.clone());
    let noise = tape.mul(e, sigma)?;
    tape.add(mean, noise)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MISTCK01";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader<M> {
    version: u32,
    tensors: Vec<TensorEntry>,
    meta: M,
}

/// Writes `MISTCK01`, a u32 header length, the JSON header and then every
/// tensor as row-major little-endian f64 in the listed order.
pub fn write_checkpoint<M: Serialize>(
    mut w: impl Write,
    meta: &M,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let header = CheckpointHeader {
        version: 1,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in tensors {
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<M: DeserializeOwned>(mut r: impl Read) -> Result<(M, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let fail = |offset: usize, message: &str| Error::Format {
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 12 {
        return Err(fail(bytes.len(), "truncated checkpoint header"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail(0, "bad checkpoint magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + len;
    if bytes.len() < body {
        return Err(fail(bytes.len(), "truncated checkpoint header"));
    }
    let header: CheckpointHeader<M> =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| fail(12, &e.to_string()))?;
    if header.version != 1 {
        return Err(fail(12, "unsupported checkpoint version"));
    }
    let mut offset = body;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n = entry.rows * entry.cols;
        let end = offset + n * 8;
        if bytes.len() < end {
            return Err(fail(bytes.len(), "truncated tensor payload"));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((entry.name, Tensor::new(entry.rows, entry.cols, data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(fail(offset, "trailing bytes after checkpoint payload"));
    }
    Ok((header.meta, tensors))
}
