//! Frozen text and image encoders with multimodal deep prompt injection.
//!
//! Both encoders share one block design: single-head attention followed by a
//! `tanh` feed-forward, each wrapped in a residual connection. All weights
//! are drawn once from a seeded stream (see [`crate::rng`]) and are only ever
//! placed on a tape through [`Tape::matmul_frozen`] or as constants, so no
//! gradient can reach them.
//!
//! Text sequences are laid out as `[SOS, prompt rows, classname tokens, EOS]`
//! and image sequences as `[CLS, prompt rows, patch rows]`. Prompt rows
//! always start at row 1. Before block `b` for `1 <= b < depth` the prompt
//! rows are replaced by the depth-`b` prompts.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Start-of-sequence token id.
pub const SOS_TOKEN: u32 = 0;
/// End-of-sequence token id.
pub const EOS_TOKEN: u32 = 1;
/// First id of the anchor ("A photo") tokens; anchors of length `m` use
/// `ANCHOR_TOKEN_BASE..ANCHOR_TOKEN_BASE + m`.
pub const ANCHOR_TOKEN_BASE: u32 = 2;
/// First id available for classname tokens.
pub const CLASS_TOKEN_BASE: u32 = 16;

/// Seeds of the image stream are the text seed xor this constant.
pub const IMAGE_SEED_XOR: u64 = 0x5EED_1A6E_0000_0001;

/// Prompt rows start right after the leading SOS/CLS token.
const PROMPT_START: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub token_dim: usize,
    pub num_blocks: usize,
    pub prompt_depth: usize,
    pub num_patches: usize,
    pub vocab_size: usize,
    pub weight_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            token_dim: 32,
            num_blocks: 4,
            prompt_depth: 2,
            num_patches: 8,
            vocab_size: 64,
            weight_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.num_blocks == 0 || self.num_patches == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "token_dim, num_blocks, num_patches and vocab_size must be at least 1".into(),
            ));
        }
        if self.prompt_depth == 0 || self.prompt_depth > self.num_blocks {
            return Err(Error::Config(format!(
                "prompt depth {} must lie in 1..={}",
                self.prompt_depth, self.num_blocks
            )));
        }
        Ok(())
    }

    fn weight_bound(&self) -> f64 {
        1.0 / (self.token_dim as f64).sqrt()
    }
}

/// Frozen weights of one block.
#[derive(Clone, Debug)]
pub struct Block {
    pub w_q: Arc<Tensor>,
    pub w_k: Arc<Tensor>,
    pub w_v: Arc<Tensor>,
    pub w_1: Arc<Tensor>,
    pub w_2: Arc<Tensor>,
}

impl Block {
    fn draw(rng: &mut rng::Stream, d: usize, bound: f64) -> Self {
        let mut next = || Arc::new(rng::uniform_tensor(rng, d, d, bound));
        Self {
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_1: next(),
            w_2: next(),
        }
    }

    fn weights(&self) -> [&Tensor; 5] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_1, &self.w_2]
    }

    /// `Y = X' + tanh(X' W1) W2` with `X' = X + softmax(Q K^T / sqrt(d)) V`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d = self.w_q.rows();
        let cols = tape.value(x).cols();
        if cols != d {
            return Err(Error::Dimension {
                op: "block_forward",
                left: tape.value(x).shape(),
                right: self.w_q.shape(),
            });
        }
        let q = tape.matmul_frozen(x, &self.w_q)?;
        let k = tape.matmul_frozen(x, &self.w_k)?;
        let v = tape.matmul_frozen(x, &self.w_v)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = tape.row_softmax(scores, 1.0)?;
        let mixed = tape.matmul(attn, v)?;
        let x1 = tape.add(x, mixed)?;
        let h = tape.matmul_frozen(x1, &self.w_1)?;
        let h = tape.tanh(h)?;
        let f = tape.matmul_frozen(h, &self.w_2)?;
        tape.add(x1, f)
    }
}

fn run_blocks(
    tape: &mut Tape,
    blocks: &[Block],
    depth: usize,
    mut x: Var,
    prompts: &[Var],
) -> Result<Var> {
    for (b, block) in blocks.iter().enumerate() {
        if b >= 1 && b < depth {
            x = tape.replace_rows(x, PROMPT_START, prompts[b])?;
        }
        x = block.forward(tape, x)?;
    }
    Ok(x)
}

fn check_prompts(tape: &Tape, config: &EncoderConfig, prompts: &[Var]) -> Result<usize> {
    if prompts.len() < config.prompt_depth {
        return Err(Error::Config(format!(
            "{} prompt blocks given for depth {}",
            prompts.len(),
            config.prompt_depth
        )));
    }
    let shape = tape.value(prompts[0]).shape();
    for &p in &prompts[..config.prompt_depth] {
        let s = tape.value(p).shape();
        if s != shape || s.1 != config.token_dim {
            return Err(Error::Dimension {
                op: "prompt_rows",
                left: (shape.0, config.token_dim),
                right: s,
            });
        }
    }
    Ok(shape.0)
}

/// Frozen text encoder.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: EncoderConfig,
    embedding: Tensor,
    blocks: Vec<Block>,
}

impl TextEncoder {
    /// Draws the embedding table (row-major) and then `W_q, W_k, W_v, W_1,
    /// W_2` of every block from the stream seeded with `weight_seed`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.token_dim;
        let bound = config.weight_bound();
        let mut rng = rng::stream(config.weight_seed);
        let embedding = rng::uniform_tensor(&mut rng, config.vocab_size, d, bound);
        let blocks = (0..config.num_blocks)
            .map(|_| Block::draw(&mut rng, d, bound))
            .collect();
        Ok(Self {
            config,
            embedding,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Frozen embedding rows for `tokens`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let d = self.config.token_dim;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &id in tokens {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Vocabulary {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
            data.extend_from_slice(self.embedding.row(id as usize));
        }
        Tensor::new(tokens.len(), d, data)
    }

    /// Encodes `[SOS, prompts[0], classname, EOS]` and returns the unit-norm
    /// EOS row. `prompts[b]` is injected before block `b` for `b < depth`;
    /// entries beyond the depth are ignored.
    pub fn encode(&self, tape: &mut Tape, classname: &[u32], prompts: &[Var]) -> Result<Var> {
        check_prompts(tape, &self.config, prompts)?;
        let prefix = tape.constant(self.embed(&[SOS_TOKEN])?);
        let mut tail_ids = classname.to_vec();
        tail_ids.push(EOS_TOKEN);
        let suffix = tape.constant(self.embed(&tail_ids)?);
        let x = tape.concat_rows(&[prefix, prompts[0], suffix])?;
        let y = run_blocks(tape, &self.blocks, self.config.prompt_depth, x, prompts)?;
        let last = tape.value(y).rows() - 1;
        let eos = tape.slice_rows(y, last, 1)?;
        tape.l2_normalize_rows(eos)
    }

    /// Serialized weights in draw order, for integrity hashing.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = self.embedding.to_le_bytes();
        for block in &self.blocks {
            for w in block.weights() {
                out.extend(w.to_le_bytes());
            }
        }
        out
    }
}

/// Frozen image encoder. Patch `p` of a raw feature vector `x` is
/// `x * T_p` with frozen `feature_dim x d` maps `T_p`.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    config: EncoderConfig,
    feature_dim: usize,
    cls: Tensor,
    blocks: Vec<Block>,
    patch_maps: Vec<Tensor>,
}

impl ImageEncoder {
    /// Draws the CLS row, the blocks, then the patch maps from the stream
    /// seeded with `weight_seed ^ IMAGE_SEED_XOR`.
    pub fn new(config: EncoderConfig, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(Error::Config("feature dimension must be at least 1".into()));
        }
        let d = config.token_dim;
        let bound = config.weight_bound();
        let mut rng = rng::stream(config.weight_seed ^ IMAGE_SEED_XOR);
        let cls = rng::uniform_tensor(&mut rng, 1, d, bound);
        let blocks = (0..config.num_blocks)
            .map(|_| Block::draw(&mut rng, d, bound))
            .collect();
        let patch_maps = (0..config.num_patches)
            .map(|_| rng::uniform_tensor(&mut rng, feature_dim, d, bound))
            .collect();
        Ok(Self {
            config,
            feature_dim,
            cls,
            blocks,
            patch_maps,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// `M x d` patch rows of a raw feature vector.
    pub fn tokenize(&self, x: &[f64]) -> Result<Tensor> {
        if x.len() != self.feature_dim {
            return Err(Error::Dimension {
                op: "encode_image",
                left: (1, x.len()),
                right: (self.feature_dim, self.config.token_dim),
            });
        }
        let row = Tensor::row_vector(x.to_vec());
        let d = self.config.token_dim;
        let mut data = Vec::with_capacity(self.patch_maps.len() * d);
        for map in &self.patch_maps {
            data.extend(row.matmul(map)?.into_data());
        }
        Tensor::new(self.patch_maps.len(), d, data)
    }

    /// Encodes `[CLS, prompts[0], patches]` and returns the unit-norm CLS row.
    pub fn encode(&self, tape: &mut Tape, x: &[f64], prompts: &[Var]) -> Result<Var> {
        check_prompts(tape, &self.config, prompts)?;
        let patches = tape.constant(self.tokenize(x)?);
        let cls = tape.constant(self.cls.clone());
        let seq = tape.concat_rows(&[cls, prompts[0], patches])?;
        let y = run_blocks(tape, &self.blocks, self.config.prompt_depth, seq, prompts)?;
        let head = tape.slice_rows(y, 0, 1)?;
        tape.l2_normalize_rows(head)
    }

    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = self.cls.to_le_bytes();
        for block in &self.blocks {
            for w in block.weights() {
                out.extend(w.to_le_bytes());
            }
        }
        for map in &self.patch_maps {
            out.extend(map.to_le_bytes());
        }
        out
    }
}

/// The two frozen encoders of one model.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

impl Backbone {
    pub fn new(config: EncoderConfig, feature_dim: usize) -> Result<Self> {
        Ok(Self {
            text: TextEncoder::new(config.clone())?,
            image: ImageEncoder::new(config, feature_dim)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.text.config()
    }

    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = self.text.weight_bytes();
        out.extend(self.image.weight_bytes());
        out
    }
}

/// Text-to-vision projections, one `d x d` matrix per prompt depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub matrices: Vec<Tensor>,
}

impl Projection {
    pub fn identity(depth: usize, d: usize) -> Self {
        Self {
            matrices: vec![Tensor::identity(d); depth],
        }
    }
}

/// `visual[b] = text[b] * proj[b]` for every depth.
pub fn project_prompts(tape: &mut Tape, text: &[Var], proj: &[Var]) -> Result<Vec<Var>> {
    if text.len() != proj.len() {
        return Err(Error::Config(format!(
            "{} text prompt depths but {} projections",
            text.len(),
            proj.len()
        )));
    }
    text.iter()
        .zip(proj)
        .map(|(&t, &p)| tape.matmul(t, p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            token_dim: 8,
            num_blocks: 3,
            prompt_depth: 2,
            num_patches: 3,
            vocab_size: 20,
            weight_seed: 11,
        }
    }

    fn prompt_blocks(tape: &mut Tape, depth: usize, m: usize, d: usize, offset: f64) -> Vec<Var> {
        (0..depth)
            .map(|b| {
                let data = (0..m * d)
                    .map(|i| ((i as f64 + 1.0) * 0.37 + b as f64 + offset).sin() * 0.3)
                    .collect();
                tape.param(Tensor::new(m, d, data).unwrap())
            })
            .collect()
    }

    /// Plain-matrix evaluation of the block formula.
    fn block_oracle(block: &Block, x: &Tensor) -> Tensor {
        let d = x.cols() as f64;
        let q = x.matmul(&block.w_q).unwrap();
        let k = x.matmul(&block.w_k).unwrap();
        let v = x.matmul(&block.w_v).unwrap();
        let s = q.matmul(&k.transpose()).unwrap().map(|e| e / d.sqrt());
        let mut a = s.clone();
        for r in 0..s.rows() {
            let max = s.row(r).iter().cloned().fold(f64::MIN, f64::max);
            let total: f64 = s.row(r).iter().map(|e| (e - max).exp()).sum();
            for c in 0..s.cols() {
                a.data_mut()[r * s.cols() + c] = (s.get(r, c) - max).exp() / total;
            }
        }
        let x1 = x.zip_map(&a.matmul(&v).unwrap(), |p, q| p + q);
        let h = x1.matmul(&block.w_1).unwrap().map(f64::tanh);
        x1.zip_map(&h.matmul(&block.w_2).unwrap(), |p, q| p + q)
    }

    #[test]
    fn block_maps_zero_to_zero() {
        let enc = TextEncoder::new(small_config()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(5, 8));
        let y = enc.blocks()[0].forward(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let enc = TextEncoder::new(small_config()).unwrap();
        let block = &enc.blocks()[1];
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..8).map(|c| ((r * 8 + c) as f64 * 0.71).cos()).collect())
            .collect();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let xp = tape.constant(Tensor::from_rows(&permuted).unwrap());
        let y = block.forward(&mut tape, x).unwrap();
        let yp = block.forward(&mut tape, xp).unwrap();
        for (out_row, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                let a = tape.value(yp).get(out_row, c);
                let b = tape.value(y).get(src, c);
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn block_matches_plain_matrix_oracle() {
        let enc = TextEncoder::new(small_config()).unwrap();
        let x_val = Tensor::new(5, 8, (0..40).map(|i| (i as f64 * 0.13).sin()).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(x_val.clone());
        let y = enc.blocks()[2].forward(&mut tape, x).unwrap();
        let expected = block_oracle(&enc.blocks()[2], &x_val);
        for (a, b) in tape.value(y).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn block_golden_snapshot() {
        let config = EncoderConfig {
            token_dim: 4,
            num_blocks: 1,
            prompt_depth: 1,
            num_patches: 1,
            vocab_size: 4,
            weight_seed: 7,
        };
        let enc = TextEncoder::new(config).unwrap();
        let x_val = Tensor::new(3, 4, (0..12).map(|i| (i as f64 + 1.0) / 10.0).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(x_val);
        let y = enc.blocks()[0].forward(&mut tape, x).unwrap();
        let golden = GOLDEN_BLOCK_SEED7;
        for (a, b) in tape.value(y).data().iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    // Recorded from an independent NumPy evaluation of the same weight stream
    // and block formula.
    const GOLDEN_BLOCK_SEED7: [f64; 12] = [
        -0.4768134999848682,
        0.826423695368417,
        0.7661113775285646,
        1.5793499739044083,
        0.0731409446260069,
        1.207088529485061,
        1.1337325372452753,
        1.8013240594436914,
        0.6173718210033067,
        1.5913824077006113,
        1.5025269086432007,
        2.0332329250576393,
    ];

    #[test]
    fn text_encoding_is_pure_and_unit_norm() {
        let enc = TextEncoder::new(small_config()).unwrap();
        let mut tape = Tape::new();
        let prompts = prompt_blocks(&mut tape, 2, 2, 8, 0.0);
        let a = enc.encode(&mut tape, &[16, 17], &prompts).unwrap();
        let b = enc.encode(&mut tape, &[16, 17], &prompts).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!((tape.value(a).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prompts_beyond_depth_are_ignored() {
        let enc = TextEncoder::new(small_config()).unwrap();
        let mut tape = Tape::new();
        let mut prompts = prompt_blocks(&mut tape, 3, 2, 8, 0.0);
        let a = enc.encode(&mut tape, &[16], &prompts).unwrap();
        prompts[2] = tape.constant(Tensor::filled(2, 8, 5.0));
        let b = enc.encode(&mut tape, &[16], &prompts).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        prompts[1] = tape.constant(Tensor::filled(2, 8, 5.0));
        let c = enc.encode(&mut tape, &[16], &prompts).unwrap();
        assert_ne!(tape.value(a), tape.value(c));
    }

    #[test]
    fn unknown_token_is_rejected() {
        let enc = TextEncoder::new(small_config()).unwrap();
        let mut tape = Tape::new();
        let prompts = prompt_blocks(&mut tape, 2, 2, 8, 0.0);
        assert!(matches!(
            enc.encode(&mut tape, &[20], &prompts),
            Err(Error::Vocabulary { id: 20, vocab: 20 })
        ));
    }

    #[test]
    fn image_encoding_contracts() {
        let enc = ImageEncoder::new(small_config(), 5).unwrap();
        let mut tape = Tape::new();
        let zeros: Vec<Var> = (0..2).map(|_| tape.constant(Tensor::zeros(2, 8))).collect();
        let a = enc.encode(&mut tape, &[0.0; 5], &zeros).unwrap();
        let b = enc.encode(&mut tape, &[0.0; 5], &zeros).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!((tape.value(a).norm() - 1.0).abs() < 1e-12);

        let x = [0.3, -1.0, 2.0, 0.1, 0.7];
        let c = enc.encode(&mut tape, &x, &zeros).unwrap();
        assert!((tape.value(c).norm() - 1.0).abs() < 1e-12);
        assert!(matches!(
            enc.encode(&mut tape, &[0.0; 4], &zeros),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn projection_identity_and_zero() {
        let mut tape = Tape::new();
        let text = prompt_blocks(&mut tape, 2, 2, 8, 0.5);
        let ident: Vec<Var> = (0..2).map(|_| tape.param(Tensor::identity(8))).collect();
        let out = project_prompts(&mut tape, &text, &ident).unwrap();
        for (o, t) in out.iter().zip(&text) {
            assert_eq!(tape.value(*o), tape.value(*t));
        }
        let zero: Vec<Var> = (0..2).map(|_| tape.param(Tensor::zeros(8, 8))).collect();
        let out = project_prompts(&mut tape, &text, &zero).unwrap();
        assert!(out.iter().all(|o| tape.value(*o).data().iter().all(|&v| v == 0.0)));
        assert!(matches!(
            project_prompts(&mut tape, &text, &zero[..1]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Backbone::new(small_config(), 5).unwrap();
        let b = Backbone::new(small_config(), 5).unwrap();
        assert_eq!(a.weight_bytes(), b.weight_bytes());
        let mut other = small_config();
        other.weight_seed = 12;
        let c = Backbone::new(other, 5).unwrap();
        assert_ne!(a.weight_bytes(), c.weight_bytes());
    }

    #[test]
    fn config_rejects_bad_depth() {
        let mut c = small_config();
        c.prompt_depth = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.prompt_depth = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
