//! Synthetic multimodal few-shot benchmarks, support-set samplers and the
//! binary feature-set format.
//!
//! Every class owns `G` mode centers on a regular simplex centered on a class
//! anchor, so modes of one class sit exactly `mode_separation` apart and the
//! class mean falls between them. Anchors cluster near the origin, which
//! makes the class mean a poor single prototype whenever `G > 1`.
//!
//! Feature-set file layout (little-endian):
//!
//! ```text
//! "MISTFS01"  u32 version=1  u32 n  u32 dim  u32 C
//! n x { u32 label, dim x f64 }
//! C x { u32 len, len x u32 token id }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::encoders::CLASS_TOKEN_BASE;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const MAGIC: &[u8; 8] = b"MISTFS01";
const VERSION: u32 = 1;
const MAX_RETRIES: usize = 1000;
/// Per-coordinate standard deviation of class anchors.
const ANCHOR_SCALE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub modes_per_class: usize,
    pub feature_dim: usize,
    pub mode_separation: f64,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub samples_per_class_train: usize,
    pub samples_per_class_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            modes_per_class: 2,
            feature_dim: 16,
            mode_separation: 8.0,
            class_separation: 4.0,
            noise_scale: 1.0,
            samples_per_class_train: 32,
            samples_per_class_test: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.modes_per_class == 0 {
            return Err(Error::Config("at least one mode per class is required".into()));
        }
        if self.modes_per_class > self.feature_dim {
            return Err(Error::Config(format!(
                "{} modes need at least as many feature dimensions, got {}",
                self.modes_per_class, self.feature_dim
            )));
        }
        if !(self.mode_separation > 0.0 && self.class_separation > 0.0 && self.noise_scale > 0.0) {
            return Err(Error::Config(
                "separations and noise scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Feature vectors with integer labels and per-class token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledFeatureSet {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
    class_tokens: Vec<Vec<u32>>,
}

impl LabeledFeatureSet {
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        labels: Vec<u32>,
        class_tokens: Vec<Vec<u32>>,
    ) -> Result<Self> {
        if features.len() != labels.len() * dim {
            return Err(Error::Input(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_tokens.len()) {
            return Err(Error::Input(format!(
                "label {bad} outside [0, {})",
                class_tokens.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite feature value".into()));
        }
        Ok(Self {
            dim,
            features,
            labels,
            class_tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_tokens(&self) -> &[Vec<u32>] {
        &self.class_tokens
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Indices of each class's samples, in ascending order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledFeatureSet {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.feature(i));
            labels.push(self.labels[i]);
        }
        LabeledFeatureSet {
            dim: self.dim,
            features,
            labels,
            class_tokens: self.class_tokens.clone(),
        }
    }
}

/// Output of [`generate`]. `*_modes` record the generating mode of every
/// sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: LabeledFeatureSet,
    pub test: LabeledFeatureSet,
    pub train_modes: Vec<usize>,
    pub test_modes: Vec<usize>,
    /// `centers[c][g]` is the center of mode `g` of class `c`.
    pub centers: Vec<Vec<Vec<f64>>>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn gaussian_vec(rng: &mut Stream, dim: usize, std_dev: f64) -> Vec<f64> {
    rng::normal_tensor(rng, 1, dim, std_dev).into_data()
}

/// `count` orthonormal directions by Gram-Schmidt on Gaussian draws.
fn orthonormal_directions(rng: &mut Stream, dim: usize, count: usize) -> Option<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(rng, dim, 1.0);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return None;
        }
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    Some(basis)
}

fn draw_class_modes(rng: &mut Stream, spec: &SyntheticSpec) -> Option<Vec<Vec<f64>>> {
    let anchor = gaussian_vec(rng, spec.feature_dim, ANCHOR_SCALE);
    if spec.modes_per_class == 1 {
        return Some(vec![anchor]);
    }
    // Regular simplex centered on the anchor: the class mean sits between
    // the modes rather than on any of them.
    let radius = spec.mode_separation / std::f64::consts::SQRT_2;
    let g = spec.modes_per_class as f64;
    let dirs = orthonormal_directions(rng, spec.feature_dim, spec.modes_per_class)?;
    let centroid: Vec<f64> = (0..spec.feature_dim)
        .map(|j| dirs.iter().map(|u| u[j]).sum::<f64>() / g)
        .collect();
    Some(
        dirs.iter()
            .map(|u| {
                anchor
                    .iter()
                    .zip(u)
                    .zip(&centroid)
                    .map(|((a, x), m)| a + radius * (x - m))
                    .collect()
            })
            .collect(),
    )
}

/// Draws a train pool and a test set from the same class-conditional
/// mixtures. Each class's modes are redrawn until every mode is at least
/// `class_separation` from every mode of the previously placed classes.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed);
    let mut centers: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.num_classes);
    for c in 0..spec.num_classes {
        let mut placed = None;
        for _ in 0..MAX_RETRIES {
            let Some(modes) = draw_class_modes(&mut rng, spec) else {
                continue;
            };
            let clear = centers.iter().flatten().all(|other| {
                modes
                    .iter()
                    .all(|m| distance(m, other) >= spec.class_separation)
            });
            if clear {
                placed = Some(modes);
                break;
            }
        }
        match placed {
            Some(modes) => centers.push(modes),
            None => {
                return Err(Error::Generation(format!(
                    "could not place class {c} at separation {} in {} dimensions after {MAX_RETRIES} retries",
                    spec.class_separation, spec.feature_dim
                )))
            }
        }
    }

    let class_tokens: Vec<Vec<u32>> = (0..spec.num_classes as u32)
        .map(|c| vec![CLASS_TOKEN_BASE + c])
        .collect();
    let mut draw_split = |per_class: usize| -> Result<(LabeledFeatureSet, Vec<usize>)> {
        let mut features = Vec::with_capacity(per_class * spec.num_classes * spec.feature_dim);
        let mut labels = Vec::new();
        let mut modes = Vec::new();
        for (c, class_modes) in centers.iter().enumerate() {
            for j in 0..per_class {
                let g = j % class_modes.len();
                let noise = gaussian_vec(&mut rng, spec.feature_dim, spec.noise_scale);
                features.extend(class_modes[g].iter().zip(noise).map(|(m, e)| m + e));
                labels.push(c as u32);
                modes.push(g);
            }
        }
        let set = LabeledFeatureSet::new(spec.feature_dim, features, labels, class_tokens.clone())?;
        Ok((set, modes))
    };
    let (train, train_modes) = draw_split(spec.samples_per_class_train)?;
    let (test, test_modes) = draw_split(spec.samples_per_class_test)?;
    Ok(SyntheticData {
        train,
        test,
        train_modes,
        test_modes,
        centers,
    })
}

/// A sampled support set with the pool indices it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub set: LabeledFeatureSet,
    pub indices: Vec<usize>,
    pub shots_per_class: Vec<usize>,
}

fn sample_counts(pool: &LabeledFeatureSet, counts: &[usize], seed: u64) -> Result<SupportSet> {
    let by_class = pool.indices_by_class();
    let mut rng = rng::stream(seed);
    let mut indices = Vec::with_capacity(counts.iter().sum());
    for (c, (&want, members)) in counts.iter().zip(&by_class).enumerate() {
        if members.len() < want {
            return Err(Error::Input(format!(
                "class {c} has {} pool samples, {want} requested",
                members.len()
            )));
        }
        for pick in index::sample(&mut rng, members.len(), want) {
            indices.push(members[pick]);
        }
    }
    Ok(SupportSet {
        set: pool.subset(&indices),
        indices,
        shots_per_class: counts.to_vec(),
    })
}

/// Exactly `k` samples per class, uniformly without replacement.
pub fn sample_k_shot(pool: &LabeledFeatureSet, k: usize, seed: u64) -> Result<SupportSet> {
    sample_counts(pool, &vec![k; pool.num_classes()], seed)
}

/// Class `c` receives `cycle[c % cycle.len()]` samples.
pub fn sample_cyclic_imbalanced(
    pool: &LabeledFeatureSet,
    cycle: &[usize],
    seed: u64,
) -> Result<SupportSet> {
    if cycle.is_empty() {
        return Err(Error::Input("empty shot cycle".into()));
    }
    let counts: Vec<usize> = (0..pool.num_classes())
        .map(|c| cycle[c % cycle.len()])
        .collect();
    sample_counts(pool, &counts, seed)
}

/// `per_mode` samples from every (class, mode) cell, given the generating
/// mode of each pool sample.
pub fn sample_per_mode(
    pool: &LabeledFeatureSet,
    modes: &[usize],
    per_mode: usize,
    seed: u64,
) -> Result<SupportSet> {
    if modes.len() != pool.len() {
        return Err(Error::Input(format!(
            "{} mode labels for {} pool samples",
            modes.len(),
            pool.len()
        )));
    }
    let num_modes = modes.iter().max().map_or(0, |&g| g + 1);
    let mut rng = rng::stream(seed);
    let mut indices = Vec::new();
    let mut shots = Vec::with_capacity(pool.num_classes());
    for (c, members) in pool.indices_by_class().iter().enumerate() {
        let mut taken = 0;
        for g in 0..num_modes {
            let cell: Vec<usize> = members.iter().copied().filter(|&i| modes[i] == g).collect();
            if cell.is_empty() {
                continue;
            }
            if cell.len() < per_mode {
                return Err(Error::Input(format!(
                    "class {c} mode {g} has {} pool samples, {per_mode} requested",
                    cell.len()
                )));
            }
            for pick in index::sample(&mut rng, cell.len(), per_mode) {
                indices.push(cell[pick]);
            }
            taken += per_mode;
        }
        shots.push(taken);
    }
    Ok(SupportSet {
        set: pool.subset(&indices),
        indices,
        shots_per_class: shots,
    })
}

pub fn encode_feature_set(set: &LabeledFeatureSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + set.len() * (4 + 8 * set.dim));
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        set.len() as u32,
        set.dim as u32,
        set.num_classes() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..set.len() {
        out.extend_from_slice(&set.labels[i].to_le_bytes());
        for v in set.feature(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for tokens in &set.class_tokens {
        out.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
        for t in tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.offset < n {
            return Err(Error::Format {
                offset: self.offset as u64,
                message: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_feature_set(bytes: &[u8]) -> Result<LabeledFeatureSet> {
    let mut cur = Cursor { bytes, offset: 0 };
    let format_err = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if cur.take(8, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(format_err(8, format!("unsupported version {version}")));
    }
    let n = cur.u32("sample count")? as usize;
    let dim = cur.u32("dimension")? as usize;
    let classes = cur.u32("class count")? as usize;

    let mut labels = Vec::with_capacity(n.min(1 << 20));
    let mut features = Vec::with_capacity((n * dim).min(1 << 24));
    for _ in 0..n {
        let at = cur.offset;
        let label = cur.u32("label")?;
        if label as usize >= classes {
            return Err(format_err(at, format!("label {label} outside [0, {classes})")));
        }
        labels.push(label);
        for _ in 0..dim {
            let at = cur.offset;
            let v = cur.f64("feature")?;
            if !v.is_finite() {
                return Err(format_err(at, "non-finite feature".into()));
            }
            features.push(v);
        }
    }
    let mut class_tokens = Vec::with_capacity(classes.min(1 << 16));
    for _ in 0..classes {
        let len = cur.u32("token list length")? as usize;
        let mut ids = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            ids.push(cur.u32("token id")?);
        }
        class_tokens.push(ids);
    }
    if cur.offset != bytes.len() {
        return Err(format_err(cur.offset, "trailing bytes".into()));
    }
    LabeledFeatureSet::new(dim, features, labels, class_tokens)
}

pub fn write_feature_set(set: &LabeledFeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_feature_set(set))?;
    Ok(())
}

pub fn read_feature_set(path: impl AsRef<Path>) -> Result<LabeledFeatureSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_feature_set(&bytes)
}

/// CSV mirror with header `label,f0,...,f{dim-1}`.
pub fn write_feature_csv(set: &LabeledFeatureSet, mut w: impl Write) -> Result<()> {
    let mut header = vec!["label".to_string()];
    header.extend((0..set.dim).map(|j| format!("f{j}")));
    writeln!(w, "{}", header.join(","))?;
    for i in 0..set.len() {
        let mut row = vec![set.labels[i].to_string()];
        row.extend(set.feature(i).iter().map(|v| format!("{v:?}")));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 5,
            samples_per_class_train: 20,
            samples_per_class_test: 10,
            seed: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate(&small_spec()).unwrap(), generate(&small_spec()).unwrap());
        let mut other = small_spec();
        other.seed = 4;
        assert_ne!(generate(&small_spec()).unwrap().train, generate(&other).unwrap().train);
    }

    #[test]
    fn mode_geometry() {
        let data = generate(&small_spec()).unwrap();
        for modes in &data.centers {
            assert_eq!(modes.len(), 2);
            assert!((distance(&modes[0], &modes[1]) - 8.0).abs() < 1e-9);
        }
        for (c, a) in data.centers.iter().enumerate() {
            for b in &data.centers[c + 1..] {
                for m in a {
                    for n in b {
                        assert!(distance(m, n) >= 4.0);
                    }
                }
            }
        }
    }

    #[test]
    fn single_mode_is_unimodal() {
        let spec = SyntheticSpec {
            modes_per_class: 1,
            ..small_spec()
        };
        let data = generate(&spec).unwrap();
        assert!(data.centers.iter().all(|m| m.len() == 1));
        assert!(data.train_modes.iter().all(|&g| g == 0));
    }

    #[test]
    fn infeasible_separation_fails() {
        let spec = SyntheticSpec {
            class_separation: 1e3,
            ..small_spec()
        };
        assert!(matches!(generate(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn k_shot_counts_and_uniqueness() {
        let pool = generate(&small_spec()).unwrap().train;
        let s = sample_k_shot(&pool, 1, 0).unwrap();
        assert_eq!(s.set.len(), 5);
        assert_eq!(s.set.class_counts(), vec![1; 5]);

        let s = sample_k_shot(&pool, 7, 0).unwrap();
        let mut idx = s.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 35);

        let other = sample_k_shot(&pool, 7, 1).unwrap();
        assert_ne!(s.indices, other.indices);
        assert_eq!(s, sample_k_shot(&pool, 7, 0).unwrap());
        assert!(matches!(sample_k_shot(&pool, 21, 0), Err(Error::Input(_))));
    }

    #[test]
    fn cyclic_counts() {
        let spec = SyntheticSpec {
            num_classes: 6,
            ..small_spec()
        };
        let pool = generate(&spec).unwrap().train;
        let s = sample_cyclic_imbalanced(&pool, &[1, 2, 4, 8], 5).unwrap();
        assert_eq!(s.set.class_counts(), vec![1, 2, 4, 8, 1, 2]);
        assert_eq!(s.set.len(), 18);
        assert_eq!(
            sample_cyclic_imbalanced(&pool, &[3], 5).unwrap(),
            sample_k_shot(&pool, 3, 5).unwrap()
        );
        assert!(sample_cyclic_imbalanced(&pool, &[], 5).is_err());
    }

    #[test]
    fn format_roundtrip_and_errors() {
        let set = generate(&small_spec()).unwrap().test;
        let bytes = encode_feature_set(&set);
        assert_eq!(decode_feature_set(&bytes).unwrap(), set);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_feature_set(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_feature_set(truncated), Err(Error::Format { .. })));
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 2;
        assert!(matches!(
            decode_feature_set(&wrong_version),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn empty_set_is_valid() {
        let set = LabeledFeatureSet::new(3, vec![], vec![], vec![vec![16]]).unwrap();
        let bytes = encode_feature_set(&set);
        let back = decode_feature_set(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back, set);
    }

    #[test]
    fn csv_header() {
        let set = LabeledFeatureSet::new(2, vec![1.5, -2.0], vec![0], vec![vec![16]]).unwrap();
        let mut out = Vec::new();
        write_feature_csv(&set, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "label,f0,f1\n0,1.5,-2.0\n");
    }
}
