//! Feature sets, their on-disk format, a synthetic generator and the P×K
//! batch sampler.
//!
//! File layout (little-endian):
//!
//! ```text
//! "HVFT" u32 version=1 u32 N u32 D f32[N*D] (row-major)
//! "HVLB" u32[N] person ids  u16[N] camera ids
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::ndtensor::{Rng, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"HVFT";
pub const LABEL_MAGIC: &[u8; 4] = b"HVLB";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// `N × D` features with a person id and a camera id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    features: Tensor<f32>,
    person_ids: Vec<u32>,
    camera_ids: Vec<u16>,
    split: Option<Split>,
}

/// Contiguous class labels for a set's person ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    /// Label in `[0, C)` for every row.
    pub labels: Vec<usize>,
    /// Original person id of each label, ascending.
    pub ids: Vec<u32>,
}

impl LabelMap {
    pub fn num_classes(&self) -> usize {
        self.ids.len()
    }
}

impl FeatureSet {
    pub fn new(features: Tensor<f32>, person_ids: Vec<u32>, camera_ids: Vec<u16>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Data(format!(
                "features must be a matrix, got shape {:?}",
                features.shape()
            )));
        }
        let n = features.rows();
        if person_ids.len() != n || camera_ids.len() != n {
            return Err(Error::Data(format!(
                "{n} feature rows but {} person ids and {} camera ids",
                person_ids.len(),
                camera_ids.len()
            )));
        }
        Ok(Self {
            features,
            person_ids,
            camera_ids,
            split: None,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn len(&self) -> usize {
        self.person_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn person_ids(&self) -> &[u32] {
        &self.person_ids
    }

    pub fn camera_ids(&self) -> &[u16] {
        &self.camera_ids
    }

    pub fn split(&self) -> Option<Split> {
        self.split
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.features.row(i)
    }

    /// Rows at `indices` as a `[len, D]` matrix.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), d], data).expect("rows of width D")
    }

    /// Maps person ids to `[0, C)` in ascending id order.
    pub fn label_map(&self) -> LabelMap {
        let mut index = BTreeMap::new();
        for &id in &self.person_ids {
            index.entry(id).or_insert(0usize);
        }
        for (label, slot) in index.values_mut().enumerate() {
            *slot = label;
        }
        LabelMap {
            labels: self.person_ids.iter().map(|id| index[id]).collect(),
            ids: index.into_keys().collect(),
        }
    }

    pub fn num_identities(&self) -> usize {
        self.label_map().num_classes()
    }
}

pub fn encode_features(set: &FeatureSet) -> Vec<u8> {
    let n = set.len();
    let mut out = Vec::with_capacity(20 + n * (set.dim() * 4 + 6));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    for v in set.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(LABEL_MAGIC);
    for id in &set.person_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for cam in &set.camera_ids {
        out.extend_from_slice(&cam.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let at = r.pos();
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::format(
            at,
            format!("unsupported feature file version {version}"),
        ));
    }
    let n = r.u32("row count")? as usize;
    let at = r.pos();
    let d = r.u32("feature width")? as usize;
    let len = n
        .checked_mul(d)
        .ok_or_else(|| Error::format(at, "feature matrix size overflows"))?;
    let data = r.f32s(len, "feature block")?;
    r.magic(LABEL_MAGIC)?;
    let person_ids = (0..n)
        .map(|_| r.u32("person ids"))
        .collect::<Result<Vec<_>>>()?;
    let camera_ids = (0..n)
        .map(|_| r.u16("camera ids"))
        .collect::<Result<Vec<_>>>()?;
    if r.remaining() > 0 {
        return Err(Error::format(
            r.pos(),
            format!(
                "{} trailing bytes after the label block of {n} rows",
                r.remaining()
            ),
        ));
    }
    FeatureSet::new(Tensor::new(vec![n, d], data)?, person_ids, camera_ids)
}

pub fn write_features(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, encode_features(set))?)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    decode_features(&fs::read(path)?)
}

/// Parameters of the synthetic generator.
///
/// Every sample is `x = c_y + V·a + n` with identity centers
/// `c ~ N(0, s_id² I)`, one factor matrix `V` (`D × K_v`, orthonormal columns)
/// shared by all identities, coefficients `a ~ N(0, s_var² I)` and noise
/// `n ~ N(0, s_noise² I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Training identities.
    pub num_ids: usize,
    pub samples_per_id: usize,
    /// Identities shared by query and gallery, disjoint from training.
    pub num_test_ids: usize,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    pub dim: usize,
    pub id_scale: f64,
    pub num_variation_factors: usize,
    pub variation_scale: f64,
    pub noise_scale: f64,
    pub num_cameras: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_ids: 50,
            samples_per_id: 20,
            num_test_ids: 25,
            query_per_id: 4,
            gallery_per_id: 16,
            dim: 64,
            id_scale: 1.0,
            num_variation_factors: 4,
            variation_scale: 2.0,
            noise_scale: 0.1,
            num_cameras: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.samples_per_id < 2 {
            return fail(format!(
                "samples_per_id must be >= 2 for triplet mining, got {}",
                self.samples_per_id
            ));
        }
        if self.num_ids == 0 || self.num_test_ids == 0 {
            return fail("need at least one training and one test identity".into());
        }
        if self.query_per_id == 0 || self.gallery_per_id == 0 {
            return fail("query_per_id and gallery_per_id must be positive".into());
        }
        if self.dim == 0 || self.num_variation_factors >= self.dim {
            return fail(format!(
                "need 0 <= K_v < D, got K_v={} D={}",
                self.num_variation_factors, self.dim
            ));
        }
        if self.num_cameras == 0 || self.num_cameras > u16::MAX as usize + 1 {
            return fail(format!("num_cameras out of range: {}", self.num_cameras));
        }
        if !(self.id_scale > 0.0 && self.id_scale.is_finite()) {
            return fail(format!("id_scale must be > 0, got {}", self.id_scale));
        }
        for (name, s) in [
            ("variation_scale", self.variation_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return fail(format!("{name} must be >= 0, got {s}"));
            }
        }
        Ok(())
    }
}

/// Ground truth kept alongside the generated splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    /// `V`, `[D, K_v]`.
    pub factors: Tensor<f64>,
    /// Identity centers, `[num_ids + num_test_ids, D]`; training ids first.
    pub centers: Tensor<f64>,
    /// Per-sample coefficients `a`, `[N, K_v]`, one matrix per split.
    pub train_coeffs: Tensor<f64>,
    pub query_coeffs: Tensor<f64>,
    pub gallery_coeffs: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: FeatureSet,
    pub query: FeatureSet,
    pub gallery: FeatureSet,
    pub truth: SynthTruth,
}

/// Orthonormalizes the columns of a `[d, k]` matrix in place (Gram-Schmidt),
/// redrawing any column that collapses.
fn orthonormal_columns(d: usize, k: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut c: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for prev in &cols {
            let dot: f64 = c.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (ci, pi) in c.iter_mut().zip(prev) {
                *ci -= dot * pi;
            }
        }
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-8 {
            c.iter_mut().for_each(|v| *v /= norm);
            cols.push(c);
        }
    }
    let mut data = vec![0.0; d * k];
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            data[i * k + j] = v;
        }
    }
    Tensor::new(vec![d, k], data).expect("d*k entries")
}

struct SplitBuilder {
    features: Vec<f32>,
    coeffs: Vec<f64>,
    person_ids: Vec<u32>,
    camera_ids: Vec<u16>,
}

impl SplitBuilder {
    fn new() -> Self {
        Self {
            features: Vec::new(),
            coeffs: Vec::new(),
            person_ids: Vec::new(),
            camera_ids: Vec::new(),
        }
    }

    fn finish(self, d: usize, k: usize, split: Split) -> Result<(FeatureSet, Tensor<f64>)> {
        let n = self.person_ids.len();
        let set = FeatureSet::new(
            Tensor::new(vec![n, d], self.features)?,
            self.person_ids,
            self.camera_ids,
        )?
        .with_split(split);
        Ok((set, Tensor::new(vec![n, k], self.coeffs)?))
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let (d, k) = (spec.dim, spec.num_variation_factors);
    let mut rng = Rng::new(spec.seed);
    let factors = orthonormal_columns(d, k, &mut rng);
    let total_ids = spec.num_ids + spec.num_test_ids;
    let centers: Vec<f64> = (0..total_ids * d)
        .map(|_| spec.id_scale * rng.normal())
        .collect();

    let mut train = SplitBuilder::new();
    let mut query = SplitBuilder::new();
    let mut gallery = SplitBuilder::new();
    let emit = |out: &mut SplitBuilder, id: usize, sample: usize, rng: &mut Rng| {
        let a: Vec<f64> = (0..k)
            .map(|_| spec.variation_scale * rng.normal())
            .collect();
        for i in 0..d {
            let shift: f64 = (0..k).map(|j| factors.data()[i * k + j] * a[j]).sum();
            let x = centers[id * d + i] + shift + spec.noise_scale * rng.normal();
            out.features.push(x as f32);
        }
        out.coeffs.extend_from_slice(&a);
        out.person_ids.push(id as u32);
        out.camera_ids.push((sample % spec.num_cameras) as u16);
    };
    for id in 0..spec.num_ids {
        for s in 0..spec.samples_per_id {
            emit(&mut train, id, s, &mut rng);
        }
    }
    for id in spec.num_ids..total_ids {
        for s in 0..spec.query_per_id + spec.gallery_per_id {
            let out = if s < spec.query_per_id {
                &mut query
            } else {
                &mut gallery
            };
            emit(out, id, s, &mut rng);
        }
    }

    let (train, train_coeffs) = train.finish(d, k, Split::Train)?;
    let (query, query_coeffs) = query.finish(d, k, Split::Query)?;
    let (gallery, gallery_coeffs) = gallery.finish(d, k, Split::Gallery)?;
    Ok(SynthData {
        train,
        query,
        gallery,
        truth: SynthTruth {
            factors,
            centers: Tensor::new(vec![total_ids, d], centers)?,
            train_coeffs,
            query_coeffs,
            gallery_coeffs,
        },
    })
}

/// One P×K batch: row indices into the set and their contiguous labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Identity-balanced sampler: each batch holds `p` distinct identities with
/// `k` samples each.
///
/// Identities are visited in a fresh random order every epoch pass. The last
/// batch of a pass, if short, is topped up with identities outside it.
#[derive(Clone, Debug)]
pub struct PkSampler {
    p: usize,
    k: usize,
    by_label: Vec<Vec<usize>>,
    order: Vec<usize>,
    cursor: usize,
}

impl PkSampler {
    /// `labels` are contiguous class labels, one per row of the set.
    pub fn new(labels: &[usize], p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::Config(format!(
                "P and K must be positive, got P={p} K={k}"
            )));
        }
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        let mut by_label = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            by_label[l].push(i);
        }
        if by_label.iter().any(Vec::is_empty) {
            return Err(Error::Data("labels are not contiguous".into()));
        }
        if classes < p {
            return Err(Error::Config(format!(
                "P={p} identities per batch but the set has only {classes}"
            )));
        }
        Ok(Self {
            p,
            k,
            order: Vec::new(),
            cursor: 0,
            by_label,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn num_classes(&self) -> usize {
        self.by_label.len()
    }

    /// `ceil(C / P)`.
    pub fn batches_per_epoch(&self) -> usize {
        self.num_classes().div_ceil(self.p)
    }

    /// Starts a new pass over the identities.
    pub fn begin_epoch(&mut self, rng: &mut Rng) {
        self.order = (0..self.num_classes()).collect();
        rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, rng: &mut Rng) -> Batch {
        if self.cursor >= self.order.len() {
            self.begin_epoch(rng);
        }
        let end = (self.cursor + self.p).min(self.order.len());
        let mut ids = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        if ids.len() < self.p {
            let mut rest: Vec<usize> = (0..self.num_classes())
                .filter(|c| !ids.contains(c))
                .collect();
            rng.shuffle(&mut rest);
            ids.extend_from_slice(&rest[..self.p - ids.len()]);
        }

        let mut batch = Batch {
            indices: Vec::with_capacity(self.batch_size()),
            labels: Vec::with_capacity(self.batch_size()),
        };
        for &c in &ids {
            let pool = &self.by_label[c];
            if pool.len() >= self.k {
                let mut pool = pool.clone();
                for i in 0..self.k {
                    let j = i + rng.below(pool.len() - i);
                    pool.swap(i, j);
                }
                batch.indices.extend_from_slice(&pool[..self.k]);
            } else {
                batch.indices.extend_from_slice(pool);
                for _ in pool.len()..self.k {
                    batch.indices.push(pool[rng.below(pool.len())]);
                }
            }
            batch.labels.extend(std::iter::repeat_n(c, self.k));
        }
        batch
    }
}
