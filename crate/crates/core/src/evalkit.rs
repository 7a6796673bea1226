//! Retrieval evaluation (mAP, CMC) and embedding export.
//!
//! Protocol: each query ranks the gallery by ascending Euclidean distance,
//! ties broken by gallery index. Gallery items with the query's person id
//! *and* camera id are removed from the ranking. Queries left with no
//! positive are skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{write_features, FeatureSet};
use crate::error::{Error, Result};
use crate::ndtensor::{Scalar, Tensor, TensorError};
use crate::nets::Model;

/// Maps a `[n, D]` feature batch to `[n, L]` embeddings.
pub trait Embed: Sync {
    fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f64>>;
}

/// Identity embedding: retrieval on the raw features.
#[derive(Clone, Copy, Debug, Default)]
pub struct RawFeatures;

impl Embed for RawFeatures {
    fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f64>> {
        Ok(x.cast())
    }
}

impl<T: Scalar> Embed for Model<T> {
    fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f64>> {
        if x.rows() == 0 {
            return Ok(Tensor::zeros(&[0, self.dims().latent]));
        }
        Ok(self.infer_embedding(&x.cast())?.cast())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// Mean AP over the queries that were not skipped.
    pub map: f64,
    /// `cmc[k - 1]` is the fraction of counted queries with a positive in the
    /// top `k`; one entry per gallery item.
    pub cmc: Vec<f64>,
    /// Per-query AP; `None` for skipped queries.
    pub average_precisions: Vec<Option<f64>>,
}

impl RetrievalResult {
    pub fn valid_queries(&self) -> usize {
        self.average_precisions.iter().flatten().count()
    }

    /// CMC at rank `k` (1-based); ranks past the gallery saturate.
    pub fn cmc_at(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        self.cmc
            .get(k - 1)
            .or(self.cmc.last())
            .copied()
            .unwrap_or(0.0)
    }

    /// `metric,value` lines: map, cmc1, cmc5, cmc10.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in [
            ("map", self.map),
            ("cmc1", self.cmc_at(1)),
            ("cmc5", self.cmc_at(5)),
            ("cmc10", self.cmc_at(10)),
        ] {
            writeln!(out, "{name},{v}").expect("writing to a String");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_csv())?)
    }
}

/// `[n, m]` Euclidean distances between the rows of `a` and `b`.
pub fn pairwise_dist<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(TensorError::Shape {
            op: "pairwise_dist",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    let (n, m) = (a.rows(), b.rows());
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            let ss: T = ai
                .iter()
                .zip(b.row(j))
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            data.push(ss.sqrt());
        }
    }
    Ok(Tensor::new(vec![n, m], data)?)
}

/// Person and camera ids of one side of the retrieval problem.
#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub person_ids: &'a [u32],
    pub camera_ids: &'a [u16],
}

impl<'a> From<&'a FeatureSet> for Labels<'a> {
    fn from(set: &'a FeatureSet) -> Self {
        Self {
            person_ids: set.person_ids(),
            camera_ids: set.camera_ids(),
        }
    }
}

/// AP and first-hit rank (1-based, after filtering) of one query, or `None`
/// when it has no valid positive.
pub fn score_query(dist: &[f64], pid: u32, cam: u16, gallery: Labels<'_>) -> Option<(f64, usize)> {
    let mut order: Vec<usize> = (0..dist.len())
        .filter(|&j| !(gallery.person_ids[j] == pid && gallery.camera_ids[j] == cam))
        .collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for (r, &j) in order.iter().enumerate() {
        if gallery.person_ids[j] == pid {
            hits += 1;
            precision_sum += hits as f64 / (r + 1) as f64;
            first.get_or_insert(r + 1);
        }
    }
    first.map(|f| (precision_sum / hits as f64, f))
}

/// Scores a precomputed `[queries, gallery]` distance matrix.
pub fn evaluate_distances(
    dist: &Tensor<f64>,
    query: Labels<'_>,
    gallery: Labels<'_>,
    parallel: bool,
) -> Result<RetrievalResult> {
    let (nq, ng) = (query.person_ids.len(), gallery.person_ids.len());
    if dist.shape() != [nq, ng] {
        return Err(TensorError::Shape {
            op: "evaluate",
            lhs: dist.shape().to_vec(),
            rhs: vec![nq, ng],
        }
        .into());
    }
    let score = |i: usize| {
        score_query(
            dist.row(i),
            query.person_ids[i],
            query.camera_ids[i],
            gallery,
        )
    };
    let scored: Vec<Option<(f64, usize)>> = if parallel {
        (0..nq).into_par_iter().map(score).collect()
    } else {
        (0..nq).map(score).collect()
    };

    let valid = scored.iter().flatten().count();
    if valid == 0 {
        return Err(Error::Evaluation(
            "no query has a positive in the gallery after camera filtering".into(),
        ));
    }
    let mut cmc = vec![0.0; ng];
    let mut ap_sum = 0.0;
    for &(ap, first) in scored.iter().flatten() {
        ap_sum += ap;
        for c in &mut cmc[first - 1..] {
            *c += 1.0;
        }
    }
    cmc.iter_mut().for_each(|c| *c /= valid as f64);
    Ok(RetrievalResult {
        map: ap_sum / valid as f64,
        cmc,
        average_precisions: scored.into_iter().map(|s| s.map(|(ap, _)| ap)).collect(),
    })
}

/// Embeds both sets and scores the retrieval in parallel over queries.
pub fn evaluate(
    query: &FeatureSet,
    gallery: &FeatureSet,
    embed: &impl Embed,
) -> Result<RetrievalResult> {
    evaluate_with(query, gallery, embed, true)
}

pub fn evaluate_with(
    query: &FeatureSet,
    gallery: &FeatureSet,
    embed: &impl Embed,
    parallel: bool,
) -> Result<RetrievalResult> {
    if query.dim() != gallery.dim() {
        return Err(TensorError::Shape {
            op: "evaluate",
            lhs: vec![query.dim()],
            rhs: vec![gallery.dim()],
        }
        .into());
    }
    let q = embed.embed(query.features())?;
    let g = embed.embed(gallery.features())?;
    let dist = pairwise_dist(&q, &g)?;
    evaluate_distances(&dist, query.into(), gallery.into(), parallel)
}

/// Paths written by [`export_embeddings`].
pub fn export_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".mu.hvft"), with(".sigma.hvft"))
}

/// Writes the encoder means and standard deviations of every row of `set`,
/// with its labels, as two feature files `<prefix>.mu.hvft` and
/// `<prefix>.sigma.hvft`.
pub fn export_embeddings<T: Scalar>(
    set: &FeatureSet,
    model: &Model<T>,
    prefix: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let latent = model.dims().latent;
    let (mu, log_sigma) = if set.is_empty() {
        (Tensor::zeros(&[0, latent]), Tensor::zeros(&[0, latent]))
    } else {
        let (mu, ls) = model.encode(&set.features().cast::<T>())?;
        (mu.cast::<f32>(), ls.map(|v| v.exp()).cast::<f32>())
    };
    let labelled =
        |t: Tensor<f32>| FeatureSet::new(t, set.person_ids().to_vec(), set.camera_ids().to_vec());
    let (mu_path, sigma_path) = export_paths(prefix);
    write_features(&labelled(mu)?, &mu_path)?;
    write_features(&labelled(log_sigma)?, &sigma_path)?;
    Ok((mu_path, sigma_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels<'a>(p: &'a [u32], c: &'a [u16]) -> Labels<'a> {
        Labels {
            person_ids: p,
            camera_ids: c,
        }
    }

    #[test]
    fn ap_example() {
        // positives at ranks 2 and 5
        let dist = [0.1, 0.2, 0.3, 0.4, 0.5];
        let (ap, first) = score_query(&dist, 1, 0, labels(&[9, 1, 9, 9, 1], &[1; 5])).unwrap();
        assert!((ap - 0.45).abs() < 1e-15);
        assert_eq!(first, 2);
    }

    #[test]
    fn all_positive_is_perfect() {
        let dist = Tensor::from_rows(&[[0.3, 0.1, 0.2]]).unwrap();
        let r = evaluate_distances(
            &dist,
            labels(&[4], &[0]),
            labels(&[4, 4, 4], &[1, 2, 3]),
            false,
        )
        .unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.cmc_at(1), 1.0);
    }

    #[test]
    fn same_camera_positive_is_skipped() {
        let dist = Tensor::from_rows(&[[0.1, 0.5], [0.1, 0.5]]).unwrap();
        let r = evaluate_distances(
            &dist,
            labels(&[1, 2], &[0, 0]),
            labels(&[1, 2], &[0, 1]),
            false,
        )
        .unwrap();
        assert_eq!(r.average_precisions[0], None);
        assert_eq!(r.valid_queries(), 1);
        // query 2 finds its positive at rank 2 behind the foreign id
        assert!((r.map - 0.5).abs() < 1e-15);
        assert_eq!(r.cmc, vec![0.0, 1.0]);
    }

    #[test]
    fn nothing_valid_is_an_error() {
        let dist = Tensor::from_rows(&[[0.1]]).unwrap();
        assert!(matches!(
            evaluate_distances(&dist, labels(&[1], &[0]), labels(&[1], &[0]), false),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let dist = [0.5, 0.5];
        let (ap, _) = score_query(&dist, 1, 0, labels(&[2, 1], &[1, 1])).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn pairwise_examples() {
        let a = Tensor::from_rows(&[[0.0f64, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[3.0f64, 4.0]]).unwrap();
        assert_eq!(pairwise_dist(&a, &b).unwrap().data(), &[5.0]);
        assert_eq!(pairwise_dist(&b, &b).unwrap().data(), &[0.0]);
        assert!(pairwise_dist(&a, &Tensor::<f64>::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = RetrievalResult {
            map: 0.25,
            cmc: vec![0.5, 1.0],
            average_precisions: vec![Some(0.25)],
        };
        assert_eq!(
            r.to_csv(),
            "metric,value\nmap,0.25\ncmc1,0.5\ncmc5,1\ncmc10,1\n"
        );
    }
}
