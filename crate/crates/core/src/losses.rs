//! Loss terms and their weighted assembly.
//!
//! Every term enters the total as a non-negative penalty:
//!
//! ```text
//! total = cls + λ·jst + α·(reconx + β·(klz' + klv))
//! klz'  = klz              without the covariance constraint
//!       = reconz + klz     with it
//! ```
//!
//! Reconstruction terms are mean squared errors averaged over elements, and
//! KL terms are averaged the same way (per latent dimension, per sample) so
//! the two families share a scale.

use crate::error::{Error, Result};
use crate::gaussian::{js_closed, js_rows, kl_rows, DiagGaussian, GaussianRows};
use crate::ndtensor::{Graph, Scalar, Tensor, TensorError, Var};

/// Stabilizer added under the square root of Euclidean triplet distances.
pub const EUCLIDEAN_EPS: f64 = 1e-12;

/// Distance used by the triplet term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletMetric {
    /// JS divergence between latent Gaussians (bits, clamped to [0, 1]).
    JensenShannon,
    /// Euclidean distance between latent means.
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// α, weight of the whole generative block.
    pub alpha: f64,
    /// β, weight of the KL terms inside it.
    pub beta: f64,
    /// λ, weight of the triplet term.
    pub lambda_jst: f64,
    /// γ, triplet margin.
    pub gamma: f64,
    pub label_smoothing: f64,
    pub covariance_constraint: bool,
    pub triplet_metric: TripletMetric,
    /// Use the conditional prior `p(z | v, y)` and the `v` KL term; otherwise
    /// `z` is regularized toward `N(0, I)`.
    pub hierarchical: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 1.0,
            lambda_jst: 1.0,
            gamma: 0.5,
            label_smoothing: 0.1,
            covariance_constraint: true,
            triplet_metric: TripletMetric::JensenShannon,
            hierarchical: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(
            self.alpha >= 0.0,
            format!("alpha must be >= 0, got {}", self.alpha),
        )?;
        check(
            self.beta >= 0.0,
            format!("beta must be >= 0, got {}", self.beta),
        )?;
        check(
            self.lambda_jst >= 0.0,
            format!("lambda must be >= 0, got {}", self.lambda_jst),
        )?;
        check(
            (0.0..=1.0).contains(&self.gamma),
            format!("gamma must lie in [0, 1], got {}", self.gamma),
        )?;
        check(
            (0.0..0.5).contains(&self.label_smoothing),
            format!(
                "label smoothing must lie in [0, 0.5), got {}",
                self.label_smoothing
            ),
        )
    }
}

/// Raw loss terms of one step (nats, except `jst` which is in bits when the
/// JS metric is used).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub cls: f64,
    pub jst: f64,
    pub reconx: f64,
    pub klz: f64,
    pub klv: f64,
    pub reconz: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub jst: f64,
    pub reconx: f64,
    pub klz: f64,
    pub klv: f64,
    pub reconz: f64,
    pub total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 7] = ["cls", "jst", "reconx", "klz", "klv", "reconz", "total"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.cls,
            self.jst,
            self.reconx,
            self.klz,
            self.klv,
            self.reconz,
            self.total,
        ]
    }

    pub fn components(&self) -> LossComponents {
        LossComponents {
            cls: self.cls,
            jst: self.jst,
            reconx: self.reconx,
            klz: self.klz,
            klv: self.klv,
            reconz: self.reconz,
        }
    }
}

/// Assembles the total from its components. Fails naming the first
/// non-finite term.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<LossReport> {
    for (term, v) in [
        ("cls", c.cls),
        ("jst", c.jst),
        ("reconx", c.reconx),
        ("klz", c.klz),
        ("klv", c.klv),
        ("reconz", c.reconz),
    ] {
        if !v.is_finite() {
            return Err(Error::Diverged { term });
        }
    }
    let klz_term = if w.covariance_constraint {
        c.reconz + c.klz
    } else {
        c.klz
    };
    let total = c.cls + w.lambda_jst * c.jst + w.alpha * (c.reconx + w.beta * (klz_term + c.klv));
    if !total.is_finite() {
        return Err(Error::Diverged { term: "total" });
    }
    Ok(LossReport {
        cls: c.cls,
        jst: c.jst,
        reconx: c.reconx,
        klz: c.klz,
        klv: c.klv,
        reconz: c.reconz,
        total,
    })
}

/// Label-smoothed cross-entropy, averaged over the batch.
///
/// Targets are `(1 - eps)` on the true class plus `eps / C` everywhere.
pub fn cls_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    eps: f64,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TensorError::Shape {
            op: "cls_loss",
            lhs: shape,
            rhs: vec![labels.len()],
        }
        .into());
    }
    let (b, c) = (shape[0], shape[1]);
    let mut targets = vec![T::lift(eps / c as f64); b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Data(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        targets[i * c + y] = T::lift(1.0 - eps + eps / c as f64);
    }
    let targets = g.constant(Tensor::new(vec![b, c], targets)?);
    let log_probs = g.log_softmax_rows(logits)?;
    let weighted = g.mul(log_probs, targets)?;
    let total = g.sum(weighted)?;
    Ok(g.scale(total, T::lift(-1.0 / b as f64))?)
}

fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

/// `max(d(a, p) - d(a, n) + γ, 0)` with Euclidean `d`.
pub fn triplet_loss<T: Scalar>(anchor: &[T], pos: &[T], neg: &[T], gamma: T) -> Result<T> {
    if anchor.len() != pos.len() || anchor.len() != neg.len() {
        return Err(TensorError::Shape {
            op: "triplet_loss",
            lhs: vec![anchor.len()],
            rhs: vec![pos.len(), neg.len()],
        }
        .into());
    }
    Ok((euclidean(anchor, pos) - euclidean(anchor, neg) + gamma).max(T::zero()))
}

/// `max(JS(a, p) - JS(a, n) + γ, 0)`; lies in `[0, 1 + γ]`.
pub fn js_triplet_loss<T: Scalar>(
    anchor: &DiagGaussian<T>,
    pos: &DiagGaussian<T>,
    neg: &DiagGaussian<T>,
    gamma: T,
) -> Result<T> {
    let ap = js_closed(anchor, pos)?;
    let an = js_closed(anchor, neg)?;
    Ok((ap - an + gamma).max(T::zero()))
}

/// Batch indices of one mined triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// For each anchor with at least one other same-label sample: the farthest
/// positive and the nearest negative under `dist` (`[B, B]`). Ties go to the
/// lowest index.
pub fn batch_hard_mine(dist: &Tensor<f64>, labels: &[usize]) -> Result<Vec<Triplet>> {
    let b = labels.len();
    if dist.shape() != [b, b] {
        return Err(TensorError::Shape {
            op: "batch_hard_mine",
            lhs: dist.shape().to_vec(),
            rhs: vec![b, b],
        }
        .into());
    }
    let first = labels.first().copied();
    if labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::Data(
            "mining needs at least two identities in the batch".into(),
        ));
    }
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            let d = dist.get2(i, j);
            if labels[j] == labels[i] {
                if j != i && pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((n, _))) = (pos, neg) {
            out.push(Triplet {
                anchor: i,
                positive: p,
                negative: n,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Data(
            "no identity in the batch has two samples".into(),
        ));
    }
    Ok(out)
}

/// `[B, B]` matrix of [`js_closed`] between latent Gaussians.
pub fn pairwise_js<T: Scalar>(latents: &[DiagGaussian<T>]) -> Result<Tensor<f64>> {
    let b = latents.len();
    let mut data = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let d = js_closed(&latents[i], &latents[j])?.as_f64();
            data[i * b + j] = d;
            data[j * b + i] = d;
        }
    }
    Ok(Tensor::new(vec![b, b], data)?)
}

/// `[B, B]` Euclidean distances between the rows of `points`.
pub fn pairwise_euclidean<T: Scalar>(points: &Tensor<T>) -> Tensor<f64> {
    let b = points.rows();
    let mut data = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let d = euclidean(points.row(i), points.row(j)).as_f64();
            data[i * b + j] = d;
            data[j * b + i] = d;
        }
    }
    Tensor::new(vec![b, b], data).expect("square matrix")
}

/// Mines batch-hard triplets on the current latent values and returns the
/// mean triplet loss over them.
pub fn batch_triplet_loss<T: Scalar>(
    g: &mut Graph<T>,
    z: GaussianRows,
    labels: &[usize],
    metric: TripletMetric,
    gamma: f64,
) -> Result<Var> {
    let dist = match metric {
        TripletMetric::JensenShannon => pairwise_js(&z.rows(g)?)?,
        TripletMetric::Euclidean => pairwise_euclidean(g.value(z.mu)),
    };
    let triplets = batch_hard_mine(&dist, labels)?;
    let anchors: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let positives: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
    let negatives: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
    let a = z.gather(g, &anchors)?;
    let p = z.gather(g, &positives)?;
    let n = z.gather(g, &negatives)?;
    let (d_ap, d_an) = match metric {
        TripletMetric::JensenShannon => (js_rows(g, a, p)?, js_rows(g, a, n)?),
        TripletMetric::Euclidean => (
            euclidean_rows(g, a.mu, p.mu)?,
            euclidean_rows(g, a.mu, n.mu)?,
        ),
    };
    let gap = g.sub(d_ap, d_an)?;
    let gap = g.offset(gap, T::lift(gamma))?;
    let hinge = g.relu(gap)?;
    Ok(g.mean(hinge)?)
}

fn euclidean_rows<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let sq = g.square(diff)?;
    let ss = g.sum_rows(sq)?;
    let ss = g.offset(ss, T::lift(EUCLIDEAN_EPS))?;
    Ok(g.sqrt(ss)?)
}

/// Mean squared error over all elements.
pub fn mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::Shape {
            op: "mse",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        }
        .into());
    }
    let diff = g.sub(a, b)?;
    let sq = g.square(diff)?;
    Ok(g.mean(sq)?)
}

/// Batch mean of `KL(p ‖ q)` divided by the latent width.
fn kl_per_dim<T: Scalar>(g: &mut Graph<T>, p: GaussianRows, q: GaussianRows) -> Result<Var> {
    let width = g.shape(p.mu)[1];
    let kl = kl_rows(g, p, q)?;
    let m = g.mean(kl)?;
    Ok(g.scale(m, T::lift(1.0 / width as f64))?)
}

/// Graph nodes of the generative terms.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub reconx: Var,
    pub klz: Var,
    pub klv: Var,
    pub reconz: Var,
}

/// Generative terms of one batch.
///
/// `z_tilde` is the conditional prior on `z` and `v` the variation posterior;
/// pass `None` for both to regularize `z` toward `N(0, I)` instead. With the
/// covariance constraint, `klz = KL(N(z_mu, I) ‖ N(0, I))` and
/// `reconz = mse(z_mu, z̃_mu)`; without it `klz = KL(z ‖ z̃)` and `reconz = 0`.
pub fn elbo_terms<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    x_recon: Var,
    z: GaussianRows,
    z_tilde: Option<GaussianRows>,
    v: Option<GaussianRows>,
    covariance_constraint: bool,
) -> Result<ElboTerms> {
    let reconx = mse(g, x, x_recon)?;
    let z_shape = g.shape(z.mu).to_vec();
    let zero = || Tensor::scalar(T::zero());
    let (klz, reconz) = if covariance_constraint {
        let unit = GaussianRows {
            mu: z.mu,
            log_sigma: g.constant(Tensor::zeros(&z_shape)),
        };
        let prior = GaussianRows::standard(g, &z_shape);
        let klz = kl_per_dim(g, unit, prior)?;
        let reconz = match z_tilde {
            Some(zt) => mse(g, z.mu, zt.mu)?,
            None => g.constant(zero()),
        };
        (klz, reconz)
    } else {
        let prior = match z_tilde {
            Some(zt) => zt,
            None => GaussianRows::standard(g, &z_shape),
        };
        (kl_per_dim(g, z, prior)?, g.constant(zero()))
    };
    let klv = match v {
        Some(v) => {
            let v_shape = g.shape(v.mu).to_vec();
            let prior = GaussianRows::standard(g, &v_shape);
            kl_per_dim(g, v, prior)?
        }
        None => g.constant(zero()),
    };
    Ok(ElboTerms {
        reconx,
        klz,
        klv,
        reconz,
    })
}

/// Weighted total on the graph; mirrors [`total_loss`].
pub fn total_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    cls: Var,
    jst: Var,
    terms: &ElboTerms,
    w: &LossWeights,
) -> Result<Var> {
    let klz_term = if w.covariance_constraint {
        g.add(terms.reconz, terms.klz)?
    } else {
        terms.klz
    };
    let kl = g.add(klz_term, terms.klv)?;
    let kl = g.scale(kl, T::lift(w.beta))?;
    let gen = g.add(terms.reconx, kl)?;
    let gen = g.scale(gen, T::lift(w.alpha))?;
    let jst = g.scale(jst, T::lift(w.lambda_jst))?;
    let total = g.add(cls, jst)?;
    Ok(g.add(total, gen)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_cls(logits: &[f64], c: usize, labels: &[usize], eps: f64) -> f64 {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::new(vec![labels.len(), c], logits.to_vec()).unwrap());
        let loss = cls_loss(&mut g, l, labels, eps).unwrap();
        g.item(loss).unwrap()
    }

    #[test]
    fn cls_examples() {
        let v = eval_cls(&[0.3; 5], 5, &[2], 0.1);
        assert!((v - 5f64.ln()).abs() < 1e-12);
        let v = eval_cls(&[3f64.ln(), 0.0], 2, &[0], 0.0);
        assert!((v - -(0.75f64.ln())).abs() < 1e-12);
        assert!((v - 0.28768).abs() < 1e-5);
        let v = eval_cls(&[3f64.ln(), 0.0], 2, &[0], 0.1);
        let expected = -0.95 * 0.75f64.ln() - 0.05 * 0.25f64.ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.34263).abs() < 5e-5);
    }

    #[test]
    fn cls_label_out_of_range() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            cls_loss(&mut g, l, &[3], 0.1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn triplet_examples() {
        // anchor at origin, distances placed on separate axes
        let a = [0.0f64, 0.0];
        assert_eq!(
            triplet_loss(&a, &[0.2, 0.0], &[0.0, 1.0], 0.5).unwrap(),
            0.0
        );
        let v = triplet_loss(&a, &[1.0, 0.0], &[0.0, 0.2], 0.5).unwrap();
        assert!((v - 1.3).abs() < 1e-12);
        let v = triplet_loss(&a, &a, &[0.3, 0.0], 0.5).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
        assert!(triplet_loss(&a, &[0.0], &a, 0.5).is_err());
    }

    #[test]
    fn js_triplet_examples() {
        let g1 = |m: f64| DiagGaussian::from_sigma(vec![m], vec![1.0]).unwrap();
        assert_eq!(
            js_triplet_loss(&g1(0.0), &g1(0.0), &g1(0.0), 0.5).unwrap(),
            0.5
        );
        assert_eq!(
            js_triplet_loss(&g1(0.0), &g1(0.0), &g1(10.0), 0.5).unwrap(),
            0.0
        );
        let v = js_triplet_loss(&g1(0.0), &g1(2.0), &g1(0.5), 0.5).unwrap();
        assert!((v - 1.17627).abs() < 1e-5, "{v}");
    }

    #[test]
    fn total_examples() {
        assert_eq!(
            total_loss(&LossComponents::default(), &LossWeights::default())
                .unwrap()
                .total,
            0.0
        );
        let c = LossComponents {
            cls: 1.0,
            jst: 0.5,
            reconx: 2.0,
            klz: 0.3,
            klv: 0.2,
            reconz: 0.0,
        };
        let mut w = LossWeights {
            covariance_constraint: false,
            ..LossWeights::default()
        };
        assert!((total_loss(&c, &w).unwrap().total - 2.0).abs() < 1e-12);
        w.beta = 2.0;
        assert!((total_loss(&c, &w).unwrap().total - 2.1).abs() < 1e-12);
    }

    #[test]
    fn non_finite_component_named() {
        let c = LossComponents {
            klv: f64::NAN,
            ..LossComponents::default()
        };
        assert!(matches!(
            total_loss(&c, &LossWeights::default()),
            Err(Error::Diverged { term: "klv" })
        ));
    }

    #[test]
    fn mining_small_batch() {
        // two identities, two samples each, distinct points on a line
        let pts = Tensor::from_rows(&[[0.0], [1.0], [3.0], [7.0]]).unwrap();
        let labels = [0, 0, 1, 1];
        let t = batch_hard_mine(&pairwise_euclidean(&pts), &labels).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(
            t[0],
            Triplet {
                anchor: 0,
                positive: 1,
                negative: 2
            }
        );
        assert_eq!(
            t[3],
            Triplet {
                anchor: 3,
                positive: 2,
                negative: 1
            }
        );
    }

    #[test]
    fn mining_identical_positives() {
        let g = |m: f64| DiagGaussian::from_sigma(vec![m, 0.0], vec![1.0, 1.0]).unwrap();
        let latents = vec![g(0.0), g(0.0), g(1.0), g(1.0)];
        let dist = pairwise_js(&latents).unwrap();
        let t = batch_hard_mine(&dist, &[0, 0, 1, 1]).unwrap();
        assert!(t.iter().all(|t| dist.get2(t.anchor, t.positive) == 0.0));
    }

    #[test]
    fn mining_single_identity_fails() {
        let dist = Tensor::zeros(&[3, 3]);
        assert!(batch_hard_mine(&dist, &[4, 4, 4]).is_err());
    }

    #[test]
    fn cc_klz_is_half_mean_square() {
        let mut g = Graph::<f64>::new();
        let mu = Tensor::from_rows(&[[0.5, -1.0, 2.0], [0.0, 0.3, -0.7]]).unwrap();
        let expected = 0.5 * mu.data().iter().map(|v| v * v).sum::<f64>() / mu.len() as f64;
        let z = GaussianRows {
            mu: g.param(mu.clone()),
            log_sigma: g.param(Tensor::full(&[2, 3], 0.4)),
        };
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let terms = elbo_terms(&mut g, x, x, z, None, None, true).unwrap();
        assert!((g.item(terms.klz).unwrap() - expected).abs() < 1e-12);
        assert_eq!(g.item(terms.reconx).unwrap(), 0.0);
        let grads = g.backward(terms.klz).unwrap();
        assert!(grads.wrt(z.log_sigma).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cc_off_klz_matches_one_d_example() {
        let mut g = Graph::<f64>::new();
        let z = GaussianRows {
            mu: g.constant(Tensor::from_rows(&[[1.0]]).unwrap()),
            log_sigma: g.constant(Tensor::zeros(&[1, 1])),
        };
        let zt = GaussianRows::standard(&mut g, &[1, 1]);
        let x = g.constant(Tensor::zeros(&[1, 1]));
        let terms = elbo_terms(&mut g, x, x, z, Some(zt), None, false).unwrap();
        assert!((g.item(terms.klz).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(g.item(terms.reconz).unwrap(), 0.0);
    }
}
