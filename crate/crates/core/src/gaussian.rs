//! Diagonal Gaussians: reparameterized sampling, closed-form KL, and
//! Jensen-Shannon divergence.
//!
//! Two flavours of every divergence live here. Plain functions work on
//! [`DiagGaussian`] values; the `*_rows` functions build the same formulas
//! on a [`Graph`] over `[batch, dim]` parameter matrices so they can be
//! differentiated.
//!
//! The JS divergence uses a Gaussian midpoint whose mean and variance are
//! the averages of the two inputs' means and variances. That keeps it in
//! closed form, but the value is not bounded by one bit the way the true
//! mixture JS is, so [`js_closed`] clamps to `[0, 1]` (bits). [`js_mc`]
//! estimates the true mixture JS by sampling and is used as a test oracle.

use std::f64::consts::LN_2;

use crate::ndtensor::{Graph, Result, Rng, Scalar, Tensor, TensorError, Var};

/// Smallest standard deviation a [`DiagGaussian`] may carry.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// `ln(SIGMA_FLOOR)`, the lower clamp applied to log standard deviations.
pub fn log_sigma_floor() -> f64 {
    SIGMA_FLOOR.ln()
}

/// `N(mu, diag(exp(log_sigma)^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian<T> {
    mu: Vec<T>,
    log_sigma: Vec<T>,
}

impl<T: Scalar> DiagGaussian<T> {
    /// Log standard deviations below `ln(SIGMA_FLOOR)` are raised to it.
    pub fn new(mu: Vec<T>, log_sigma: Vec<T>) -> Result<Self> {
        if mu.len() != log_sigma.len() {
            return Err(TensorError::Shape {
                op: "DiagGaussian::new",
                lhs: vec![mu.len()],
                rhs: vec![log_sigma.len()],
            });
        }
        if mu.iter().chain(&log_sigma).any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "DiagGaussian::new",
            });
        }
        let floor = T::lift(log_sigma_floor());
        let log_sigma = log_sigma.into_iter().map(|s| s.max(floor)).collect();
        Ok(Self { mu, log_sigma })
    }

    /// Builds from standard deviations instead of their logs.
    pub fn from_sigma(mu: Vec<T>, sigma: Vec<T>) -> Result<Self> {
        if sigma.iter().any(|&s| s <= T::zero()) {
            return Err(TensorError::Domain {
                op: "DiagGaussian::from_sigma",
            });
        }
        Self::new(mu, sigma.into_iter().map(|s| s.ln()).collect())
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![T::zero(); dim],
            log_sigma: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn log_sigma(&self) -> &[T] {
        &self.log_sigma
    }

    pub fn sigma(&self) -> Vec<T> {
        self.log_sigma.iter().map(|s| s.exp()).collect()
    }

    /// Log density at `x` (nats).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(x)
            .map(|((&m, &ls), &xi)| {
                let ls = ls.as_f64();
                let z = (xi - m.as_f64()) / ls.exp();
                -0.5 * z * z - ls - half_ln_2pi
            })
            .sum()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<T> {
        let eps: Vec<T> = (0..self.dim()).map(|_| T::lift(rng.normal())).collect();
        reparameterize(self, &eps).expect("noise length equals dimension")
    }
}

fn check_dims<T: Scalar>(op: &'static str, p: &DiagGaussian<T>, q: &DiagGaussian<T>) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(TensorError::Shape {
            op,
            lhs: vec![p.dim()],
            rhs: vec![q.dim()],
        });
    }
    Ok(())
}

/// `mu + eps * sigma`.
pub fn reparameterize<T: Scalar>(g: &DiagGaussian<T>, eps: &[T]) -> Result<Vec<T>> {
    if eps.len() != g.dim() {
        return Err(TensorError::Shape {
            op: "reparameterize",
            lhs: vec![g.dim()],
            rhs: vec![eps.len()],
        });
    }
    Ok(g.mu
        .iter()
        .zip(&g.log_sigma)
        .zip(eps)
        .map(|((&m, &ls), &e)| m + e * ls.exp())
        .collect())
}

/// `KL(p ‖ q)` in nats, summed over dimensions.
pub fn kl_diag<T: Scalar>(p: &DiagGaussian<T>, q: &DiagGaussian<T>) -> Result<T> {
    check_dims("kl_diag", p, q)?;
    let half = T::lift(0.5);
    let two = T::lift(2.0);
    Ok((0..p.dim())
        .map(|d| {
            let (lp, lq) = (p.log_sigma[d], q.log_sigma[d]);
            let diff = p.mu[d] - q.mu[d];
            (lq - lp) + ((two * lp).exp() + diff * diff) / (two * (two * lq).exp()) - half
        })
        .map(|v| v.max(T::zero()))
        .sum())
}

/// JS divergence against the parameter-averaged Gaussian midpoint, in nats,
/// before clamping.
pub fn js_closed_nats<T: Scalar>(p: &DiagGaussian<T>, q: &DiagGaussian<T>) -> Result<T> {
    check_dims("js_closed", p, q)?;
    Ok((0..p.dim())
        .map(|d| js_term(p.mu[d], p.log_sigma[d], q.mu[d], q.log_sigma[d]))
        .sum())
}

/// Per-dimension JS (nats) between `N(mp, e^{2 lp})` and `N(mq, e^{2 lq})`
/// with midpoint variance `(e^{2 lp} + e^{2 lq}) / 2`:
/// `½ ln σm² − ½ (lp + lq) + (mp − mq)² / (8 σm²)`.
fn js_term<T: Scalar>(mp: T, lp: T, mq: T, lq: T) -> T {
    let half = T::lift(0.5);
    let two = T::lift(2.0);
    let var_m = ((two * lp).exp() + (two * lq).exp()) * half;
    let diff = mp - mq;
    half * var_m.ln() - half * (lp + lq) + diff * diff / (T::lift(8.0) * var_m)
}

/// JS divergence in bits, clamped to `[0, 1]`. Symmetric bit-for-bit.
pub fn js_closed<T: Scalar>(p: &DiagGaussian<T>, q: &DiagGaussian<T>) -> Result<T> {
    let bits = js_closed_nats(p, q)? / T::lift(LN_2);
    Ok(bits.max(T::zero()).min(T::one()))
}

/// Monte-Carlo estimate (bits) of the JS divergence against the true
/// equal-weight mixture `m = ½(p + q)`. `n` samples are drawn from each side.
///
/// Not differentiable; meant as a reference for [`js_closed`].
pub fn js_mc<T: Scalar>(
    p: &DiagGaussian<T>,
    q: &DiagGaussian<T>,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    check_dims("js_mc", p, q)?;
    if n == 0 {
        return Err(TensorError::Contract(
            "js_mc needs at least one sample".into(),
        ));
    }
    let side = |from: &DiagGaussian<T>, rng: &mut Rng| -> f64 {
        let mut acc = 0.0;
        let mut x = vec![0.0; from.dim()];
        for _ in 0..n {
            for (d, xi) in x.iter_mut().enumerate() {
                *xi = from.mu[d].as_f64() + from.log_sigma[d].as_f64().exp() * rng.normal();
            }
            let lp = p.log_density(&x);
            let lq = q.log_density(&x);
            let hi = lp.max(lq);
            let lm = hi + ((lp - hi).exp() + (lq - hi).exp()).ln() - LN_2;
            acc += from.log_density(&x) - lm;
        }
        acc / n as f64
    };
    let from_p = side(p, rng);
    let from_q = side(q, rng);
    Ok(0.5 * (from_p + from_q) / LN_2)
}

/// Row-wise Gaussians on a graph: `mu` and `log_sigma` are `[batch, dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussianRows {
    pub mu: Var,
    pub log_sigma: Var,
}

impl GaussianRows {
    /// Row `i` as a plain [`DiagGaussian`].
    pub fn row<T: Scalar>(&self, g: &Graph<T>, i: usize) -> Result<DiagGaussian<T>> {
        DiagGaussian::new(
            g.value(self.mu).row(i).to_vec(),
            g.value(self.log_sigma).row(i).to_vec(),
        )
    }

    pub fn rows<T: Scalar>(&self, g: &Graph<T>) -> Result<Vec<DiagGaussian<T>>> {
        (0..g.value(self.mu).rows())
            .map(|i| self.row(g, i))
            .collect()
    }

    /// `N(0, I)` rows shaped like `like`.
    pub fn standard<T: Scalar>(g: &mut Graph<T>, like: &[usize]) -> Self {
        let mu = g.constant(Tensor::zeros(like));
        let log_sigma = g.constant(Tensor::zeros(like));
        Self { mu, log_sigma }
    }

    pub fn gather<T: Scalar>(&self, g: &mut Graph<T>, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            mu: g.gather_rows(self.mu, indices)?,
            log_sigma: g.gather_rows(self.log_sigma, indices)?,
        })
    }
}

/// `mu + eps * exp(log_sigma)` on a graph.
pub fn reparameterize_rows<T: Scalar>(g: &mut Graph<T>, z: GaussianRows, eps: Var) -> Result<Var> {
    let sigma = g.exp(z.log_sigma)?;
    let noise = g.mul(eps, sigma)?;
    g.add(z.mu, noise)
}

/// Per-row `KL(p ‖ q)` in nats, `[batch]`.
pub fn kl_rows<T: Scalar>(g: &mut Graph<T>, p: GaussianRows, q: GaussianRows) -> Result<Var> {
    let log_ratio = g.sub(q.log_sigma, p.log_sigma)?;
    let two_lp = g.scale(p.log_sigma, T::lift(2.0))?;
    let var_p = g.exp(two_lp)?;
    let two_lq = g.scale(q.log_sigma, T::lift(2.0))?;
    let var_q = g.exp(two_lq)?;
    let diff = g.sub(p.mu, q.mu)?;
    let diff2 = g.square(diff)?;
    let num = g.add(var_p, diff2)?;
    let ratio = g.div(num, var_q)?;
    let half = g.scale(ratio, T::lift(0.5))?;
    let term = g.add(log_ratio, half)?;
    let term = g.offset(term, T::lift(-0.5))?;
    g.sum_rows(term)
}

/// Per-row JS divergence in bits, clamped to `[0, 1]`, `[batch]`.
pub fn js_rows<T: Scalar>(g: &mut Graph<T>, p: GaussianRows, q: GaussianRows) -> Result<Var> {
    let two = T::lift(2.0);
    let two_lp = g.scale(p.log_sigma, two)?;
    let var_p = g.exp(two_lp)?;
    let two_lq = g.scale(q.log_sigma, two)?;
    let var_q = g.exp(two_lq)?;
    let var_sum = g.add(var_p, var_q)?;
    let var_m = g.scale(var_sum, T::lift(0.5))?;
    let log_var_m = g.log(var_m)?;
    let ls_sum = g.add(p.log_sigma, q.log_sigma)?;
    let entropy_gap = g.sub(log_var_m, ls_sum)?;
    let entropy_gap = g.scale(entropy_gap, T::lift(0.5))?;
    let diff = g.sub(p.mu, q.mu)?;
    let diff2 = g.square(diff)?;
    let var_m8 = g.scale(var_m, T::lift(8.0))?;
    let mean_gap = g.div(diff2, var_m8)?;
    let per_dim = g.add(entropy_gap, mean_gap)?;
    let nats = g.sum_rows(per_dim)?;
    let bits = g.scale(nats, T::lift(1.0 / LN_2))?;
    g.clamp(bits, T::zero(), T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(mu: f64, sigma: f64) -> DiagGaussian<f64> {
        DiagGaussian::from_sigma(vec![mu], vec![sigma]).unwrap()
    }

    #[test]
    fn reparameterize_examples() {
        let g = DiagGaussian::from_sigma(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(reparameterize(&g, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(reparameterize(&g1(1.0, 2.0), &[0.5]).unwrap(), vec![2.0]);
        assert!(reparameterize(&g, &[0.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag(&g1(0.3, 1.7), &g1(0.3, 1.7)).unwrap(), 0.0);
        assert!((kl_diag(&g1(1.0, 1.0), &g1(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-12);
        let expected = 0.5f64.ln() + 2.0 - 0.5;
        assert!((kl_diag(&g1(0.0, 2.0), &g1(0.0, 1.0)).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_closed(&g1(0.0, 1.0), &g1(0.0, 1.0)).unwrap(), 0.0);
        let v = js_closed(&g1(0.0, 1.0), &g1(2.0, 1.0)).unwrap();
        assert!((v - 0.5 / LN_2).abs() < 1e-12);
        assert!((v - 0.72135).abs() < 1e-5);
        let far_p = g1(0.0, 1.0);
        let far_q = g1(10.0, 1.0);
        let raw = js_closed_nats(&far_p, &far_q).unwrap() / LN_2;
        assert!((raw - 18.03).abs() < 5e-3, "{raw}");
        assert_eq!(js_closed(&far_p, &far_q).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = DiagGaussian::<f64>::standard(2);
        let b = DiagGaussian::<f64>::standard(3);
        assert!(kl_diag(&a, &b).is_err());
        assert!(js_closed(&a, &b).is_err());
        assert!(js_mc(&a, &b, 10, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn sigma_floor_applies() {
        let g = DiagGaussian::new(vec![0.0f64], vec![-100.0]).unwrap();
        assert!((g.sigma()[0] - SIGMA_FLOOR).abs() < 1e-18);
    }

    #[test]
    fn mc_identical_is_zero() {
        let p = g1(0.4, 0.7);
        let v = js_mc(&p, &p, 1000, &mut Rng::new(1)).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn mc_disjoint_saturates() {
        let v = js_mc(&g1(0.0, 1.0), &g1(10.0, 1.0), 100_000, &mut Rng::new(2)).unwrap();
        assert!((v - 1.0).abs() < 1e-3, "{v}");
    }

    #[test]
    fn mc_agrees_in_near_identical_regime() {
        let (p, q) = (g1(0.0, 1.0), g1(0.1, 1.0));
        let mc = js_mc(&p, &q, 100_000, &mut Rng::new(3)).unwrap();
        let closed = js_closed(&p, &q).unwrap();
        assert!((mc - closed).abs() < 0.005, "{mc} vs {closed}");
    }

    #[test]
    fn rows_match_values() {
        let mut g = Graph::<f64>::new();
        let p = GaussianRows {
            mu: g.constant(Tensor::from_rows(&[[0.0, 1.0], [0.5, -0.2]]).unwrap()),
            log_sigma: g.constant(Tensor::from_rows(&[[0.1, -0.3], [0.0, 0.4]]).unwrap()),
        };
        let q = GaussianRows {
            mu: g.constant(Tensor::from_rows(&[[0.3, 0.2], [-0.5, 0.1]]).unwrap()),
            log_sigma: g.constant(Tensor::from_rows(&[[-0.2, 0.2], [0.3, 0.0]]).unwrap()),
        };
        let kl = kl_rows(&mut g, p, q).unwrap();
        let js = js_rows(&mut g, p, q).unwrap();
        for i in 0..2 {
            let (pi, qi) = (p.row(&g, i).unwrap(), q.row(&g, i).unwrap());
            assert!((g.value(kl).data()[i] - kl_diag(&pi, &qi).unwrap()).abs() < 1e-12);
            assert!((g.value(js).data()[i] - js_closed(&pi, &qi).unwrap()).abs() < 1e-12);
        }
    }
}
