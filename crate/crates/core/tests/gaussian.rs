use proptest::prelude::*;
use varnorm::gaussian::{js_closed, js_closed_nats, kl_diag, reparameterize, DiagGaussian};
use varnorm::Rng;

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let left = simpson(f, a, m);
    let right = simpson(f, m, b);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    adaptive(f, a, m, left, tol / 2.0, depth - 1) + adaptive(f, m, b, right, tol / 2.0, depth - 1)
}

/// `∫ p log(p / q)` by adaptive Simpson over 12 standard deviations of `p`.
fn kl_quadrature(mp: f64, sp: f64, mq: f64, sq: f64) -> f64 {
    let f = |x: f64| {
        let p = normal_pdf(x, mp, sp);
        if p == 0.0 {
            return 0.0;
        }
        // log-ratio in closed form avoids underflow of q in the tails
        let log_ratio =
            (sq / sp).ln() - 0.5 * ((x - mp) / sp).powi(2) + 0.5 * ((x - mq) / sq).powi(2);
        p * log_ratio
    };
    let (a, b) = (mp - 12.0 * sp, mp + 12.0 * sp);
    // split into panels so the first estimate is not fooled by the narrow peak
    let panels = 24;
    let w = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let lo = a + w * i as f64;
            adaptive(&f, lo, lo + w, simpson(&f, lo, lo + w), 1e-12, 40)
        })
        .sum()
}

fn g1(mu: f64, sigma: f64) -> DiagGaussian<f64> {
    DiagGaussian::from_sigma(vec![mu], vec![sigma]).unwrap()
}

#[test]
fn kl_matches_quadrature() {
    let mut rng = Rng::new(7);
    for _ in 0..100 {
        let mp = rng.uniform() * 6.0 - 3.0;
        let mq = rng.uniform() * 6.0 - 3.0;
        let sp = (rng.uniform() * 3.0 - 1.5).exp();
        let sq = (rng.uniform() * 3.0 - 1.5).exp();
        let closed = kl_diag(&g1(mp, sp), &g1(mq, sq)).unwrap();
        let oracle = kl_quadrature(mp, sp, mq, sq);
        assert!(
            (closed - oracle).abs() < 1e-6,
            "p=({mp},{sp}) q=({mq},{sq}): {closed} vs {oracle}"
        );
    }
}

#[test]
fn kl_sums_over_dimensions() {
    let p = DiagGaussian::from_sigma(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
    let q = DiagGaussian::from_sigma(vec![1.0, 0.0], vec![1.5, 1.0]).unwrap();
    let split = kl_diag(&g1(0.3, 0.5), &g1(1.0, 1.5)).unwrap()
        + kl_diag(&g1(-1.0, 2.0), &g1(0.0, 1.0)).unwrap();
    assert!((kl_diag(&p, &q).unwrap() - split).abs() < 1e-12);
}

#[test]
fn js_matches_its_closed_form_in_one_dimension() {
    // ½[KL(p‖m) + KL(q‖m)] with m = N((μp+μq)/2, (σp²+σq²)/2)
    let (mp, sp, mq, sq) = (0.4, 0.7, -0.2, 1.3);
    let vm: f64 = (sp * sp + sq * sq) / 2.0;
    let mm = (mp + mq) / 2.0;
    let kl =
        |m: f64, s: f64| (vm.sqrt() / s).ln() + (s * s + (m - mm) * (m - mm)) / (2.0 * vm) - 0.5;
    let oracle = 0.5 * (kl(mp, sp) + kl(mq, sq));
    let got = js_closed_nats(&g1(mp, sp), &g1(mq, sq)).unwrap();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
}

#[test]
fn js_saturates_at_one_bit() {
    assert_eq!(js_closed(&g1(0.0, 1.0), &g1(50.0, 1.0)).unwrap(), 1.0);
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let a = DiagGaussian::<f64>::standard(2);
    let b = DiagGaussian::<f64>::standard(3);
    assert!(kl_diag(&a, &b).is_err());
    assert!(js_closed(&a, &b).is_err());
    assert!(reparameterize(&a, &[0.0]).is_err());
}

#[test]
fn sampling_matches_moments() {
    let g = g1(1.5, 0.5);
    let mut rng = Rng::new(3);
    let n = 100_000;
    let xs: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    assert!((mean - 1.5).abs() < 0.01);
    assert!((var - 0.25).abs() < 0.01);
}

fn gaussian(dim: usize) -> impl Strategy<Value = DiagGaussian<f64>> {
    (
        prop::collection::vec(-5.0f64..5.0, dim),
        prop::collection::vec(-2.0f64..2.0, dim),
    )
        .prop_map(|(mu, ls)| DiagGaussian::new(mu, ls).unwrap())
}

fn pair() -> impl Strategy<Value = (DiagGaussian<f64>, DiagGaussian<f64>)> {
    (1usize..6).prop_flat_map(|d| (gaussian(d), gaussian(d)))
}

proptest! {
    #[test]
    fn kl_is_non_negative((p, q) in pair()) {
        prop_assert!(kl_diag(&p, &q).unwrap() >= 0.0);
    }

    #[test]
    fn kl_of_self_is_zero((p, _) in pair()) {
        prop_assert!(kl_diag(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn js_is_symmetric_and_bounded((p, q) in pair()) {
        let pq = js_closed(&p, &q).unwrap();
        let qp = js_closed(&q, &p).unwrap();
        prop_assert_eq!(pq, qp);
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert!(js_closed(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn reparameterize_with_zero_noise_is_the_mean((p, _) in pair()) {
        let zero = vec![0.0; p.dim()];
        prop_assert_eq!(reparameterize(&p, &zero).unwrap(), p.mu().to_vec());
    }
}
