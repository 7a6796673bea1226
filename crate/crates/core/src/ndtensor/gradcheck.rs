use super::{Graph, Result, Tensor, TensorError, Var};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub passed: bool,
    /// Which input tensor and flat coordinate had the largest error.
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub error: f64,
    pub coordinates: usize,
}

/// Checks `backward()` against central differences for a scalar function of one tensor.
pub fn gradcheck<F>(f: F, point: &Tensor<f64>, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    gradcheck_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), h, tol)
}

/// Same as [`gradcheck`] for a function of several tensors; every coordinate
/// of every input is probed.
pub fn gradcheck_many<F>(f: F, points: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.item(out)?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                op: "gradcheck probe",
            });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v).clone()).collect();

    let mut report = GradcheckReport {
        passed: true,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        error: 0.0,
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<f64>> = points.to_vec();
    for (k, point) in points.iter().enumerate() {
        for i in 0..point.len() {
            let plus = perturb(point, i, h);
            let minus = perturb(point, i, -h);
            probe[k] = plus;
            let fp = eval(&probe)?;
            probe[k] = minus;
            let fm = eval(&probe)?;
            probe[k] = point.clone();

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k].data()[i];
            let error = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if error >= report.error {
                report.error = error;
                report.worst_input = k;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.error < tol;
    Ok(report)
}

fn perturb(t: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[i] += delta;
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let r = gradcheck(|g, x| g.mul(x, x), &Tensor::scalar(2.0), 1e-5, 1e-5).unwrap();
        assert!(r.passed, "{r:?}");
        assert!((r.analytic - 4.0).abs() < 1e-12);
        assert!((r.numeric - 4.0).abs() < 1e-8);
    }

    #[test]
    fn sign_flipped_backward_fails() {
        let r = gradcheck(
            |g, x| {
                let v = g.value(x).map(|t| t * t);
                g.custom(&[x], v, |d, inputs| {
                    vec![d.mul(inputs[0]).unwrap().map(|t| -2.0 * t)]
                })
            },
            &Tensor::scalar(2.0),
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(!r.passed);
        assert!((r.analytic + 4.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let r = gradcheck(|g, x| g.log(x), &Tensor::scalar(1e-6), 1e-5, 1e-5);
        assert!(r.is_err());
    }
}
