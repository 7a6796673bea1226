//! Encoder/decoder networks and the identity classifier.
//!
//! Parameters live in a [`Model`] as named tensors. Each step binds them to a
//! fresh [`Graph`] with [`Model::bind`], which returns the layer views
//! ([`VnaeEncoder`], [`HvdDecoder`], ...) used to build the forward pass.

use crate::error::{Error, Result};
use crate::gaussian::{log_sigma_floor, reparameterize_rows, DiagGaussian, GaussianRows};
use crate::ndtensor::{Graph, Rng, Scalar, Tensor, TensorError, Var};

/// Upper clamp on emitted log standard deviations.
pub const LOG_SIGMA_CEIL: f64 = 10.0;

/// Layer widths. `features` is D, `latent` is L, `variation` is M, `classes` is C.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub features: usize,
    pub hidden: usize,
    pub latent: usize,
    pub variation: usize,
    pub classes: usize,
}

impl ModelDims {
    /// Defaults: hidden = latent = features, variation = latent / 4 (at least 1).
    pub fn new(features: usize, classes: usize) -> Self {
        Self {
            features,
            hidden: features,
            latent: features,
            variation: (features / 4).max(1),
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ModelDims {
            features,
            hidden,
            latent,
            variation,
            classes,
        } = *self;
        if features == 0 || hidden == 0 || latent == 0 || variation == 0 || classes == 0 {
            return Err(Error::Config(format!(
                "all model widths must be positive: {self:?}"
            )));
        }
        if variation > latent {
            return Err(Error::Config(format!(
                "variation width {variation} exceeds latent width {latent}"
            )));
        }
        Ok(())
    }

    /// Parameters on the inference path (trunk + mean head).
    pub fn inference_params(&self) -> usize {
        (self.features + 1) * self.hidden + (self.hidden + 1) * self.latent
    }

    /// `(name, fan_in, fan_out)` for every affine layer, in storage order.
    fn layers(&self) -> Vec<(&'static str, usize, usize)> {
        let ModelDims {
            features: d,
            hidden: h,
            latent: l,
            variation: m,
            classes: c,
        } = *self;
        vec![
            ("vnae.enc.trunk", d, h),
            ("vnae.enc.mu", h, l),
            ("vnae.enc.logsigma", h, l),
            ("vnae.dec.hidden", l, h),
            ("vnae.dec.out", h, d),
            ("hvd.enc.trunk", l + c, h),
            ("hvd.enc.mu", h, m),
            ("hvd.enc.logsigma", h, m),
            ("hvd.dec.trunk", m + c, h),
            ("hvd.dec.mu", h, l),
            ("hvd.dec.logsigma", h, l),
            ("classifier", l, c),
        ]
    }
}

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    dims: ModelDims,
    covariance_constraint: bool,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Model<T> {
    /// Weights ~ N(0, 2 / fan_in) and zero biases, except the log-σ heads,
    /// which start all-zero so every σ is exactly 1 at step 0.
    pub fn new(dims: ModelDims, covariance_constraint: bool, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let mut params = Vec::new();
        for (name, fan_in, fan_out) in dims.layers() {
            let weight = if name.ends_with(".logsigma") {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                let std = (2.0 / fan_in as f64).sqrt();
                rng.randn::<f64>(&[fan_in, fan_out]).map(|v| v * std).cast()
            };
            params.push(Param {
                name: format!("{name}.weight"),
                value: weight,
            });
            params.push(Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros(&[fan_out]),
            });
        }
        Ok(Self {
            dims,
            covariance_constraint,
            params,
        })
    }

    /// Rebuilds a model from named tensors, inferring widths from their shapes.
    pub fn from_params(params: Vec<Param<T>>, covariance_constraint: bool) -> Result<Self> {
        let shape_of = |name: &str| -> Result<Vec<usize>> {
            params
                .iter()
                .find(|p| p.name == name)
                .map(|p| p.value.shape().to_vec())
                .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
        };
        let trunk = shape_of("vnae.enc.trunk.weight")?;
        let mu = shape_of("vnae.enc.mu.weight")?;
        let hvd_mu = shape_of("hvd.enc.mu.weight")?;
        let cls = shape_of("classifier.weight")?;
        if trunk.len() != 2 || mu.len() != 2 || hvd_mu.len() != 2 || cls.len() != 2 {
            return Err(Error::Data("weight tensors must be matrices".into()));
        }
        let dims = ModelDims {
            features: trunk[0],
            hidden: trunk[1],
            latent: mu[1],
            variation: hvd_mu[1],
            classes: cls[1],
        };
        dims.validate()?;
        let mut ordered = Vec::new();
        for (name, fan_in, fan_out) in dims.layers() {
            for (suffix, shape) in [("weight", vec![fan_in, fan_out]), ("bias", vec![fan_out])] {
                let full = format!("{name}.{suffix}");
                let p = params
                    .iter()
                    .find(|p| p.name == full)
                    .ok_or_else(|| Error::Data(format!("missing parameter `{full}`")))?;
                if p.value.shape() != shape.as_slice() {
                    return Err(Error::Data(format!(
                        "parameter `{full}` has shape {:?}, expected {shape:?}",
                        p.value.shape()
                    )));
                }
                ordered.push(p.clone());
            }
        }
        Ok(Self {
            dims,
            covariance_constraint,
            params: ordered,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn covariance_constraint(&self) -> bool {
        self.covariance_constraint
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            dims: self.dims,
            covariance_constraint: self.covariance_constraint,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Places every parameter on `g`, tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        BoundModel::from_vars(vars, self.dims, self.covariance_constraint)
    }

    /// Views `vars` (one per parameter, in [`Model::params`] order) as a bound model.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundModel {
        assert_eq!(vars.len(), self.params.len(), "one var per parameter");
        BoundModel::from_vars(vars.to_vec(), self.dims, self.covariance_constraint)
    }

    /// Encoder heads only: `(z_mu, z_log_sigma)` for a `[n, D]` batch (or one `[D]` row).
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let x = self.input(&mut g, x)?;
        let z = m.vnae_encoder.forward(&mut g, x)?;
        Ok((g.value(z.mu).clone(), g.value(z.log_sigma).clone()))
    }

    /// The inference embedding: the encoder mean, nothing sampled.
    pub fn infer_embedding(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let x = self.input(&mut g, x)?;
        let mu = m.vnae_encoder.forward_mean(&mut g, x)?;
        Ok(g.value(mu).clone())
    }

    /// Encode, sample with noise from `rng`, decode.
    pub fn vnae_forward(&self, x: &Tensor<T>, rng: &mut Rng) -> Result<VnaeOutput<T>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let x = self.input(&mut g, x)?;
        let rows = g.value(x).rows();
        let eps = g.constant(rng.randn(&[rows, self.dims.latent]));
        let out = m.vnae(&mut g, x, eps)?;
        Ok(VnaeOutput {
            z_mu: g.value(out.z.mu).clone(),
            z_log_sigma: g.value(out.z.log_sigma).clone(),
            z_sample: g.value(out.z_sample).clone(),
            x_recon: g.value(out.x_recon).clone(),
        })
    }

    /// HVD pass on `[n, L]` latent samples with `[n, C]` one-hot identities.
    pub fn hvd_forward(
        &self,
        z_sample: &Tensor<T>,
        one_hot_y: &Tensor<T>,
        rng: &mut Rng,
    ) -> Result<HvdOutput<T>> {
        check_one_hot(one_hot_y, self.dims.classes)?;
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let z = g.constant(as_matrix(z_sample.clone())?);
        let y = g.constant(one_hot_y.clone());
        let rows = g.value(z).rows();
        let eps = g.constant(rng.randn(&[rows, self.dims.variation]));
        let out = m.hvd(&mut g, z, y, eps)?;
        Ok(HvdOutput {
            v_mu: g.value(out.v.mu).clone(),
            v_log_sigma: g.value(out.v.log_sigma).clone(),
            v_sample: g.value(out.v_sample).clone(),
            z_tilde_mu: g.value(out.z_tilde.mu).clone(),
            z_tilde_log_sigma: g.value(out.z_tilde.log_sigma).clone(),
        })
    }

    fn input(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<Var> {
        let x = as_matrix(x.clone())?;
        if x.cols() != self.dims.features {
            return Err(TensorError::Shape {
                op: "model input",
                lhs: vec![self.dims.features],
                rhs: x.shape().to_vec(),
            }
            .into());
        }
        Ok(g.constant(x))
    }
}

fn as_matrix<T: Scalar>(x: Tensor<T>) -> Result<Tensor<T>> {
    match x.rank() {
        1 => {
            let n = x.len();
            Ok(x.reshape(&[1, n])?)
        }
        2 => Ok(x),
        _ => Err(TensorError::Contract(format!(
            "expected a vector or matrix, got {:?}",
            x.shape()
        ))
        .into()),
    }
}

/// `[n, classes]` one-hot rows for contiguous labels.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        data[i * classes + y] = T::one();
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}

fn check_one_hot<T: Scalar>(y: &Tensor<T>, classes: usize) -> Result<()> {
    if y.rank() != 2 || y.cols() != classes {
        return Err(TensorError::Contract(format!(
            "one-hot labels must be [n, {classes}], got {:?}",
            y.shape()
        ))
        .into());
    }
    for i in 0..y.rows() {
        let row = y.row(i);
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != classes - 1 {
            return Err(TensorError::Contract(format!("row {i} of y is not one-hot")).into());
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VnaeOutput<T> {
    pub z_mu: Tensor<T>,
    pub z_log_sigma: Tensor<T>,
    pub z_sample: Tensor<T>,
    pub x_recon: Tensor<T>,
}

impl<T: Scalar> VnaeOutput<T> {
    pub fn z(&self, i: usize) -> Result<DiagGaussian<T>> {
        Ok(DiagGaussian::new(
            self.z_mu.row(i).to_vec(),
            self.z_log_sigma.row(i).to_vec(),
        )?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HvdOutput<T> {
    pub v_mu: Tensor<T>,
    pub v_log_sigma: Tensor<T>,
    pub v_sample: Tensor<T>,
    pub z_tilde_mu: Tensor<T>,
    pub z_tilde_log_sigma: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: Var,
    pub bias: Var,
}

impl Affine {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(g.affine(x, self.weight, self.bias)?)
    }
}

/// Log standard deviation head output, clamped to `[ln σ_floor, LOG_SIGMA_CEIL]`.
fn log_sigma_head<T: Scalar>(g: &mut Graph<T>, head: &Affine, h: Var) -> Result<Var> {
    let raw = head.forward(g, h)?;
    Ok(g.clamp(raw, T::lift(log_sigma_floor()), T::lift(LOG_SIGMA_CEIL))?)
}

/// `x -> relu(trunk) -> (mu, log_sigma)`.
#[derive(Clone, Copy, Debug)]
pub struct VnaeEncoder {
    pub trunk: Affine,
    pub head_mu: Affine,
    pub head_log_sigma: Affine,
    /// Pins σ to 1; the σ head is then left out of the graph.
    pub covariance_constraint: bool,
}

impl VnaeEncoder {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<GaussianRows> {
        let h = self.trunk.forward(g, x)?;
        let h = g.relu(h)?;
        let mu = self.head_mu.forward(g, h)?;
        let log_sigma = if self.covariance_constraint {
            let shape = g.shape(mu).to_vec();
            g.constant(Tensor::zeros(&shape))
        } else {
            log_sigma_head(g, &self.head_log_sigma, h)?
        };
        Ok(GaussianRows { mu, log_sigma })
    }

    pub fn forward_mean<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.trunk.forward(g, x)?;
        let h = g.relu(h)?;
        self.head_mu.forward(g, h)
    }
}

/// `z -> relu(hidden) -> out`.
#[derive(Clone, Copy, Debug)]
pub struct VnaeDecoder {
    pub hidden: Affine,
    pub out: Affine,
}

impl VnaeDecoder {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let h = self.hidden.forward(g, z)?;
        let h = g.relu(h)?;
        self.out.forward(g, h)
    }
}

/// `q(v | z, y)`: `[z_sample, one_hot(y)] -> relu(trunk) -> (v_mu, v_log_sigma)`.
#[derive(Clone, Copy, Debug)]
pub struct HvdEncoder {
    pub trunk: Affine,
    pub head_mu: Affine,
    pub head_log_sigma: Affine,
}

impl HvdEncoder {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        z_sample: Var,
        one_hot_y: Var,
    ) -> Result<GaussianRows> {
        let input = g.concat_cols(z_sample, one_hot_y)?;
        let h = self.trunk.forward(g, input)?;
        let h = g.relu(h)?;
        let mu = self.head_mu.forward(g, h)?;
        let log_sigma = log_sigma_head(g, &self.head_log_sigma, h)?;
        Ok(GaussianRows { mu, log_sigma })
    }
}

/// `p(z | v, y)`: `[v_sample, one_hot(y)] -> relu(trunk) -> (z̃_mu, z̃_log_sigma)`.
#[derive(Clone, Copy, Debug)]
pub struct HvdDecoder {
    pub trunk: Affine,
    pub head_mu: Affine,
    pub head_log_sigma: Affine,
}

impl HvdDecoder {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        v_sample: Var,
        one_hot_y: Var,
    ) -> Result<GaussianRows> {
        let input = g.concat_cols(v_sample, one_hot_y)?;
        let h = self.trunk.forward(g, input)?;
        let h = g.relu(h)?;
        let mu = self.head_mu.forward(g, h)?;
        let log_sigma = log_sigma_head(g, &self.head_log_sigma, h)?;
        Ok(GaussianRows { mu, log_sigma })
    }
}

/// Identity logits from `z_mu`.
#[derive(Clone, Copy, Debug)]
pub struct Classifier {
    pub affine: Affine,
}

impl Classifier {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, z_mu: Var) -> Result<Var> {
        self.affine.forward(g, z_mu)
    }
}

pub struct VnaePass {
    pub z: GaussianRows,
    pub z_sample: Var,
    pub x_recon: Var,
}

pub struct HvdPass {
    pub v: GaussianRows,
    pub v_sample: Var,
    pub z_tilde: GaussianRows,
}

/// A [`Model`]'s parameters placed on one graph.
pub struct BoundModel {
    pub vnae_encoder: VnaeEncoder,
    pub vnae_decoder: VnaeDecoder,
    pub hvd_encoder: HvdEncoder,
    pub hvd_decoder: HvdDecoder,
    pub classifier: Classifier,
    /// Same order as [`Model::params`].
    pub params: Vec<Var>,
}

impl BoundModel {
    fn from_vars(vars: Vec<Var>, dims: ModelDims, covariance_constraint: bool) -> Self {
        debug_assert_eq!(vars.len(), 2 * dims.layers().len());
        let layer = |i: usize| Affine {
            weight: vars[2 * i],
            bias: vars[2 * i + 1],
        };
        Self {
            vnae_encoder: VnaeEncoder {
                trunk: layer(0),
                head_mu: layer(1),
                head_log_sigma: layer(2),
                covariance_constraint,
            },
            vnae_decoder: VnaeDecoder {
                hidden: layer(3),
                out: layer(4),
            },
            hvd_encoder: HvdEncoder {
                trunk: layer(5),
                head_mu: layer(6),
                head_log_sigma: layer(7),
            },
            hvd_decoder: HvdDecoder {
                trunk: layer(8),
                head_mu: layer(9),
                head_log_sigma: layer(10),
            },
            classifier: Classifier { affine: layer(11) },
            params: vars,
        }
    }

    /// Encode `x`, reparameterize with `eps`, decode.
    pub fn vnae<T: Scalar>(&self, g: &mut Graph<T>, x: Var, eps: Var) -> Result<VnaePass> {
        let z = self.vnae_encoder.forward(g, x)?;
        let z_sample = reparameterize_rows(g, z, eps)?;
        let x_recon = self.vnae_decoder.forward(g, z_sample)?;
        Ok(VnaePass {
            z,
            z_sample,
            x_recon,
        })
    }

    /// Encode `(z_sample, y)` to `v`, reparameterize with `eps`, decode to `z̃`.
    pub fn hvd<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        z_sample: Var,
        one_hot_y: Var,
        eps: Var,
    ) -> Result<HvdPass> {
        let v = self.hvd_encoder.forward(g, z_sample, one_hot_y)?;
        let v_sample = reparameterize_rows(g, v, eps)?;
        let z_tilde = self.hvd_decoder.forward(g, v_sample, one_hot_y)?;
        Ok(HvdPass {
            v,
            v_sample,
            z_tilde,
        })
    }
}
