//! Optimizer, warmup schedule, the training step and the epoch loop.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, model_entries, model_from_entries};
use crate::data::{FeatureSet, PkSampler};
use crate::error::{Error, Result};
use crate::losses::{
    batch_triplet_loss, cls_loss, elbo_terms, total_loss, total_on_graph, LossComponents,
    LossReport, LossWeights, TripletMetric,
};
use crate::ndtensor::{Graph, Precision, Rng, Scalar, Tensor, Var};
use crate::nets::{one_hot, Model, ModelDims, Param};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity.
    pub k: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub precision: Precision,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Layer widths; `None` derives them from the feature width.
    pub hidden: Option<usize>,
    pub latent: Option<usize>,
    pub variation: Option<usize>,
}

impl Default for TrainConfig {
    /// Full-scale schedule: 300 epochs at lr 1e-5.
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 5e-4,
            epochs: 300,
            warmup_epochs: 10,
            p: 16,
            k: 4,
            weights: LossWeights::default(),
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 0,
            hidden: None,
            latent: None,
            variation: None,
        }
    }
}

impl TrainConfig {
    /// Schedule for the small synthetic benchmark. A few hundred steps at
    /// 1e-5 barely move the weights, so the step size is larger.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.p < 2 || self.k < 1 {
            return Err(Error::Config(format!(
                "batches need P >= 2 identities and K >= 1 samples, got P={} K={}",
                self.p, self.k
            )));
        }
        self.weights.validate()
    }

    pub fn model_dims(&self, features: usize, classes: usize) -> ModelDims {
        let mut dims = ModelDims::new(features, classes);
        if let Some(h) = self.hidden {
            dims.hidden = h;
        }
        if let Some(l) = self.latent {
            dims.latent = l;
            dims.variation = (l / 4).max(1);
        }
        if let Some(m) = self.variation {
            dims.variation = m;
        }
        dims
    }

    /// `(key, value)` pairs recorded at the top of the run log.
    pub fn header(&self) -> Vec<(&'static str, String)> {
        let w = &self.weights;
        vec![
            ("precision", self.precision.name().into()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("p", self.p.to_string()),
            ("k", self.k.to_string()),
            ("alpha", format!("{:?}", w.alpha)),
            ("beta", format!("{:?}", w.beta)),
            ("lambda", format!("{:?}", w.lambda_jst)),
            ("gamma", format!("{:?}", w.gamma)),
            ("label_smoothing", format!("{:?}", w.label_smoothing)),
            ("cc", on_off(w.covariance_constraint).into()),
            ("hierarchical", on_off(w.hierarchical).into()),
            (
                "triplet",
                match w.triplet_metric {
                    TripletMetric::JensenShannon => "js",
                    TripletMetric::Euclidean => "euclidean",
                }
                .into(),
            ),
        ]
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Linear warmup from 1% of the base rate, then constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub lr: f64,
    pub warmup_steps: u64,
}

impl WarmupSchedule {
    pub fn new(config: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            lr: config.lr,
            warmup_steps: (config.warmup_epochs * steps_per_epoch) as u64,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.warmup_steps {
            return self.lr;
        }
        let t = step as f64 / self.warmup_steps as f64;
        self.lr * (0.01 + 0.99 * t)
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Param<T>], weight_decay: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One update of every parameter with its gradient.
    pub fn update(&mut self, params: &mut [Param<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (T::lift(self.beta1), T::lift(self.beta2));
        let one = T::one();
        let c1 = one - T::lift(self.beta1.powi(self.step as i32));
        let c2 = one - T::lift(self.beta2.powi(self.step as i32));
        let (lr, wd, eps) = (T::lift(lr), T::lift(self.weight_decay), T::lift(self.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let mut theta = p.value.data().to_vec();
            let m = self.m[i].data().to_vec();
            let v = self.v[i].data().to_vec();
            let mut m_new = Vec::with_capacity(m.len());
            let mut v_new = Vec::with_capacity(v.len());
            for (j, t) in theta.iter_mut().enumerate() {
                let gj = g.data()[j] + wd * *t;
                let mj = b1 * m[j] + (one - b1) * gj;
                let vj = b2 * v[j] + (one - b2) * gj * gj;
                *t = *t - lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                m_new.push(mj);
                v_new.push(vj);
            }
            let shape = p.value.shape().to_vec();
            p.value = Tensor::new(shape.clone(), theta)?;
            self.m[i] = Tensor::new(shape.clone(), m_new)?;
            self.v[i] = Tensor::new(shape, v_new)?;
        }
        Ok(())
    }

    fn entries(&self, params: &[Param<T>]) -> Vec<Param<f32>> {
        let mut out = Vec::with_capacity(2 * params.len() + 1);
        for (p, (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            out.push(Param {
                name: format!("optim.m.{}", p.name),
                value: m.cast(),
            });
            out.push(Param {
                name: format!("optim.v.{}", p.name),
                value: v.cast(),
            });
        }
        out.push(Param {
            name: "optim.step".into(),
            value: Tensor::scalar(self.step as f32),
        });
        out
    }

    fn from_entries(
        entries: &[Param<f32>],
        params: &[Param<T>],
        weight_decay: f64,
    ) -> Result<Self> {
        let find = |name: String| -> Result<Tensor<T>> {
            entries
                .iter()
                .find(|e| e.name == name)
                .map(|e| e.value.cast())
                .ok_or_else(|| Error::Data(format!("checkpoint lacks `{name}`")))
        };
        let mut opt = Self::new(params, weight_decay);
        for (i, p) in params.iter().enumerate() {
            opt.m[i] = find(format!("optim.m.{}", p.name))?;
            opt.v[i] = find(format!("optim.v.{}", p.name))?;
        }
        opt.step = find("optim.step".into())?.item()?.as_f64() as u64;
        Ok(opt)
    }
}

/// Standard normal draws for both reparameterizations of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise<T> {
    pub eps_z: Tensor<T>,
    pub eps_v: Tensor<T>,
}

impl<T: Scalar> Noise<T> {
    pub fn draw(rng: &mut Rng, batch: usize, dims: ModelDims) -> Self {
        Self {
            eps_z: rng.randn(&[batch, dims.latent]),
            eps_v: rng.randn(&[batch, dims.variation]),
        }
    }
}

/// Graph nodes of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub cls: Var,
    pub jst: Var,
    pub reconx: Var,
    pub klz: Var,
    pub klv: Var,
    pub reconz: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn components<T: Scalar>(&self, g: &Graph<T>) -> Result<LossComponents> {
        let v = |x: Var| g.item(x).map(|t| t.as_f64());
        Ok(LossComponents {
            cls: v(self.cls)?,
            jst: v(self.jst)?,
            reconx: v(self.reconx)?,
            klz: v(self.klz)?,
            klv: v(self.klv)?,
            reconz: v(self.reconz)?,
        })
    }
}

/// Builds the full forward pass and every loss for one batch on `g`, with
/// the model's parameters bound as `params`.
///
/// Order: encode, reparameterize, decode; distill (encode `v`,
/// reparameterize, decode `z̃`); losses; weighted total.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    params: &[Var],
    x: &Tensor<T>,
    labels: &[usize],
    weights: &LossWeights,
    noise: &Noise<T>,
) -> Result<LossNodes> {
    let bound = model.bind_vars(params);
    let dims = model.dims();
    let x = g.constant(x.clone());
    let y = g.constant(one_hot::<T>(labels, dims.classes)?);
    let eps_z = g.constant(noise.eps_z.clone());
    let vnae = bound.vnae(g, x, eps_z)?;
    let (z_tilde, v) = if weights.hierarchical {
        let eps_v = g.constant(noise.eps_v.clone());
        let hvd = bound.hvd(g, vnae.z_sample, y, eps_v)?;
        (Some(hvd.z_tilde), Some(hvd.v))
    } else {
        (None, None)
    };
    let logits = bound.classifier.forward(g, vnae.z.mu)?;
    let cls = cls_loss(g, logits, labels, weights.label_smoothing)?;
    let jst = batch_triplet_loss(g, vnae.z, labels, weights.triplet_metric, weights.gamma)?;
    let terms = elbo_terms(
        g,
        x,
        vnae.x_recon,
        vnae.z,
        z_tilde,
        v,
        weights.covariance_constraint,
    )?;
    let total = total_on_graph(g, cls, jst, &terms, weights)?;
    Ok(LossNodes {
        cls,
        jst,
        reconx: terms.reconx,
        klz: terms.klz,
        klv: terms.klv,
        reconz: terms.reconz,
        total,
    })
}

/// Forward pass and losses of one batch without updating anything.
pub fn batch_losses<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    weights: &LossWeights,
    noise: &Noise<T>,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let params: Vec<Var> = model
        .params()
        .iter()
        .map(|p| g.constant(p.value.clone()))
        .collect();
    let nodes = loss_graph(&mut g, model, &params, x, labels, weights, noise)?;
    total_loss(&nodes.components(&g)?, weights)
}

/// One optimization step: noise is drawn from `rng`, then forward, losses,
/// backward and the update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    weights: &LossWeights,
    opt: &mut Adam<T>,
    lr: f64,
    rng: &mut Rng,
) -> Result<LossReport> {
    let noise = Noise::draw(rng, labels.len(), model.dims());
    let mut g = Graph::new();
    let params: Vec<Var> = model
        .params()
        .iter()
        .map(|p| g.param(p.value.clone()))
        .collect();
    let nodes = loss_graph(&mut g, model, &params, x, labels, weights, &noise)?;
    let report = total_loss(&nodes.components(&g)?, weights)?;
    let grads = g.backward(nodes.total)?;
    let grads: Vec<Tensor<T>> = params.iter().map(|&p| grads.wrt(p).clone()).collect();
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::Diverged { term: "gradient" });
    }
    opt.update(model.params_mut(), &grads, lr)?;
    Ok(report)
}

/// Epoch-mean losses and the rate used on the epoch's last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub report: LossReport,
    pub lr: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch,cls,jst,reconx,klz,klv,reconz,total,lr";

    pub fn csv(&self) -> String {
        let mut line = self.epoch.to_string();
        for v in self.report.values() {
            line.push_str(&format!(",{v:?}"));
        }
        line.push_str(&format!(",{:?}", self.lr));
        line
    }
}

/// Model, optimizer and the number of completed epochs.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub opt: Adam<T>,
    pub epoch: usize,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh model initialized from the config's seed.
    pub fn init(config: &TrainConfig, features: usize, classes: usize) -> Result<Self> {
        let dims = config.model_dims(features, classes);
        let mut rng = Rng::with_stream(config.seed, 0);
        let model = Model::new(dims, config.weights.covariance_constraint, &mut rng)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: Model<T>, config: &TrainConfig) -> Self {
        let opt = Adam::new(model.params(), config.weight_decay);
        Self {
            model,
            opt,
            epoch: 0,
        }
    }

    pub fn entries(&self) -> Vec<Param<f32>> {
        let mut out = model_entries(&self.model);
        out.extend(self.opt.entries(self.model.params()));
        out.push(Param {
            name: "train.epoch".into(),
            value: Tensor::scalar(self.epoch as f32),
        });
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.entries())
    }

    /// Restores a state written by [`TrainState::save`].
    pub fn load(path: &Path, config: &TrainConfig) -> Result<Self> {
        let entries = checkpoint::read(path)?;
        let model: Model<T> = model_from_entries(&entries)?;
        let opt = Adam::from_entries(&entries, model.params(), config.weight_decay)?;
        let epoch = entries
            .iter()
            .find(|e| e.name == "train.epoch")
            .ok_or_else(|| Error::Data("checkpoint lacks `train.epoch`".into()))?
            .value
            .item()?
            .as_f64() as usize;
        Ok(Self { model, opt, epoch })
    }
}

/// Where [`fit`] writes its outputs; `None` skips that output.
#[derive(Clone, Debug, Default)]
pub struct FitOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Extra `# key = value` lines for the log header.
    pub header: Vec<(String, String)>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.hvck"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.hvck")
}

/// Trains from `state` until `config.epochs` epochs are complete.
///
/// Epoch `e` draws its batches and noise from stream `1 + e` of the seed, so a
/// run resumed from a checkpoint continues exactly as the unbroken run. The
/// run log gets a header only when it is created; rows are appended.
pub fn fit<T: Scalar>(
    mut state: TrainState<T>,
    train: &FeatureSet,
    config: &TrainConfig,
    outputs: &FitOutputs,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainState<T>, Vec<EpochRecord>)> {
    config.validate()?;
    let labels = train.label_map();
    let dims = state.model.dims();
    if dims.features != train.dim() || dims.classes != labels.num_classes() {
        return Err(Error::Config(format!(
            "model expects D={} with {} classes, training set has D={} with {} identities",
            dims.features,
            dims.classes,
            train.dim(),
            labels.num_classes()
        )));
    }
    let mut sampler = PkSampler::new(&labels.labels, config.p, config.k)?;
    let steps_per_epoch = sampler.batches_per_epoch();
    let schedule = WarmupSchedule::new(config, steps_per_epoch);

    let mut log = match &outputs.log {
        Some(path) => Some(open_log(path, config, &outputs.header)?),
        None => None,
    };
    let mut history = Vec::new();
    while state.epoch < config.epochs {
        let mut rng = Rng::with_stream(config.seed, 1 + state.epoch as u64);
        sampler.begin_epoch(&mut rng);
        let mut sums = [0.0; 7];
        let mut lr = schedule.lr_at(state.opt.step_count());
        for _ in 0..steps_per_epoch {
            let batch = sampler.next_batch(&mut rng);
            let x: Tensor<T> = train.gather(&batch.indices).cast();
            lr = schedule.lr_at(state.opt.step_count());
            let report = train_step(
                &mut state.model,
                &x,
                &batch.labels,
                &config.weights,
                &mut state.opt,
                lr,
                &mut rng,
            )?;
            for (s, v) in sums.iter_mut().zip(report.values()) {
                *s += v;
            }
        }
        state.epoch += 1;
        let n = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch: state.epoch,
            report: LossReport {
                cls: sums[0] / n,
                jst: sums[1] / n,
                reconx: sums[2] / n,
                klz: sums[3] / n,
                klv: sums[4] / n,
                reconz: sums[5] / n,
                total: sums[6] / n,
            },
            lr,
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", record.csv())?;
        }
        on_epoch(&record);
        history.push(record);
        if let Some(dir) = &outputs.checkpoint_dir {
            if config.checkpoint_every > 0 && state.epoch.is_multiple_of(config.checkpoint_every) {
                state.save(&checkpoint_path(dir, state.epoch))?;
            }
        }
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        state.save(&final_checkpoint_path(dir))?;
    }
    Ok((state, history))
}

fn open_log(path: &Path, config: &TrainConfig, extra: &[(String, String)]) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        let mut head = String::new();
        for (k, v) in config.header() {
            head.push_str(&format!("# {k} = {v}\n"));
        }
        for (k, v) in extra {
            head.push_str(&format!("# {k} = {v}\n"));
        }
        head.push_str(EpochRecord::HEADER);
        head.push('\n');
        f.write_all(head.as_bytes())?;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    #[test]
    fn warmup_examples() {
        let s = WarmupSchedule {
            lr: 2.0,
            warmup_steps: 100,
        };
        assert_eq!(s.lr_at(0), 0.02);
        assert_eq!(s.lr_at(100), 2.0);
        assert_eq!(s.lr_at(5000), 2.0);
        assert!((s.lr_at(50) - (0.01 + 0.99 / 2.0) * 2.0).abs() < 1e-15);
        let none = WarmupSchedule {
            lr: 1.0,
            warmup_steps: 0,
        };
        assert_eq!(none.lr_at(0), 1.0);
    }

    fn tiny_setup() -> (FeatureSet, TrainConfig) {
        let spec = SynthSpec {
            num_ids: 4,
            samples_per_id: 4,
            num_test_ids: 2,
            dim: 8,
            num_variation_factors: 2,
            seed: 5,
            ..SynthSpec::default()
        };
        let config = TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            p: 2,
            k: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        (synth_generate(&spec).unwrap().train, config)
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let (train, config) = tiny_setup();
        let mut state = TrainState::<f32>::init(&config, 8, 4).unwrap();
        let before = state.model.clone();
        let labels = train.label_map().labels;
        let x = train.gather(&[0, 1, 4, 5]);
        let mut rng = Rng::new(0);
        let ys = [labels[0], labels[1], labels[4], labels[5]];
        train_step(
            &mut state.model,
            &x,
            &ys,
            &config.weights,
            &mut state.opt,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(state.model, before);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (train, mut config) = tiny_setup();
        config.epochs = 0;
        config.warmup_epochs = 0;
        let state = TrainState::<f32>::init(&config, 8, 4).unwrap();
        let before = state.model.clone();
        let (after, history) = fit(state, &train, &config, &FitOutputs::default(), |_| {}).unwrap();
        assert!(history.is_empty());
        assert_eq!(after.model, before);
    }

    #[test]
    fn fit_is_deterministic() {
        let (train, config) = tiny_setup();
        let run = || {
            let state = TrainState::<f32>::init(&config, 8, 4).unwrap();
            fit(state, &train, &config, &FitOutputs::default(), |_| {}).unwrap()
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(ha, hb);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn warmup_longer_than_training_rejected() {
        let (_, mut config) = tiny_setup();
        config.warmup_epochs = 4;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }
}
