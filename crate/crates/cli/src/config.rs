//! Run configuration: one table of keys shared by the config file and the
//! command-line flags.
//!
//! File syntax is `key = value` per line; `#` starts a comment. Flags use the
//! same keys with `-` in place of `_` and override the file.

use std::fmt::Debug;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use varnorm::data::{Split, SynthSpec};
use varnorm::losses::TripletMetric;
use varnorm::trainkit::TrainConfig;
use varnorm::Precision;

use crate::error::CliError;

/// Output and input locations.
#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub train_features: PathBuf,
    pub query_features: PathBuf,
    pub gallery_features: PathBuf,
    /// Ground-truth factors written by `synth`.
    pub truth: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub log_dir: PathBuf,
    /// Checkpoint read by `eval` and `embed`; `None` means the final
    /// checkpoint in `checkpoint_dir`, `raw` evaluates the features directly.
    pub checkpoint: Option<PathBuf>,
    /// Training state to continue from.
    pub resume: Option<PathBuf>,
    pub metrics: PathBuf,
    pub embed_prefix: PathBuf,
    pub ablate_out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train_features: "data/train.hvft".into(),
            query_features: "data/query.hvft".into(),
            gallery_features: "data/gallery.hvft".into(),
            truth: "data/truth.hvck".into(),
            checkpoint_dir: "runs/checkpoints".into(),
            log_dir: "runs/logs".into(),
            checkpoint: None,
            resume: None,
            metrics: "runs/metrics.csv".into(),
            embed_prefix: "runs/embed".into(),
            ablate_out: "runs/ablation.csv".into(),
        }
    }
}

/// Ablation grid: component toggles crossed with (α, β).
#[derive(Clone, Debug, PartialEq)]
pub struct AblateGrid {
    /// `-` for the raw-feature baseline, otherwise letters from `VJHC`.
    pub configs: Vec<String>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl Default for AblateGrid {
    fn default() -> Self {
        Self {
            configs: ["-", "V", "VJ", "VJH", "VJHC"].map(String::from).to_vec(),
            alphas: vec![0.1, 0.2, 0.4],
            betas: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Its seed is ignored; generation uses `train.seed`.
    pub synth: SynthSpec,
    pub paths: Paths,
    pub embed_split: Split,
    pub ablate: AblateGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::desk(),
            synth: SynthSpec::default(),
            paths: Paths::default(),
            embed_split: Split::Gallery,
            ablate: AblateGrid::default(),
        }
    }
}

impl RunConfig {
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.train.seed,
            ..self.synth.clone()
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.paths.log_dir.join("train.csv")
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let k =
            find_key(key).ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
        (k.set)(self, value.trim()).map_err(|e| CliError::Usage(format!("{key}: {e}")))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        find_key(key).map(|k| (k.get)(self))
    }

    /// Applies every assignment in a config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn apply_str(&mut self, text: &str) -> Result<(), String> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            self.set(key.trim(), value)
                .map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(())
    }

    /// The whole configuration in file syntax.
    pub fn to_file_string(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.name, (k.get)(self)))
            .collect()
    }
}

/// One configuration key.
pub struct Key {
    /// File spelling, with underscores.
    pub name: &'static str,
    pub help: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

impl Key {
    /// Flag spelling, with hyphens.
    pub fn flag(&self) -> String {
        self.name.replace('_', "-")
    }

    pub fn default_value(&self) -> String {
        (self.get)(&RunConfig::default())
    }
}

pub fn find_key(name: &str) -> Option<&'static Key> {
    let name = name.replace('-', "_");
    KEYS.iter().find(|k| k.name == name)
}

/// Text form of a config value.
pub trait Value: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

fn parse_num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| format!("`{s}`: {e}"))
}

impl Value for f64 {
    fn parse(s: &str) -> Result<Self, String> {
        parse_num(s)
    }
    fn show(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for usize {
    fn parse(s: &str) -> Result<Self, String> {
        parse_num(s)
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse(s: &str) -> Result<Self, String> {
        parse_num(s)
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for bool {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "on" | "true" | "yes" | "1" => Ok(true),
            "off" | "false" | "no" | "0" => Ok(false),
            _ => Err(format!("`{s}`: expected on or off")),
        }
    }
    fn show(&self) -> String {
        if *self { "on" } else { "off" }.into()
    }
}

impl Value for Precision {
    fn parse(s: &str) -> Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}`: expected f32 or f64"))
    }
    fn show(&self) -> String {
        self.name().into()
    }
}

impl Value for TripletMetric {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "js" => Ok(TripletMetric::JensenShannon),
            "euclidean" => Ok(TripletMetric::Euclidean),
            _ => Err(format!("`{s}`: expected js or euclidean")),
        }
    }
    fn show(&self) -> String {
        match self {
            TripletMetric::JensenShannon => "js",
            TripletMetric::Euclidean => "euclidean",
        }
        .into()
    }
}

impl Value for Split {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            _ => Err(format!("`{s}`: expected train, query or gallery")),
        }
    }
    fn show(&self) -> String {
        self.name().into()
    }
}

impl Value for PathBuf {
    fn parse(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(s.into())
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

/// `auto` (or empty) for `None`.
impl<T: Value> Value for Option<T> {
    fn parse(s: &str) -> Result<Self, String> {
        if s.is_empty() || s == "auto" {
            Ok(None)
        } else {
            T::parse(s).map(Some)
        }
    }
    fn show(&self) -> String {
        self.as_ref().map_or_else(|| "auto".into(), T::show)
    }
}

/// Comma-separated list.
impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> Result<Self, String> {
        let items = s
            .split(',')
            .map(|item| T::parse(item.trim()))
            .collect::<Result<Vec<_>, _>>()?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(items)
    }
    fn show(&self) -> String {
        self.iter().map(T::show).collect::<Vec<_>>().join(",")
    }
}

impl Value for String {
    fn parse(s: &str) -> Result<Self, String> {
        Ok(s.into())
    }
    fn show(&self) -> String {
        self.clone()
    }
}

macro_rules! keys {
    ($($name:literal => $($field:ident).+ , $help:literal;)*) => {
        /// Every configuration key, in help order.
        pub static KEYS: &[Key] = &[$(
            Key {
                name: $name,
                help: $help,
                get: |c| Value::show(&c.$($field).+),
                set: |c, v| {
                    c.$($field).+ = Value::parse(v)?;
                    Ok(())
                },
            },
        )*];
    };
}

keys! {
    "seed" => train.seed, "seed for data generation, initialization and batching";
    "precision" => train.precision, "floating-point precision: f32 or f64";
    "lr" => train.lr, "base learning rate";
    "weight_decay" => train.weight_decay, "L2 weight decay added to gradients";
    "epochs" => train.epochs, "training epochs";
    "warmup_epochs" => train.warmup_epochs, "epochs of linear warmup from 1% of lr";
    "p" => train.p, "identities per batch";
    "k" => train.k, "samples per identity in a batch";
    "checkpoint_every" => train.checkpoint_every, "checkpoint every N epochs (0: final only)";
    "hidden" => train.hidden, "hidden width (auto: feature width)";
    "latent" => train.latent, "latent width (auto: feature width)";
    "variation" => train.variation, "variation width (auto: latent / 4)";
    "alpha" => train.weights.alpha, "weight of the generative terms";
    "beta" => train.weights.beta, "weight of the KL terms";
    "lambda" => train.weights.lambda_jst, "weight of the triplet term";
    "gamma" => train.weights.gamma, "triplet margin";
    "label_smoothing" => train.weights.label_smoothing, "label smoothing mass";
    "cc" => train.weights.covariance_constraint, "covariance constraint: on or off";
    "hierarchical" => train.weights.hierarchical, "conditional variation prior: on or off";
    "triplet" => train.weights.triplet_metric, "triplet distance: js or euclidean";
    "num_ids" => synth.num_ids, "synthetic training identities";
    "samples_per_id" => synth.samples_per_id, "synthetic samples per training identity";
    "num_test_ids" => synth.num_test_ids, "synthetic query/gallery identities";
    "query_per_id" => synth.query_per_id, "query samples per test identity";
    "gallery_per_id" => synth.gallery_per_id, "gallery samples per test identity";
    "dim" => synth.dim, "synthetic feature width";
    "id_scale" => synth.id_scale, "std of identity centers";
    "num_variation_factors" => synth.num_variation_factors, "shared variation directions";
    "variation_scale" => synth.variation_scale, "std of variation coefficients";
    "noise_scale" => synth.noise_scale, "std of isotropic noise";
    "num_cameras" => synth.num_cameras, "cameras, assigned round-robin per identity";
    "train_features" => paths.train_features, "training feature file";
    "query_features" => paths.query_features, "query feature file";
    "gallery_features" => paths.gallery_features, "gallery feature file";
    "truth" => paths.truth, "ground-truth factor file written by synth";
    "checkpoint_dir" => paths.checkpoint_dir, "checkpoint directory";
    "log_dir" => paths.log_dir, "run-log directory";
    "checkpoint" => paths.checkpoint, "checkpoint for eval/embed (auto: final in checkpoint_dir; raw: no model)";
    "resume" => paths.resume, "training checkpoint to resume from (auto: start fresh)";
    "metrics" => paths.metrics, "metrics file written by eval";
    "embed_prefix" => paths.embed_prefix, "output prefix for embed";
    "embed_split" => embed_split, "split exported by embed: train, query or gallery";
    "ablate_out" => paths.ablate_out, "CSV written by ablate";
    "ablate_configs" => ablate.configs, "ablation rows: - for raw features, else letters of VJHC";
    "ablate_alphas" => ablate.alphas, "alpha values crossed with each ablation row";
    "ablate_betas" => ablate.betas, "beta values crossed with each ablation row";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips_its_default() {
        let base = RunConfig::default();
        for k in KEYS {
            let mut c = RunConfig::default();
            c.set(k.name, &k.default_value()).unwrap();
            assert_eq!(c, base, "{}", k.name);
        }
    }

    #[test]
    fn file_syntax() {
        let mut c = RunConfig::default();
        c.apply_str("# comment\nalpha = 0.2\n beta=2.0  # trailing\n\ncc = off\n")
            .unwrap();
        assert_eq!(c.train.weights.beta, 2.0);
        assert!(!c.train.weights.covariance_constraint);
        assert!(c.apply_str("nonsense = 1").unwrap_err().contains("unknown"));
        assert!(c.apply_str("alpha").is_err());
        assert!(c.apply_str("alpha = x").is_err());
    }

    #[test]
    fn file_form_reloads() {
        let mut c = RunConfig::default();
        c.set("latent", "16").unwrap();
        c.set("checkpoint", "raw").unwrap();
        let mut back = RunConfig::default();
        back.apply_str(&c.to_file_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn hyphenated_lookup() {
        assert_eq!(find_key("weight-decay").unwrap().name, "weight_decay");
    }
}
