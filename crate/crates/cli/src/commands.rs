//! The subcommands, callable without going through argument parsing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use varnorm::checkpoint::{self, load_model};
use varnorm::data::{read_features, synth_generate, write_features, FeatureSet, Split};
use varnorm::evalkit::{evaluate, export_embeddings, Embed, RawFeatures, RetrievalResult};
use varnorm::losses::{LossWeights, TripletMetric};
use varnorm::nets::Param;
use varnorm::trainkit::{
    final_checkpoint_path, fit, EpochRecord, FitOutputs, TrainConfig, TrainState,
};
use varnorm::{Precision, Scalar};

use crate::config::RunConfig;
use crate::error::CliError;

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn load_split(path: &Path, split: Split) -> Result<FeatureSet, CliError> {
    Ok(read_features(path)
        .map_err(CliError::file(path))?
        .with_split(split))
}

/// Writes the three splits and the ground-truth factors.
pub fn synth(config: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let data = synth_generate(&config.synth_spec())?;
    let p = &config.paths;
    for (set, path) in [
        (&data.train, &p.train_features),
        (&data.query, &p.query_features),
        (&data.gallery, &p.gallery_features),
    ] {
        ensure_parent(path)?;
        write_features(set, path)?;
        writeln!(
            out,
            "wrote {} ({} x {})",
            path.display(),
            set.len(),
            set.dim()
        )?;
    }
    let t = &data.truth;
    let entries: Vec<Param<f32>> = [
        ("factors", &t.factors),
        ("centers", &t.centers),
        ("train_coeffs", &t.train_coeffs),
        ("query_coeffs", &t.query_coeffs),
        ("gallery_coeffs", &t.gallery_coeffs),
    ]
    .into_iter()
    .map(|(name, value)| Param {
        name: name.into(),
        value: value.cast(),
    })
    .collect();
    checkpoint::write(&p.truth, &entries)?;
    writeln!(out, "wrote {}", p.truth.display())?;
    Ok(())
}

/// Trains on `train_features`; returns the per-epoch records.
pub fn train(config: &RunConfig, out: &mut dyn Write) -> Result<Vec<EpochRecord>, CliError> {
    match config.train.precision {
        Precision::F32 => train_as::<f32>(config, out),
        Precision::F64 => train_as::<f64>(config, out),
    }
}

fn train_as<T: Scalar>(
    config: &RunConfig,
    out: &mut dyn Write,
) -> Result<Vec<EpochRecord>, CliError> {
    let set = load_split(&config.paths.train_features, Split::Train)?;
    let classes = set.num_identities();
    let log = config.log_path();
    let state = match &config.paths.resume {
        Some(path) => TrainState::<T>::load(path, &config.train).map_err(CliError::file(path))?,
        None => {
            if log.exists() {
                fs::remove_file(&log)?;
            }
            TrainState::<T>::init(&config.train, set.dim(), classes)?
        }
    };
    let dims = state.model.dims();
    let outputs = FitOutputs {
        log: Some(log.clone()),
        checkpoint_dir: Some(config.paths.checkpoint_dir.clone()),
        header: [
            ("features", dims.features),
            ("hidden", dims.hidden),
            ("latent", dims.latent),
            ("variation", dims.variation),
            ("classes", dims.classes),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect(),
    };
    writeln!(out, "{}", EpochRecord::HEADER)?;
    let mut io_error = None;
    let (_, history) = fit(state, &set, &config.train, &outputs, |r| {
        if let Err(e) = writeln!(out, "{}", r.csv()) {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    writeln!(
        out,
        "wrote {} and {}",
        final_checkpoint_path(&config.paths.checkpoint_dir).display(),
        log.display()
    )?;
    Ok(history)
}

fn checkpoint_path(config: &RunConfig) -> PathBuf {
    config
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| final_checkpoint_path(&config.paths.checkpoint_dir))
}

fn is_raw(config: &RunConfig) -> bool {
    config.paths.checkpoint.as_deref() == Some(Path::new("raw"))
}

/// Scores query against gallery and writes the metrics file.
pub fn eval(config: &RunConfig, out: &mut dyn Write) -> Result<RetrievalResult, CliError> {
    let query = load_split(&config.paths.query_features, Split::Query)?;
    let gallery = load_split(&config.paths.gallery_features, Split::Gallery)?;
    let result = if is_raw(config) {
        evaluate(&query, &gallery, &RawFeatures)?
    } else {
        let path = checkpoint_path(config);
        match config.train.precision {
            Precision::F32 => evaluate(
                &query,
                &gallery,
                &load_model::<f32>(&path).map_err(CliError::file(&path))?,
            )?,
            Precision::F64 => evaluate(
                &query,
                &gallery,
                &load_model::<f64>(&path).map_err(CliError::file(&path))?,
            )?,
        }
    };
    ensure_parent(&config.paths.metrics)?;
    result.write_csv(&config.paths.metrics)?;
    out.write_all(result.to_csv().as_bytes())?;
    Ok(result)
}

/// Exports `z_mu` and `z_sigma` of one split.
pub fn embed(config: &RunConfig, out: &mut dyn Write) -> Result<(PathBuf, PathBuf), CliError> {
    let p = &config.paths;
    let path = match config.embed_split {
        Split::Train => &p.train_features,
        Split::Query => &p.query_features,
        Split::Gallery => &p.gallery_features,
    };
    let set = load_split(path, config.embed_split)?;
    ensure_parent(&p.embed_prefix)?;
    let model_path = checkpoint_path(config);
    let written = match config.train.precision {
        Precision::F32 => export_embeddings(
            &set,
            &load_model::<f32>(&model_path).map_err(CliError::file(&model_path))?,
            &p.embed_prefix,
        )?,
        Precision::F64 => export_embeddings(
            &set,
            &load_model::<f64>(&model_path).map_err(CliError::file(&model_path))?,
            &p.embed_prefix,
        )?,
    };
    writeln!(
        out,
        "wrote {} and {}",
        written.0.display(),
        written.1.display()
    )?;
    Ok(written)
}

/// Component toggles of one ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub v: bool,
    pub j: bool,
    pub h: bool,
    pub c: bool,
}

impl Toggles {
    /// `-` is the raw-feature baseline; otherwise letters from `VJHC`,
    /// which must include `V`.
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let mut t = Toggles {
            v: false,
            j: false,
            h: false,
            c: false,
        };
        if s == "-" {
            return Ok(t);
        }
        for ch in s.chars() {
            match ch.to_ascii_uppercase() {
                'V' => t.v = true,
                'J' => t.j = true,
                'H' => t.h = true,
                'C' => t.c = true,
                _ => {
                    return Err(CliError::Usage(format!(
                        "ablation row `{s}`: unknown component `{ch}`"
                    )))
                }
            }
        }
        if !t.v {
            return Err(CliError::Usage(format!(
                "ablation row `{s}`: every trained row needs V"
            )));
        }
        Ok(t)
    }

    pub fn is_baseline(&self) -> bool {
        !self.v
    }

    pub fn weights(&self, base: &LossWeights, alpha: f64, beta: f64) -> LossWeights {
        LossWeights {
            alpha,
            beta,
            covariance_constraint: self.c,
            hierarchical: self.h,
            triplet_metric: if self.j {
                TripletMetric::JensenShannon
            } else {
                TripletMetric::Euclidean
            },
            ..*base
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub toggles: Toggles,
    /// `None` for the baseline.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub result: RetrievalResult,
}

impl AblationRow {
    pub const HEADER: &'static str = "V,J,H,C,alpha,beta,map,cmc1,cmc5,cmc10";

    pub fn csv(&self) -> String {
        let flag = |b: bool| if b { "1" } else { "0" };
        let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:?}"));
        let t = self.toggles;
        let r = &self.result;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            flag(t.v),
            flag(t.j),
            flag(t.h),
            flag(t.c),
            num(self.alpha),
            num(self.beta),
            r.map,
            r.cmc_at(1),
            r.cmc_at(5),
            r.cmc_at(10)
        )
    }
}

/// Trains one model per (row, α, β) in parallel and scores each; the
/// baseline row is scored once on the raw features.
pub fn ablate(config: &RunConfig, out: &mut dyn Write) -> Result<Vec<AblationRow>, CliError> {
    let train_set = load_split(&config.paths.train_features, Split::Train)?;
    let query = load_split(&config.paths.query_features, Split::Query)?;
    let gallery = load_split(&config.paths.gallery_features, Split::Gallery)?;

    let mut jobs = Vec::new();
    for name in &config.ablate.configs {
        let t = Toggles::parse(name)?;
        if t.is_baseline() {
            jobs.push((t, None));
            continue;
        }
        for &alpha in &config.ablate.alphas {
            for &beta in &config.ablate.betas {
                jobs.push((t, Some((alpha, beta))));
            }
        }
    }

    let run = |(t, ab): (Toggles, Option<(f64, f64)>)| -> Result<AblationRow, CliError> {
        let result = match ab {
            None => evaluate(&query, &gallery, &RawFeatures)?,
            Some((alpha, beta)) => {
                let train = TrainConfig {
                    weights: t.weights(&config.train.weights, alpha, beta),
                    ..config.train.clone()
                };
                match train.precision {
                    Precision::F32 => train_and_score::<f32>(&train, &train_set, &query, &gallery)?,
                    Precision::F64 => train_and_score::<f64>(&train, &train_set, &query, &gallery)?,
                }
            }
        };
        Ok(AblationRow {
            toggles: t,
            alpha: ab.map(|(a, _)| a),
            beta: ab.map(|(_, b)| b),
            result,
        })
    };
    let rows = jobs
        .into_par_iter()
        .map(run)
        .collect::<Result<Vec<_>, _>>()?;

    let mut text = format!("{}\n", AblationRow::HEADER);
    for r in &rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    ensure_parent(&config.paths.ablate_out)?;
    fs::write(&config.paths.ablate_out, &text)?;
    out.write_all(text.as_bytes())?;
    Ok(rows)
}

fn train_and_score<T: Scalar>(
    config: &TrainConfig,
    train: &FeatureSet,
    query: &FeatureSet,
    gallery: &FeatureSet,
) -> Result<RetrievalResult, CliError>
where
    varnorm::nets::Model<T>: Embed,
{
    let state = TrainState::<T>::init(config, train.dim(), train.num_identities())?;
    let (state, _) = fit(state, train, config, &FitOutputs::default(), |_| {})?;
    Ok(evaluate(query, gallery, &state.model)?)
}
