//! Experiment configuration files.

use std::path::{Path, PathBuf};

use icarec_core::baselines::AdaptiveFilterConfig;
use icarec_core::datagen::{generate, MixingSpec, PairedDataset, SegmentLags};
use icarec_core::eval::EvalSettings;
use icarec_core::nn::NetSpec;
use icarec_core::objectives::ObjectiveConfig;
use icarec_core::trainer::{ProbeConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{loading, CliError, CliResult, Kind};

/// Seed offset for the held-out draw of a generated dataset.
pub const HOLDOUT_SEED_OFFSET: u64 = 1_000_003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<AdaptiveFilterConfig>,
    /// Default output directory for `train` when `--out` is omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// Either a generator with its sample count or a dataset CSV written by `gen`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<MixingSpec>,
    /// Sample count for flat generators; the fECG generator sizes itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Relative paths resolve against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: NetSpec,
    pub decoder: NetSpec,
    pub discriminator: NetSpec,
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn one() -> usize {
    1
}

fn default_eval_samples() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: usize,
    pub lr_ae: f64,
    pub lr_disc: f64,
    pub objective: ObjectiveConfig,
    #[serde(default = "default_weight_decay")]
    pub disc_weight_decay: f64,
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_len: Option<usize>,
    #[serde(default = "one")]
    pub crops_per_sample: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub settings: EvalSettings,
    /// Overrides the per-segment lags stored with a sequence dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lags: Option<Vec<SegmentLags>>,
    /// Held-out samples for the final report: a fresh draw for generated
    /// data, the last rows of a CSV dataset otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<usize>,
    /// Retrains a fresh discriminator on the frozen held-out codes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
}

impl ExperimentConfig {
    /// Reads, parses and validates a config, resolving relative paths.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = icarec_core::io::read_text(path).map_err(loading)?;
        let mut cfg: Self = icarec_core::io::parse_json(&text).map_err(loading)?;
        if let Some(csv) = &cfg.dataset.csv {
            if csv.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataset.csv = Some(base.join(csv));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.dataset;
        match (&d.generator, &d.csv) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(CliError::schema("dataset needs exactly one of `generator` and `csv`"))
            }
            (Some(MixingSpec::Fecg(_)), _) if d.n.is_some() => {
                return Err(CliError::schema("the fecg generator takes no `n`; set n_segments instead"))
            }
            (Some(MixingSpec::Fecg(_)), _) => {}
            (Some(_), _) if d.n.unwrap_or(0) == 0 => {
                return Err(CliError::schema("flat generators need a positive `n`"))
            }
            (None, Some(path)) => {
                if d.n.is_some() {
                    return Err(CliError::schema("`n` applies to generators only"));
                }
                if !path.exists() {
                    return Err(CliError::new(Kind::MissingFile, format!("dataset {} not found", path.display())));
                }
            }
            _ => {}
        }
        if self.model.is_some() != self.train.is_some() {
            return Err(CliError::schema("`model` and `train` sections go together"));
        }
        if let Some(tc) = self.train_config()? {
            tc.validate().map_err(|e| CliError::schema(e.to_string()))?;
        }
        if let Some(b) = &self.baseline {
            b.validate().map_err(|e| CliError::schema(e.to_string()))?;
        }
        if self.eval.holdout == Some(0) {
            return Err(CliError::schema("eval.holdout must be positive"));
        }
        Ok(())
    }

    /// The trainer configuration, when both `model` and `train` are present.
    pub fn train_config(&self) -> CliResult<Option<TrainConfig>> {
        let (Some(m), Some(t)) = (&self.model, &self.train) else {
            return Ok(None);
        };
        Ok(Some(TrainConfig {
            seed: self.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            beta: t.beta,
            lr_ae: t.lr_ae,
            lr_disc: t.lr_disc,
            objective: t.objective,
            encoder: m.encoder.clone(),
            decoder: m.decoder.clone(),
            discriminator: m.discriminator.clone(),
            disc_weight_decay: t.disc_weight_decay,
            eval_every: t.eval_every,
            crop_len: t.crop_len,
            crops_per_sample: t.crops_per_sample,
            eval_samples: t.eval_samples,
        }))
    }

    pub fn require_train_config(&self) -> CliResult<TrainConfig> {
        self.train_config()?
            .ok_or_else(|| CliError::schema("this command needs `model` and `train` sections"))
    }

    /// The experiment's dataset: generated from the seed or read from CSV.
    pub fn dataset(&self) -> CliResult<PairedDataset> {
        match (&self.dataset.generator, &self.dataset.csv) {
            (Some(spec), _) => generate(spec, self.dataset.n.unwrap_or(0), self.seed).map_err(loading),
            (None, Some(path)) => PairedDataset::read(path).map_err(loading),
            (None, None) => Err(CliError::schema("dataset section is empty")),
        }
    }

    /// Training data and the held-out evaluation data.
    pub fn train_and_holdout(&self) -> CliResult<(PairedDataset, Option<PairedDataset>)> {
        let data = self.dataset()?;
        let Some(m) = self.eval.holdout else {
            return Ok((data, None));
        };
        match &self.dataset.generator {
            Some(spec) => {
                let seed = self.seed.wrapping_add(HOLDOUT_SEED_OFFSET);
                let held = generate(spec, m, seed).map_err(loading)?;
                Ok((data, Some(held)))
            }
            None => {
                if m + 2 > data.len() {
                    return Err(CliError::schema(format!(
                        "holdout of {m} leaves fewer than two of {} samples",
                        data.len()
                    )));
                }
                let (train, held) = data.split(data.len() - m).map_err(loading)?;
                Ok((train, Some(held)))
            }
        }
    }
}

/// Lags for the presence metric: the config override, else the dataset's own.
pub fn lags_for(cfg: Option<&EvalSection>, data: &PairedDataset) -> Option<Vec<SegmentLags>> {
    cfg.and_then(|e| e.lags.clone()).or_else(|| data.meta.lags.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use icarec_core::infometrics::DiscreteSystem;

    fn bundled() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
    }

    #[test]
    fn bundled_experiments_load_and_round_trip() {
        let mut names = Vec::new();
        for entry in std::fs::read_dir(bundled()).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "json") {
                let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                assert_eq!(path.file_stem().unwrap().to_str(), Some(cfg.name.as_str()));
                assert!(cfg.require_train_config().is_ok());
                let back: ExperimentConfig = icarec_core::io::parse_json(&icarec_core::io::to_json(&cfg)).unwrap();
                assert_eq!(back, cfg);
                names.push(cfg.name);
            }
        }
        names.sort();
        let want = [
            "2d-linear",
            "2d-linear-paper",
            "2d-nonlinear",
            "2d-nonlinear-paper",
            "angles-toy",
            "fecg-synthetic",
        ];
        assert_eq!(names, want);
    }

    #[test]
    fn paper_scale_configs_differ_only_in_size() {
        for base in ["2d-linear", "2d-nonlinear"] {
            let desk = ExperimentConfig::load(&bundled().join(format!("{base}.json"))).unwrap();
            let paper = ExperimentConfig::load(&bundled().join(format!("{base}-paper.json"))).unwrap();
            assert_eq!((desk.dataset.n, paper.dataset.n), (Some(5000), Some(15000)));
            let (d, p) = (desk.train.unwrap(), paper.train.unwrap());
            assert_eq!((d.epochs, p.epochs), (30, 100));
            assert_eq!(d.objective, p.objective);
            assert_eq!(desk.model, paper.model);
        }
    }

    #[test]
    fn bundled_lemma_systems_validate() {
        for name in ["projection", "xor", "constant"] {
            let path = bundled().join("lemma").join(format!("{name}.json"));
            let sys: DiscreteSystem = icarec_core::io::read_json(&path).unwrap();
            sys.validate().unwrap();
        }
    }

    #[test]
    fn dataset_section_needs_exactly_one_source() {
        let mut cfg = ExperimentConfig::load(&bundled().join("2d-linear.json")).unwrap();
        cfg.dataset.csv = Some(PathBuf::from("x.csv"));
        assert_eq!(cfg.validate().unwrap_err().kind, Kind::Schema);
        cfg.dataset.csv = None;
        cfg.dataset.generator = None;
        assert_eq!(cfg.validate().unwrap_err().kind, Kind::Schema);
    }

    #[test]
    fn model_without_train_is_rejected() {
        let mut cfg = ExperimentConfig::load(&bundled().join("2d-linear.json")).unwrap();
        cfg.train = None;
        assert_eq!(cfg.validate().unwrap_err().kind, Kind::Schema);
    }
}
