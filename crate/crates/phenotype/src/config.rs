//! Pipeline configuration: a flat `key = value` text format (# comments,
//! blank lines allowed) where every key can also be supplied as a
//! `--key=value` CLI flag.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autoencoder::TrainConfig;
use crate::error::{Error, Result};
use crate::gpr::GridSpec;
use crate::preprocess::WarpParams;
use crate::synth::SyntheticSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    // input tables and output directory
    pub labevents: PathBuf,
    pub diagnoses: PathBuf,
    pub labitems: PathBuf,
    pub icd_dict: Option<PathBuf>,
    pub out_dir: PathBuf,
    // cohort selection
    pub loinc: String,
    pub cat_a: String,
    pub cat_b: String,
    pub min_samples: usize,
    pub train_fraction: f64,
    pub top_icd9: usize,
    pub top_loinc: usize,
    // preprocessing and GP regression
    pub warp_a: f64,
    pub warp_b: f64,
    pub grid: GridSpec,
    pub interval_days: f64,
    pub pad_samples: usize,
    // patches and autoencoder
    pub patch_len: usize,
    pub n_patches: usize,
    pub n_eval_patches: usize,
    pub ae_hidden: usize,
    pub ae_l1_activity: f64,
    pub ae_l2_weight: f64,
    pub ae_epochs: usize,
    pub ae_learning_rate: f64,
    pub ae_batch_size: usize,
    pub ae_validation_fraction: f64,
    // analysis
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    pub logistic_l2: f64,
    pub logistic_iterations: usize,
    pub auc_per_admission: bool,
    // synthetic generator
    pub synth_n_per_class: usize,
    pub synth_noise: f64,
    pub synth_mean_gap_days: f64,
    pub synth_min_samples: usize,
    pub synth_max_samples: usize,
    // master seed; per-stage seeds are derived from it
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let ae = TrainConfig::default();
        let synth = SyntheticSpec::default();
        PipelineConfig {
            labevents: PathBuf::from("labevents.csv"),
            diagnoses: PathBuf::from("diagnoses_icd.csv"),
            labitems: PathBuf::from("d_labitems.csv"),
            icd_dict: None,
            out_dir: PathBuf::from("out"),
            loinc: "1742-6".to_string(),
            cat_a: "428".to_string(),
            cat_b: "571".to_string(),
            min_samples: 3,
            train_fraction: 0.7,
            top_icd9: 20,
            top_loinc: 20,
            warp_a: 3.0,
            warp_b: 0.0,
            grid: GridSpec::default(),
            interval_days: 0.25,
            pad_samples: 10,
            patch_len: 20,
            n_patches: 2000,
            n_eval_patches: 500,
            ae_hidden: ae.hidden,
            ae_l1_activity: ae.l1_activity,
            ae_l2_weight: ae.l2_weight,
            ae_epochs: ae.epochs,
            ae_learning_rate: ae.learning_rate,
            ae_batch_size: ae.batch_size,
            ae_validation_fraction: ae.validation_fraction,
            tsne_perplexity: 30.0,
            tsne_iterations: 1000,
            logistic_l2: 0.01,
            logistic_iterations: 2000,
            auc_per_admission: false,
            synth_n_per_class: synth.n_per_class,
            synth_noise: synth.noise,
            synth_mean_gap_days: synth.mean_gap_days,
            synth_min_samples: synth.min_samples,
            synth_max_samples: synth.max_samples,
            seed: 1,
        }
    }
}

/// Every settable key with a one-line description, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("labevents", "path to the LABEVENTS-shaped CSV (.gz accepted)"),
    ("diagnoses", "path to the DIAGNOSES_ICD-shaped CSV"),
    ("labitems", "path to the D_LABITEMS-shaped CSV (ITEMID to LOINC map)"),
    ("icd_dict", "optional path to the D_ICD_DIAGNOSES-shaped CSV"),
    ("out_dir", "output directory for all pipeline artifacts"),
    ("loinc", "LOINC code of the lab series to extract"),
    ("cat_a", "first ICD-9 category (label 0)"),
    ("cat_b", "second ICD-9 category (label 1)"),
    ("min_samples", "minimum samples per admission series"),
    ("train_fraction", "fraction of admissions in the training split"),
    ("top_icd9", "co-occurrence matrix row count"),
    ("top_loinc", "co-occurrence matrix column count"),
    ("warp_a", "time-warp exponent a"),
    ("warp_b", "time-warp offset b (warped days per gap)"),
    ("grid_amplitude2", "comma-separated signal-variance grid"),
    ("grid_alpha", "comma-separated scale-mixture exponent grid"),
    ("grid_tau", "comma-separated time-scale grid (warped days)"),
    ("grid_noise2", "comma-separated noise-variance grid"),
    ("interval_days", "interpolation grid spacing in days"),
    ("pad_samples", "grid points of padding on each side"),
    ("patch_len", "patch width in grid samples (network width is twice this)"),
    ("n_patches", "training patches sampled from the train split"),
    ("n_eval_patches", "evaluation patches sampled from the test split"),
    ("ae_hidden", "hidden units per encoder layer"),
    ("ae_l1_activity", "L1 activity penalty on encoder activations"),
    ("ae_l2_weight", "L2 penalty on trained weights"),
    ("ae_epochs", "training epochs per phase"),
    ("ae_learning_rate", "SGD learning rate"),
    ("ae_batch_size", "SGD mini-batch size"),
    ("ae_validation_fraction", "patch fraction held out for monitoring"),
    ("tsne_perplexity", "t-SNE perplexity"),
    ("tsne_iterations", "t-SNE gradient-descent iterations"),
    ("logistic_l2", "logistic-regression L2 penalty"),
    ("logistic_iterations", "logistic-regression ascent iterations"),
    ("auc_per_admission", "also report AUC on mean per-admission scores (true/false)"),
    ("synth_n_per_class", "synthetic admissions per class"),
    ("synth_noise", "synthetic value noise (standard deviation)"),
    ("synth_mean_gap_days", "mean synthetic inter-sample gap in days"),
    ("synth_min_samples", "minimum synthetic samples per admission"),
    ("synth_max_samples", "maximum synthetic samples per admission"),
    ("seed", "master seed; per-stage seeds are derived from it"),
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} value {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    let items: Result<Vec<f64>> = value
        .split(',')
        .map(|v| parse_num::<f64>(key, v))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key} list is empty")));
    }
    Ok(items)
}

impl PipelineConfig {
    /// Apply one `key = value` setting.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "labevents" => self.labevents = PathBuf::from(value),
            "diagnoses" => self.diagnoses = PathBuf::from(value),
            "labitems" => self.labitems = PathBuf::from(value),
            "icd_dict" => {
                self.icd_dict = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "loinc" => self.loinc = value.to_string(),
            "cat_a" => self.cat_a = value.to_string(),
            "cat_b" => self.cat_b = value.to_string(),
            "min_samples" => self.min_samples = parse_num(key, value)?,
            "train_fraction" => self.train_fraction = parse_num(key, value)?,
            "top_icd9" => self.top_icd9 = parse_num(key, value)?,
            "top_loinc" => self.top_loinc = parse_num(key, value)?,
            "warp_a" => self.warp_a = parse_num(key, value)?,
            "warp_b" => self.warp_b = parse_num(key, value)?,
            "grid_amplitude2" => self.grid.amplitude2 = parse_list(key, value)?,
            "grid_alpha" => self.grid.alpha = parse_list(key, value)?,
            "grid_tau" => self.grid.tau = parse_list(key, value)?,
            "grid_noise2" => self.grid.noise2 = parse_list(key, value)?,
            "interval_days" => self.interval_days = parse_num(key, value)?,
            "pad_samples" => self.pad_samples = parse_num(key, value)?,
            "patch_len" => self.patch_len = parse_num(key, value)?,
            "n_patches" => self.n_patches = parse_num(key, value)?,
            "n_eval_patches" => self.n_eval_patches = parse_num(key, value)?,
            "ae_hidden" => self.ae_hidden = parse_num(key, value)?,
            "ae_l1_activity" => self.ae_l1_activity = parse_num(key, value)?,
            "ae_l2_weight" => self.ae_l2_weight = parse_num(key, value)?,
            "ae_epochs" => self.ae_epochs = parse_num(key, value)?,
            "ae_learning_rate" => self.ae_learning_rate = parse_num(key, value)?,
            "ae_batch_size" => self.ae_batch_size = parse_num(key, value)?,
            "ae_validation_fraction" => self.ae_validation_fraction = parse_num(key, value)?,
            "tsne_perplexity" => self.tsne_perplexity = parse_num(key, value)?,
            "tsne_iterations" => self.tsne_iterations = parse_num(key, value)?,
            "logistic_l2" => self.logistic_l2 = parse_num(key, value)?,
            "logistic_iterations" => self.logistic_iterations = parse_num(key, value)?,
            "auc_per_admission" => {
                self.auc_per_admission = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    other => {
                        return Err(Error::Config(format!(
                            "auc_per_admission expects true/false, got {other:?}"
                        )))
                    }
                }
            }
            "synth_n_per_class" => self.synth_n_per_class = parse_num(key, value)?,
            "synth_noise" => self.synth_noise = parse_num(key, value)?,
            "synth_mean_gap_days" => self.synth_mean_gap_days = parse_num(key, value)?,
            "synth_min_samples" => self.synth_min_samples = parse_num(key, value)?,
            "synth_max_samples" => self.synth_max_samples = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a flat key-value config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut config = PipelineConfig::default();
        config.apply_file(path)?;
        Ok(config)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    line_no + 1
                ))
            })?;
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    /// Serialize every setting back out in `CONFIG_KEYS` order.
    pub fn to_file_string(&self) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        for (key, _) in CONFIG_KEYS {
            let value = match *key {
                "labevents" => self.labevents.display().to_string(),
                "diagnoses" => self.diagnoses.display().to_string(),
                "labitems" => self.labitems.display().to_string(),
                "icd_dict" => self
                    .icd_dict
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                "out_dir" => self.out_dir.display().to_string(),
                "loinc" => self.loinc.clone(),
                "cat_a" => self.cat_a.clone(),
                "cat_b" => self.cat_b.clone(),
                "min_samples" => self.min_samples.to_string(),
                "train_fraction" => self.train_fraction.to_string(),
                "top_icd9" => self.top_icd9.to_string(),
                "top_loinc" => self.top_loinc.to_string(),
                "warp_a" => self.warp_a.to_string(),
                "warp_b" => self.warp_b.to_string(),
                "grid_amplitude2" => list(&self.grid.amplitude2),
                "grid_alpha" => list(&self.grid.alpha),
                "grid_tau" => list(&self.grid.tau),
                "grid_noise2" => list(&self.grid.noise2),
                "interval_days" => self.interval_days.to_string(),
                "pad_samples" => self.pad_samples.to_string(),
                "patch_len" => self.patch_len.to_string(),
                "n_patches" => self.n_patches.to_string(),
                "n_eval_patches" => self.n_eval_patches.to_string(),
                "ae_hidden" => self.ae_hidden.to_string(),
                "ae_l1_activity" => self.ae_l1_activity.to_string(),
                "ae_l2_weight" => self.ae_l2_weight.to_string(),
                "ae_epochs" => self.ae_epochs.to_string(),
                "ae_learning_rate" => self.ae_learning_rate.to_string(),
                "ae_batch_size" => self.ae_batch_size.to_string(),
                "ae_validation_fraction" => self.ae_validation_fraction.to_string(),
                "tsne_perplexity" => self.tsne_perplexity.to_string(),
                "tsne_iterations" => self.tsne_iterations.to_string(),
                "logistic_l2" => self.logistic_l2.to_string(),
                "logistic_iterations" => self.logistic_iterations.to_string(),
                "auc_per_admission" => self.auc_per_admission.to_string(),
                "synth_n_per_class" => self.synth_n_per_class.to_string(),
                "synth_noise" => self.synth_noise.to_string(),
                "synth_mean_gap_days" => self.synth_mean_gap_days.to_string(),
                "synth_min_samples" => self.synth_min_samples.to_string(),
                "synth_max_samples" => self.synth_max_samples.to_string(),
                "seed" => self.seed.to_string(),
                other => unreachable!("unhandled config key {other}"),
            };
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    pub fn warp_params(&self) -> WarpParams {
        WarpParams { a: self.warp_a, b: self.warp_b }
    }

    /// Autoencoder config with its stage seed already derived.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden: self.ae_hidden,
            l1_activity: self.ae_l1_activity,
            l2_weight: self.ae_l2_weight,
            epochs: self.ae_epochs,
            learning_rate: self.ae_learning_rate,
            batch_size: self.ae_batch_size,
            validation_fraction: self.ae_validation_fraction,
            seed: crate::seeds::derive(self.seed, "autoencoder"),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_per_class: self.synth_n_per_class,
            noise: self.synth_noise,
            mean_gap_days: self.synth_mean_gap_days,
            min_samples: self.synth_min_samples,
            max_samples: self.synth_max_samples,
            seed: crate::seeds::derive(self.seed, "synth"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_preserves_every_key() {
        let mut config = PipelineConfig::default();
        config.apply("loinc", "1920-8").unwrap();
        config.apply("grid_tau", "0.5, 1.5, 4").unwrap();
        config.apply("auc_per_admission", "true").unwrap();
        config.apply("seed", "99").unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.txt");
        fs::write(&path, config.to_file_string()).unwrap();
        let back = PipelineConfig::from_file(&path).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.txt");
        fs::write(&path, "# a comment\n\nseed = 7\n  patch_len = 10\n").unwrap();
        let config = PipelineConfig::from_file(&path).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.patch_len, 10);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let mut config = PipelineConfig::default();
        let err = config.apply("no_such_key", "1").unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn malformed_line_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.txt");
        fs::write(&path, "seed 7\n").unwrap();
        assert!(PipelineConfig::from_file(&path).is_err());
    }

    #[test]
    fn every_declared_key_is_applicable() {
        let mut config = PipelineConfig::default();
        for (key, _) in CONFIG_KEYS {
            let value = match *key {
                "auc_per_admission" => "true",
                "grid_amplitude2" | "grid_alpha" | "grid_tau" | "grid_noise2" => "1,2",
                "loinc" | "cat_a" | "cat_b" => "x",
                "labevents" | "diagnoses" | "labitems" | "icd_dict" | "out_dir" => "p.csv",
                "train_fraction" | "ae_validation_fraction" => "0.5",
                _ => "3",
            };
            config.apply(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
