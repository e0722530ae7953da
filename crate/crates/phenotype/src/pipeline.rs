//! Stage orchestration: cohort → split → grid search → interpolation →
//! patches → autoencoder → features → t-SNE + logistic AUC → plots. Every
//! stage reads its inputs from files and writes its outputs as plain CSV (or
//! the model file), so a run can resume from whatever intermediates exist.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use crate::analysis::{self, TsneParams};
use crate::autoencoder::{self, EncodeLayer};
use crate::cohort;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::gpr;
use crate::plot;
use crate::preprocess;
use crate::seeds;
use crate::synth;

/// All artifact paths under the configured output directory.
#[derive(Debug, Clone)]
pub struct StagePaths {
    pub out_dir: PathBuf,
    pub config_snapshot: PathBuf,
    pub cooccurrence: PathBuf,
    pub cohort_all: PathBuf,
    pub cohort_train: PathBuf,
    pub cohort_test: PathBuf,
    pub hyperparams: PathBuf,
    pub interp_train: PathBuf,
    pub interp_test: PathBuf,
    pub patches_train: PathBuf,
    pub patches_eval: PathBuf,
    pub model: PathBuf,
    pub features_train_l1: PathBuf,
    pub features_train_l2: PathBuf,
    pub features_eval_l1: PathBuf,
    pub features_eval_l2: PathBuf,
    pub embedding: PathBuf,
    pub metrics: PathBuf,
    pub plots_dir: PathBuf,
}

impl StagePaths {
    pub fn new(out_dir: &Path) -> Self {
        let p = |name: &str| out_dir.join(name);
        StagePaths {
            out_dir: out_dir.to_path_buf(),
            config_snapshot: p("config_resolved.txt"),
            cooccurrence: p("cooccurrence.csv"),
            cohort_all: p("cohort.csv"),
            cohort_train: p("cohort_train.csv"),
            cohort_test: p("cohort_test.csv"),
            hyperparams: p("hyperparams.txt"),
            interp_train: p("interp_train.csv"),
            interp_test: p("interp_test.csv"),
            patches_train: p("patches_train.csv"),
            patches_eval: p("patches_eval.csv"),
            model: p("model.aem"),
            features_train_l1: p("features_layer1_train.csv"),
            features_train_l2: p("features_layer2_train.csv"),
            features_eval_l1: p("features_layer1_eval.csv"),
            features_eval_l2: p("features_layer2_eval.csv"),
            embedding: p("embedding.csv"),
            metrics: p("metrics.txt"),
            plots_dir: p("plots"),
        }
    }
}

/// Exclusive per-output-directory lock; released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(".pheno.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory is locked by another run (remove {} if stale)",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Prefix the failing stage's name while keeping the exit-code class.
fn in_stage<T>(stage: &str, value: Result<T>) -> Result<T> {
    value.map_err(|e| {
        let message = format!("stage {stage}: {e}");
        match e.exit_code() {
            1 => Error::Config(message),
            3 => Error::Numerical(message),
            _ => Error::Data(message),
        }
    })
}

fn require_input(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    Ok(())
}

/// Write the co-occurrence matrix for the configured input tables.
pub fn stage_cooccur(config: &PipelineConfig) -> Result<PathBuf> {
    let paths = StagePaths::new(&config.out_dir);
    let run = || -> Result<PathBuf> {
        require_input(&config.labevents)?;
        require_input(&config.diagnoses)?;
        require_input(&config.labitems)?;
        let events = cohort::load_lab_events(&config.labevents, &config.labitems)?;
        let diagnoses = cohort::load_diagnoses(&config.diagnoses)?;
        let matrix = cohort::cooccurrence(
            &events.events,
            &diagnoses.diagnoses,
            config.top_icd9,
            config.top_loinc,
        )?;
        fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
        cohort::write_cooccurrence_csv(&paths.cooccurrence, &matrix)?;
        Ok(paths.cooccurrence.clone())
    };
    in_stage("cooccur", run())
}

/// Select the two-class cohort and split it; writes the full cohort CSV and
/// the per-split CSVs.
pub fn stage_cohort(config: &PipelineConfig) -> Result<()> {
    let paths = StagePaths::new(&config.out_dir);
    let run = || -> Result<()> {
        require_input(&config.labevents)?;
        require_input(&config.diagnoses)?;
        require_input(&config.labitems)?;
        let events = cohort::load_lab_events(&config.labevents, &config.labitems)?;
        let diagnoses = cohort::load_diagnoses(&config.diagnoses)?;
        if let Some(dict_path) = &config.icd_dict {
            let dict = cohort::load_icd_dictionary(dict_path)?;
            let describe = |cat: &str| {
                dict.iter()
                    .find(|(code, _)| code.starts_with(cat))
                    .map(|(_, title)| title.clone())
                    .unwrap_or_default()
            };
            info!(
                "categories: {} ({}) vs {} ({})",
                config.cat_a,
                describe(&config.cat_a),
                config.cat_b,
                describe(&config.cat_b)
            );
        }
        let selection = cohort::select_cohort(
            &events.events,
            &diagnoses.diagnoses,
            &config.loinc,
            &config.cat_a,
            &config.cat_b,
            config.min_samples,
        )?;
        if selection.series.is_empty() {
            return Err(Error::Data(
                "cohort selection produced zero qualifying admissions".to_string(),
            ));
        }
        let (train, test) = cohort::split_cohort(
            &selection.series,
            config.train_fraction,
            seeds::derive(config.seed, "split"),
        )?;
        fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
        cohort::write_cohort_csv(&paths.cohort_all, &selection.series)?;
        cohort::write_cohort_csv(&paths.cohort_train, &train)?;
        cohort::write_cohort_csv(&paths.cohort_test, &test)?;
        info!(
            "cohort: {} admissions ({} train, {} test)",
            selection.series.len(),
            train.len(),
            test.len()
        );
        Ok(())
    };
    in_stage("cohort", run())
}

/// Warp and standardize every training series.
fn prepared_series(
    series: &[cohort::LabSeries],
    warp: &preprocess::WarpParams,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    series
        .iter()
        .map(|s| {
            let x = preprocess::warp_times(&s.times, warp)?;
            let (y, _) = preprocess::standardize(&s.values);
            Ok((x, y))
        })
        .collect()
}

/// Grid-search GP hyperparameters on the training split only.
pub fn stage_gpr_fit(config: &PipelineConfig) -> Result<()> {
    let paths = StagePaths::new(&config.out_dir);
    let run = || -> Result<()> {
        require_input(&paths.cohort_train)?;
        let train = cohort::read_cohort_csv(&paths.cohort_train)?;
        let prepared = prepared_series(&train, &config.warp_params())?;
        let (best, total_lml) = gpr::grid_search(&prepared, &config.grid)?;
        gpr::write_hyperparam_report(&paths.hyperparams, &best, total_lml)?;
        info!(
            "grid search over {} points: amplitude2={} alpha={} tau={} noise2={} (total LML {total_lml:.3})",
            config.grid.len(),
            best.amplitude2,
            best.alpha,
            best.tau,
            best.noise2
        );
        Ok(())
    };
    in_stage("gpr-fit", run())
}

/// Interpolate both splits onto the regular padded grid.
pub fn stage_interpolate(config: &PipelineConfig) -> Result<()> {
    let paths = StagePaths::new(&config.out_dir);
    let run = || -> Result<()> {
        require_input(&paths.cohort_train)?;
        require_input(&paths.cohort_test)?;
        require_input(&paths.hyperparams)?;
        let (hyper, _) = gpr::read_hyperparam_report(&paths.hyperparams)?;
        let warp = config.warp_params();
        for (input, output) in [
            (&paths.cohort_train, &paths.interp_train),
            (&paths.cohort_test, &paths.interp_test),
        ] {
            let series = cohort::read_cohort_csv(input)?;
            let interpolated: Result<Vec<_>> = series
                .par_iter()
                .map(|s| {
                    gpr::interpolate(s, &hyper, &warp, config.interval_days, config.pad_samples)
                })
                .collect();
            gpr::write_interpolated_csv(output, &interpolated?)?;
        }
        Ok(())
    };
    in_stage("interpolate", run())
}

/// Sample training patches and run the three autoencoder phases.
pub fn stage_train_ae(config: &PipelineConfig) -> Result<()> {
    let paths = StagePaths::new(&config.out_dir);
    let run = || -> Result<()> {
        require_input(&paths.interp_train)?;
        let series = gpr::read_interpolated_csv(&paths.interp_train)?;
        let patches = autoencoder::sample_patches(
            &series,
            config.patch_len,
            config.n_patches,
            seeds::derive(config.seed, "patches-train"),
        )?;
        autoencoder::write_patches_csv(&paths.patches_train, &patches)?;
        let (model, reports) = autoencoder::train_stack(&patches, &config.train_config())?;
        for (phase, report) in ["layer1", "layer2", "fine-tune"].iter().zip(&reports) {
            info!(
                "{phase}: train loss {:.5} -> {:.5}",
                report.initial_loss(),
                report.final_loss()
            );
        }
        autoencoder::save_model(&paths.model, &model)?;
        Ok(())
    };
    in_stage("train-ae", run())
}

/// Sample evaluation patches from the test split and write layer-1/layer-2
/// feature matrices for both splits.
pub fn stage_features(config: &PipelineConfig) -> Result<()> {
    let paths = StagePaths::new(&config.out_dir);
    let run = || -> Result<()> {
        require_input(&paths.model)?;
        require_input(&paths.patches_train)?;
        require_input(&paths.interp_test)?;
        let model = autoencoder::load_model(&paths.model)?;
        let train_patches = autoencoder::read_patches_csv(&paths.patches_train)?;
        let test_series = gpr::read_interpolated_csv(&paths.interp_test)?;
        let eval_patches = autoencoder::sample_patches(
            &test_series,
            config.patch_len,
            config.n_eval_patches,
            seeds::derive(config.seed, "patches-eval"),
        )?;
        autoencoder::write_patches_csv(&paths.patches_eval, &eval_patches)?;

        for (patches, l1_path, l2_path) in [
            (&train_patches, &paths.features_train_l1, &paths.features_train_l2),
            (&eval_patches, &paths.features_eval_l1, &paths.features_eval_l2),
        ] {
            let f1 = autoencoder::encode(&model, patches, EncodeLayer::First);
            let f2 = autoencoder::encode(&model, patches, EncodeLayer::Second);
            autoencoder::write_features_csv(l1_path, patches, &f1)?;
            autoencoder::write_features_csv(l2_path, patches, &f2)?;
        }
        Ok(())
    };
    in_stage("features", run())
}

/// Fit logistic models on the train-split features, score AUC on the eval
/// split, embed the eval layer-2 features with t-SNE, and write the metrics
/// report.
pub fn stage_analyze(config: &PipelineConfig) -> Result<()> {
    let paths = StagePaths::new(&config.out_dir);
    let run = || -> Result<()> {
        for p in [
            &paths.features_train_l1,
            &paths.features_train_l2,
            &paths.features_eval_l1,
            &paths.features_eval_l2,
            &paths.cohort_train,
            &paths.cohort_test,
        ] {
            require_input(p)?;
        }
        let mut aucs = Vec::new();
        let mut admission_aucs = Vec::new();
        for (train_path, eval_path) in [
            (&paths.features_train_l1, &paths.features_eval_l1),
            (&paths.features_train_l2, &paths.features_eval_l2),
        ] {
            let (train_meta, train_features) = autoencoder::read_features_csv(train_path)?;
            let (eval_meta, eval_features) = autoencoder::read_features_csv(eval_path)?;
            let train_labels: Vec<u8> = train_meta.iter().map(|(_, y)| *y).collect();
            let eval_labels: Vec<u8> = eval_meta.iter().map(|(_, y)| *y).collect();
            let fit = analysis::fit_logistic(
                &train_features,
                &train_labels,
                config.logistic_l2,
                config.logistic_iterations,
            )?;
            aucs.push(analysis::auc(&fit.model, &eval_features, &eval_labels)?);
            if config.auc_per_admission {
                let hadm_ids: Vec<u64> = eval_meta.iter().map(|(h, _)| *h).collect();
                let scores = fit.model.scores(&eval_features);
                let (s, y) =
                    analysis::aggregate_scores_by_admission(&hadm_ids, &scores, &eval_labels);
                admission_aucs.push(analysis::auc_from_scores(&s, &y)?);
            }
        }

        let (eval_meta, eval_l2) = autoencoder::read_features_csv(&paths.features_eval_l2)?;
        let eval_labels: Vec<u8> = eval_meta.iter().map(|(_, y)| *y).collect();
        let embedding = analysis::tsne(
            &eval_l2,
            &TsneParams {
                perplexity: config.tsne_perplexity,
                iterations: config.tsne_iterations,
                seed: seeds::derive(config.seed, "tsne"),
                ..TsneParams::default()
            },
        )?;
        analysis::write_embedding_csv(&paths.embedding, &embedding, &eval_labels)?;

        let n_train = cohort::read_cohort_csv(&paths.cohort_train)?.len();
        let n_test = cohort::read_cohort_csv(&paths.cohort_test)?.len();
        let mut report = String::new();
        let _ = writeln!(report, "n_train = {n_train}");
        let _ = writeln!(report, "n_test = {n_test}");
        let _ = writeln!(report, "auc_layer1 = {}", aucs[0]);
        let _ = writeln!(report, "auc_layer2 = {}", aucs[1]);
        if config.auc_per_admission {
            let _ = writeln!(report, "auc_layer1_admission = {}", admission_aucs[0]);
            let _ = writeln!(report, "auc_layer2_admission = {}", admission_aucs[1]);
        }
        let _ = writeln!(report, "tsne_kl = {}", embedding.kl_divergence);
        fs::write(&paths.metrics, report).map_err(|e| Error::io(&paths.metrics, e))?;
        info!(
            "analyze: auc_layer1={:.3} auc_layer2={:.3} tsne_kl={:.4}",
            aucs[0], aucs[1], embedding.kl_divergence
        );
        Ok(())
    };
    in_stage("analyze", run())
}

/// Emit the three figure types from the stage outputs.
pub fn stage_plot(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let paths = StagePaths::new(&config.out_dir);
    let run = || -> Result<Vec<PathBuf>> {
        require_input(&paths.cohort_train)?;
        require_input(&paths.interp_train)?;
        require_input(&paths.model)?;
        require_input(&paths.embedding)?;
        fs::create_dir_all(&paths.plots_dir).map_err(|e| Error::io(&paths.plots_dir, e))?;
        let mut written = Vec::new();

        let cohort_series = cohort::read_cohort_csv(&paths.cohort_train)?;
        let interpolated = gpr::read_interpolated_csv(&paths.interp_train)?;
        let series = cohort_series
            .first()
            .ok_or_else(|| Error::Data("train cohort is empty".to_string()))?;
        let interp = interpolated
            .iter()
            .find(|i| i.hadm_id == series.hadm_id)
            .ok_or_else(|| {
                Error::Data(format!("no interpolated series for hadm_id {}", series.hadm_id))
            })?;
        let overlay = plot::series_overlay_svg(series, &config.warp_params(), interp)?;
        let overlay_path = paths.plots_dir.join("ts_gpr.svg");
        fs::write(&overlay_path, overlay).map_err(|e| Error::io(&overlay_path, e))?;
        written.push(overlay_path);

        let model = autoencoder::load_model(&paths.model)?;
        let grid = plot::signature_grid_svg(&autoencoder::first_layer_signatures(&model))?;
        let grid_path = paths.plots_dir.join("encode1_signatures.svg");
        fs::write(&grid_path, grid).map_err(|e| Error::io(&grid_path, e))?;
        written.push(grid_path);

        let (labels, coords) = analysis::read_embedding_csv(&paths.embedding)?;
        let scatter = plot::embedding_scatter_svg(&coords, &labels)?;
        let scatter_path = paths.plots_dir.join("tsne_layer2.svg");
        fs::write(&scatter_path, scatter).map_err(|e| Error::io(&scatter_path, e))?;
        written.push(scatter_path);
        Ok(written)
    };
    in_stage("plot", run())
}

/// Outputs that mark a stage as already done when resuming.
fn stage_outputs(paths: &StagePaths) -> Vec<(&'static str, Vec<PathBuf>)> {
    vec![
        (
            "cohort",
            vec![
                paths.cohort_all.clone(),
                paths.cohort_train.clone(),
                paths.cohort_test.clone(),
            ],
        ),
        ("gpr-fit", vec![paths.hyperparams.clone()]),
        (
            "interpolate",
            vec![paths.interp_train.clone(), paths.interp_test.clone()],
        ),
        (
            "train-ae",
            vec![paths.patches_train.clone(), paths.model.clone()],
        ),
        (
            "features",
            vec![
                paths.patches_eval.clone(),
                paths.features_train_l1.clone(),
                paths.features_train_l2.clone(),
                paths.features_eval_l1.clone(),
                paths.features_eval_l2.clone(),
            ],
        ),
        (
            "analyze",
            vec![paths.embedding.clone(), paths.metrics.clone()],
        ),
        (
            "plot",
            vec![
                paths.plots_dir.join("ts_gpr.svg"),
                paths.plots_dir.join("encode1_signatures.svg"),
                paths.plots_dir.join("tsne_layer2.svg"),
            ],
        ),
    ]
}

/// Run every stage in order, skipping stages whose outputs already exist, so
/// deleting downstream artifacts and rerunning reproduces them from the
/// surviving intermediates.
pub fn run_pipeline(config: &PipelineConfig) -> Result<StagePaths> {
    let _lock = OutputLock::acquire(&config.out_dir)?;
    run_pipeline_locked(config)
}

/// Same as [`run_pipeline`] for callers that already hold the output lock.
pub fn run_pipeline_locked(config: &PipelineConfig) -> Result<StagePaths> {
    let paths = StagePaths::new(&config.out_dir);
    fs::write(&paths.config_snapshot, config.to_file_string())
        .map_err(|e| Error::io(&paths.config_snapshot, e))?;

    for (stage, outputs) in stage_outputs(&paths) {
        if outputs.iter().all(|p| p.exists()) {
            info!("stage {stage}: outputs present, skipping");
            continue;
        }
        info!("stage {stage}: running");
        match stage {
            "cohort" => stage_cohort(config)?,
            "gpr-fit" => stage_gpr_fit(config)?,
            "interpolate" => stage_interpolate(config)?,
            "train-ae" => stage_train_ae(config)?,
            "features" => stage_features(config)?,
            "analyze" => stage_analyze(config)?,
            "plot" => {
                stage_plot(config)?;
            }
            other => unreachable!("unknown stage {other}"),
        }
    }
    Ok(paths)
}

/// Generate the synthetic input tables and point the config at them.
pub fn stage_synth(config: &PipelineConfig, dir: &Path) -> Result<PipelineConfig> {
    let files = synth::generate_synthetic(&config.synthetic_spec(), dir)?;
    let mut updated = config.clone();
    updated.labevents = files.labevents;
    updated.diagnoses = files.diagnoses;
    updated.labitems = files.labitems;
    updated.icd_dict = Some(files.icd_dict);
    updated.loinc = synth::SYNTH_LOINC.to_string();
    updated.cat_a = "428".to_string();
    updated.cat_b = "571".to_string();
    Ok(updated)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_config(dir: &Path) -> PipelineConfig {
        let mut config = PipelineConfig::default();
        config.out_dir = dir.join("out");
        config.synth_n_per_class = 12;
        config.synth_min_samples = 5;
        config.synth_max_samples = 10;
        config.synth_mean_gap_days = 0.4;
        config.grid = gpr::GridSpec {
            amplitude2: vec![1.0],
            alpha: vec![1.0],
            tau: vec![0.3, 1.0],
            noise2: vec![0.05, 0.1],
        };
        config.pad_samples = 4;
        config.patch_len = 8;
        config.n_patches = 120;
        config.n_eval_patches = 60;
        config.ae_hidden = 16;
        config.ae_epochs = 15;
        config.tsne_perplexity = 8.0;
        config.tsne_iterations = 120;
        config.logistic_iterations = 200;
        config.seed = 5;
        config
    }

    #[test]
    fn full_run_resumes_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fast_config(dir.path());
        config = stage_synth(&config, &dir.path().join("synth")).unwrap();

        let paths = run_pipeline(&config).unwrap();
        assert!(paths.metrics.exists());
        let metrics_first = fs::read(&paths.metrics).unwrap();
        let embedding_first = fs::read(&paths.embedding).unwrap();

        let svgs: Vec<PathBuf> = fs::read_dir(&paths.plots_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "svg"))
            .collect();
        assert!(svgs.len() >= 3, "expected 3+ SVG figures, got {svgs:?}");
        for svg in &svgs {
            let text = fs::read_to_string(svg).unwrap();
            roxmltree::Document::parse(&text)
                .unwrap_or_else(|e| panic!("{}: not well-formed XML: {e}", svg.display()));
        }

        // delete downstream outputs; resume must rebuild them identically
        fs::remove_file(&paths.metrics).unwrap();
        fs::remove_file(&paths.embedding).unwrap();
        run_pipeline(&config).unwrap();
        assert_eq!(fs::read(&paths.metrics).unwrap(), metrics_first);
        assert_eq!(fs::read(&paths.embedding).unwrap(), embedding_first);
    }

    #[test]
    fn lock_excludes_concurrent_runs() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn missing_input_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fast_config(dir.path());
        config.labevents = dir.path().join("missing_labevents.csv");
        let err = stage_cohort(&config).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("missing_labevents.csv"), "{err}");
        assert!(err.to_string().contains("cohort"), "{err}");
    }
}
