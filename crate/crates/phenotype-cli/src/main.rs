//! `pheno` — subcommand CLI over the phenotype feature-learning pipeline.
//!
//! Every config key from the flat key-value config file is also accepted as
//! a `--key=value` flag on any subcommand; flags override the file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use log::error;
use phenotype::config::{PipelineConfig, CONFIG_KEYS};
use phenotype::error::Error;
use phenotype::pipeline::{self, OutputLock};
use phenotype::synth;

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("synth", "generate a synthetic two-class cohort as MIMIC-shaped CSVs"),
    ("cooccur", "write the ICD-9 category x LOINC co-occurrence matrix"),
    ("cohort", "select the two-class cohort and split it into train/test"),
    ("gpr-fit", "grid-search GP hyperparameters on the training split"),
    ("interpolate", "GP-interpolate both splits onto a regular padded grid"),
    ("train-ae", "sample patches and train the stacked sparse autoencoder"),
    ("features", "encode train/eval patches into feature matrices"),
    ("analyze", "fit logistic classifiers, compute AUC, and embed with t-SNE"),
    ("run", "run the full pipeline end to end (resumes from existing outputs)"),
    ("plot", "emit SVG figures from a completed run directory"),
];

fn cli() -> Command {
    let mut root = Command::new("pheno")
        .about("phenotype feature learning from sparse lab time-series")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(*name).about(*about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat key = value config file"),
        );
        if *name == "synth" {
            sub = sub.arg(
                Arg::new("synth_dir")
                    .long("synth-dir")
                    .value_name("DIR")
                    .help("directory for the generated CSV tables (default: <out_dir>/synth)"),
            );
        }
        for (key, help) in CONFIG_KEYS {
            sub = sub.arg(Arg::new(*key).long(*key).value_name("VALUE").help(*help));
        }
        root = root.subcommand(sub);
    }
    root
}

fn build_config(matches: &ArgMatches) -> Result<PipelineConfig, Error> {
    let mut config = PipelineConfig::default();
    if let Some(path) = matches.get_one::<String>("config") {
        config.apply_file(&PathBuf::from(path))?;
    }
    for (key, _) in CONFIG_KEYS {
        if let Some(value) = matches.get_one::<String>(*key) {
            config.apply(key, value)?;
        }
    }
    Ok(config)
}

fn init_thread_pool() {
    let threads = std::env::var("PHENO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn dispatch(name: &str, matches: &ArgMatches) -> Result<(), Error> {
    let config = build_config(matches)?;
    match name {
        "synth" => {
            let dir = matches
                .get_one::<String>("synth_dir")
                .map(PathBuf::from)
                .unwrap_or_else(|| config.out_dir.join("synth"));
            let files = synth::generate_synthetic(&config.synthetic_spec(), &dir)?;
            println!("{}", files.labevents.display());
            println!("{}", files.diagnoses.display());
            println!("{}", files.labitems.display());
            println!("{}", files.icd_dict.display());
            Ok(())
        }
        "cooccur" => {
            let _lock = OutputLock::acquire(&config.out_dir)?;
            let path = pipeline::stage_cooccur(&config)?;
            println!("{}", path.display());
            Ok(())
        }
        "cohort" => with_lock(&config, pipeline::stage_cohort),
        "gpr-fit" => with_lock(&config, pipeline::stage_gpr_fit),
        "interpolate" => with_lock(&config, pipeline::stage_interpolate),
        "train-ae" => with_lock(&config, pipeline::stage_train_ae),
        "features" => with_lock(&config, pipeline::stage_features),
        "analyze" => with_lock(&config, pipeline::stage_analyze),
        "run" => {
            let paths = pipeline::run_pipeline(&config)?;
            println!("{}", paths.metrics.display());
            Ok(())
        }
        "plot" => {
            let _lock = OutputLock::acquire(&config.out_dir)?;
            for path in pipeline::stage_plot(&config)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        other => Err(Error::Config(format!("unknown subcommand {other}"))),
    }
}

fn with_lock(
    config: &PipelineConfig,
    stage: fn(&PipelineConfig) -> Result<(), Error>,
) -> Result<(), Error> {
    let _lock = OutputLock::acquire(&config.out_dir)?;
    stage(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_thread_pool();

    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if e.use_stderr() => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // clap's help/version output goes to stdout with success
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match dispatch(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
