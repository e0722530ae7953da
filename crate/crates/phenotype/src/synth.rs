//! Synthetic two-class cohort generator emitting MIMIC-shaped CSV tables.
//! Class 0 admissions carry an ICD-9 diagnosis in category 428 and follow a
//! rising-ramp mean function; class 1 admissions carry category 571 and
//! follow a decaying spike. Stands in for the access-restricted clinical
//! source data.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const SYNTH_ITEMID: u64 = 50861;
pub const SYNTH_LOINC: &str = "1742-6";
pub const CLASS_A_ICD9: &str = "42822";
pub const CLASS_B_ICD9: &str = "5712";
const EXTRA_ICD9: &str = "4019";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Admissions per class, at least 2.
    pub n_per_class: usize,
    /// Standard deviation of additive Gaussian noise on the values.
    pub noise: f64,
    /// Mean of the exponential inter-sample gap distribution, in days.
    pub mean_gap_days: f64,
    pub min_samples: usize,
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_per_class: 100,
            noise: 0.05,
            mean_gap_days: 0.75,
            min_samples: 6,
            max_samples: 24,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class < 2 {
            return Err(Error::Config("synth_n_per_class must be >= 2".to_string()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("synth_noise must be >= 0".to_string()));
        }
        if self.min_samples < 3 || self.max_samples < self.min_samples {
            return Err(Error::Config(
                "synthetic series need 3 <= synth_min_samples <= synth_max_samples".to_string(),
            ));
        }
        if !(self.mean_gap_days > 0.0) {
            return Err(Error::Config("synth_mean_gap_days must be > 0".to_string()));
        }
        Ok(())
    }
}

/// Class mean function on the normalized series position `u ∈ [0, 1]`.
pub fn class_signature(label: u8, u: f64) -> f64 {
    if label == 0 {
        // rising ramp
        0.2 + 0.6 * u
    } else {
        // decaying spike
        0.2 + 0.7 * (-5.0 * u).exp()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFiles {
    pub labevents: PathBuf,
    pub diagnoses: PathBuf,
    pub labitems: PathBuf,
    pub icd_dict: PathBuf,
}

fn base_epoch_secs() -> i64 {
    chrono::NaiveDate::from_ymd_opt(2130, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap()
        .and_utc()
        .timestamp()
}

fn format_charttime(secs_from_base: i64) -> String {
    let dt = chrono::DateTime::from_timestamp(base_epoch_secs() + secs_from_base, 0)
        .expect("synthetic timestamp in range");
    dt.format("%Y-%m-%d %H:%M:%S").to_string()
}

/// Write the four MIMIC-shaped tables into `dir`, deterministically for the
/// spec's seed. Every generated admission passes cohort selection: distinct
/// timestamps, at least `min_samples` samples, exactly one cohort category.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<SyntheticFiles> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = SyntheticFiles {
        labevents: dir.join("labevents.csv"),
        diagnoses: dir.join("diagnoses_icd.csv"),
        labitems: dir.join("d_labitems.csv"),
        icd_dict: dir.join("d_icd_diagnoses.csv"),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut lab = csv_writer(&files.labevents)?;
    let mut dx = csv_writer(&files.diagnoses)?;
    writeln!(lab, "SUBJECT_ID,HADM_ID,ITEMID,CHARTTIME,VALUENUM").map_err(|e| Error::io(&files.labevents, e))?;
    writeln!(dx, "SUBJECT_ID,HADM_ID,ICD9_CODE").map_err(|e| Error::io(&files.diagnoses, e))?;

    for i in 0..2 * spec.n_per_class {
        let label = (i >= spec.n_per_class) as u8;
        let subject_id = 1_000 + i as u64;
        let hadm_id = 100_000 + i as u64;
        // admissions start on different days so charttimes look plausible
        let admit_offset_secs = i as i64 * 86_400;

        let n_samples = rng.random_range(spec.min_samples..=spec.max_samples);
        let mut sample_secs = Vec::with_capacity(n_samples);
        let mut t_secs: i64 = 0;
        sample_secs.push(t_secs);
        for _ in 1..n_samples {
            let u: f64 = rng.random();
            let gap_days = -spec.mean_gap_days * (1.0 - u).ln();
            let gap = (gap_days * 86_400.0).round().max(2.0) as i64;
            t_secs += gap;
            sample_secs.push(t_secs);
        }
        let span_secs = *sample_secs.last().unwrap();

        for &s in &sample_secs {
            let u = s as f64 / span_secs as f64;
            let noise: f64 = StandardNormal.sample(&mut rng);
            let value = class_signature(label, u) + spec.noise * noise;
            writeln!(
                lab,
                "{subject_id},{hadm_id},{SYNTH_ITEMID},{},{value}",
                format_charttime(admit_offset_secs + s)
            )
            .map_err(|e| Error::io(&files.labevents, e))?;
        }

        let code = if label == 0 { CLASS_A_ICD9 } else { CLASS_B_ICD9 };
        writeln!(dx, "{subject_id},{hadm_id},{code}").map_err(|e| Error::io(&files.diagnoses, e))?;
        if rng.random::<f64>() < 0.3 {
            writeln!(dx, "{subject_id},{hadm_id},{EXTRA_ICD9}")
                .map_err(|e| Error::io(&files.diagnoses, e))?;
        }
    }
    lab.flush().map_err(|e| Error::io(&files.labevents, e))?;
    dx.flush().map_err(|e| Error::io(&files.diagnoses, e))?;

    std::fs::write(
        &files.labitems,
        format!("ITEMID,LOINC_CODE\n{SYNTH_ITEMID},{SYNTH_LOINC}\n"),
    )
    .map_err(|e| Error::io(&files.labitems, e))?;
    std::fs::write(
        &files.icd_dict,
        format!(
            "ICD9_CODE,SHORT_TITLE\n{CLASS_A_ICD9},Chronic systolic heart failure\n\
             {CLASS_B_ICD9},Alcoholic cirrhosis of liver\n{EXTRA_ICD9},Hypertension NOS\n"
        ),
    )
    .map_err(|e| Error::io(&files.icd_dict, e))?;
    Ok(files)
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort;

    fn small_spec(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_per_class: 2,
            noise,
            mean_gap_days: 0.5,
            min_samples: 4,
            max_samples: 8,
            seed: 7,
        }
    }

    fn load_cohort(files: &SyntheticFiles) -> cohort::CohortSelection {
        let load = cohort::load_lab_events(&files.labevents, &files.labitems).unwrap();
        assert_eq!(load.total_dropped(), 0);
        let dx = cohort::load_diagnoses(&files.diagnoses).unwrap();
        assert_eq!(dx.dropped, 0);
        cohort::select_cohort(&load.events, &dx.diagnoses, SYNTH_LOINC, "428", "571", 3).unwrap()
    }

    #[test]
    fn minimum_spec_produces_four_admissions() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate_synthetic(&small_spec(0.05), dir.path()).unwrap();
        let sel = load_cohort(&files);
        assert_eq!(sel.series.len(), 4);
        assert!(sel.series.iter().all(|s| s.times.len() >= 3));
        assert_eq!(sel.series.iter().filter(|s| s.label == 0).count(), 2);
        assert_eq!(sel.series.iter().filter(|s| s.label == 1).count(), 2);
    }

    #[test]
    fn noiseless_series_follow_their_signature() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate_synthetic(&small_spec(0.0), dir.path()).unwrap();
        let sel = load_cohort(&files);
        for s in &sel.series {
            let span = *s.times.last().unwrap();
            for (t, v) in s.times.iter().zip(&s.values) {
                let expected = class_signature(s.label, t / span);
                assert!(
                    (v - expected).abs() < 1e-9,
                    "hadm {} at t={t}: {v} vs {expected}",
                    s.hadm_id
                );
            }
        }
    }

    #[test]
    fn round_trips_through_cohort_selection_without_drops() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { n_per_class: 10, ..small_spec(0.05) };
        let files = generate_synthetic(&spec, dir.path()).unwrap();
        let sel = load_cohort(&files);
        assert_eq!(sel.series.len(), 20);
        assert_eq!(sel.excluded_both_categories, 0);
        assert_eq!(sel.excluded_neither_category, 0);
        assert_eq!(sel.excluded_too_short, 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let spec = small_spec(0.1);
        let a = generate_synthetic(&spec, dir_a.path()).unwrap();
        let b = generate_synthetic(&spec, dir_b.path()).unwrap();
        assert_eq!(
            std::fs::read(&a.labevents).unwrap(),
            std::fs::read(&b.labevents).unwrap()
        );
        assert_eq!(
            std::fs::read(&a.diagnoses).unwrap(),
            std::fs::read(&b.diagnoses).unwrap()
        );
    }

    #[test]
    fn rejects_undersized_spec() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { n_per_class: 1, ..SyntheticSpec::default() };
        assert!(generate_synthetic(&spec, dir.path()).is_err());
    }
}
