//! Ingest of MIMIC-shaped CSV tables, ICD-9 × LOINC co-occurrence counting,
//! and extraction of two-class, mutually exclusive per-admission lab series.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDateTime;
use flate2::read::GzDecoder;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// One timestamped laboratory measurement joined with its LOINC code.
#[derive(Debug, Clone, PartialEq)]
pub struct LabEvent {
    pub subject_id: u64,
    pub hadm_id: u64,
    pub item_id: u64,
    pub loinc_code: String,
    /// Absolute timestamp, seconds resolution.
    pub charttime: NaiveDateTime,
    pub value: f64,
}

/// One ICD-9 diagnosis row; the category is the first three characters of
/// the code (V/E prefixes included).
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub subject_id: u64,
    pub hadm_id: u64,
    pub icd9_code: String,
    pub icd9_category: String,
}

/// One admission's lab series: times in fractional days rebased to the
/// first sample, with a binary class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabSeries {
    pub hadm_id: u64,
    pub subject_id: u64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// 0 for the first cohort category, 1 for the second.
    pub label: u8,
}

/// Admission counts per (ICD-9 category, LOINC code) pair, rows and columns
/// ordered by descending distinct-admission count.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMatrix {
    pub icd9_categories: Vec<String>,
    pub loinc_codes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

/// Lab events plus counters for every class of dropped row.
#[derive(Debug, Default)]
pub struct LabEventLoad {
    pub events: Vec<LabEvent>,
    pub dropped_missing_value: usize,
    pub dropped_missing_hadm: usize,
    pub dropped_unmapped: usize,
    pub dropped_malformed: usize,
}

impl LabEventLoad {
    pub fn total_dropped(&self) -> usize {
        self.dropped_missing_value
            + self.dropped_missing_hadm
            + self.dropped_unmapped
            + self.dropped_malformed
    }
}

#[derive(Debug, Default)]
pub struct DiagnosisLoad {
    pub diagnoses: Vec<Diagnosis>,
    pub dropped: usize,
}

/// Selected cohort plus exclusion counters for the summary diagnostic.
#[derive(Debug, Default)]
pub struct CohortSelection {
    pub series: Vec<LabSeries>,
    pub excluded_both_categories: usize,
    pub excluded_neither_category: usize,
    pub excluded_too_short: usize,
}

/// Open a CSV file, transparently gunzipping when the extension says so.
fn open_table(path: &Path) -> Result<csv::Reader<Box<dyn Read>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader))
}

/// Resolve required column names (case-insensitive) to indices, or report
/// the first one missing.
fn header_indices(
    path: &Path,
    reader: &mut csv::Reader<Box<dyn Read>>,
    required: &[&str],
) -> Result<Vec<usize>> {
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let lower: Vec<String> = headers.iter().map(|h| h.trim().to_lowercase()).collect();
    required
        .iter()
        .map(|name| {
            lower
                .iter()
                .position(|h| h == &name.to_lowercase())
                .ok_or_else(|| Error::schema(path, name.to_uppercase()))
        })
        .collect()
}

/// Map ITEMID → LOINC_CODE from a D_LABITEMS-shaped table; rows without a
/// LOINC code are simply absent from the map.
pub fn load_loinc_map(path: &Path) -> Result<HashMap<u64, String>> {
    let mut reader = open_table(path)?;
    let idx = header_indices(path, &mut reader, &["itemid", "loinc_code"])?;
    let mut map = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let item: Option<u64> = record.get(idx[0]).and_then(|s| s.trim().parse().ok());
        let loinc = record.get(idx[1]).map(str::trim).unwrap_or("");
        if let (Some(item), false) = (item, loinc.is_empty()) {
            map.insert(item, loinc.to_string());
        }
    }
    Ok(map)
}

/// Map ICD9_CODE → SHORT_TITLE from a D_ICD_DIAGNOSES-shaped table.
pub fn load_icd_dictionary(path: &Path) -> Result<HashMap<String, String>> {
    let mut reader = open_table(path)?;
    let idx = header_indices(path, &mut reader, &["icd9_code", "short_title"])?;
    let mut map = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let code = record.get(idx[0]).map(str::trim).unwrap_or("");
        let title = record.get(idx[1]).map(str::trim).unwrap_or("");
        if !code.is_empty() {
            map.insert(code.to_string(), title.to_string());
        }
    }
    Ok(map)
}

/// Load a LABEVENTS-shaped table and join LOINC codes. Rows with a missing
/// or non-numeric value, a missing admission id, an unmapped item, or a
/// malformed timestamp are dropped and counted, never fatal.
pub fn load_lab_events(path: &Path, loinc_map_path: &Path) -> Result<LabEventLoad> {
    let loinc_map = load_loinc_map(loinc_map_path)?;
    let mut reader = open_table(path)?;
    let idx = header_indices(
        path,
        &mut reader,
        &["subject_id", "hadm_id", "itemid", "charttime", "valuenum"],
    )?;
    let mut load = LabEventLoad::default();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let field = |i: usize| record.get(idx[i]).map(str::trim).unwrap_or("");

        let hadm = field(1);
        if hadm.is_empty() {
            load.dropped_missing_hadm += 1;
            continue;
        }
        let value_raw = field(4);
        let value: f64 = match value_raw.parse() {
            Ok(v) if f64::is_finite(v) => v,
            _ => {
                load.dropped_missing_value += 1;
                continue;
            }
        };
        let (Ok(subject_id), Ok(hadm_id), Ok(item_id)) = (
            field(0).parse::<u64>(),
            hadm.parse::<u64>(),
            field(2).parse::<u64>(),
        ) else {
            load.dropped_malformed += 1;
            continue;
        };
        let Ok(charttime) = NaiveDateTime::parse_from_str(field(3), TIMESTAMP_FORMAT) else {
            load.dropped_malformed += 1;
            continue;
        };
        let Some(loinc_code) = loinc_map.get(&item_id) else {
            load.dropped_unmapped += 1;
            continue;
        };
        load.events.push(LabEvent {
            subject_id,
            hadm_id,
            item_id,
            loinc_code: loinc_code.clone(),
            charttime,
            value,
        });
    }
    if load.total_dropped() > 0 {
        info!(
            "{}: dropped rows — missing value {}, missing hadm {}, unmapped item {}, malformed {}",
            path.display(),
            load.dropped_missing_value,
            load.dropped_missing_hadm,
            load.dropped_unmapped,
            load.dropped_malformed
        );
    }
    Ok(load)
}

/// Load a DIAGNOSES_ICD-shaped table; rows without an admission id or code
/// are dropped and counted.
pub fn load_diagnoses(path: &Path) -> Result<DiagnosisLoad> {
    let mut reader = open_table(path)?;
    let idx = header_indices(path, &mut reader, &["subject_id", "hadm_id", "icd9_code"])?;
    let mut load = DiagnosisLoad::default();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let field = |i: usize| record.get(idx[i]).map(str::trim).unwrap_or("");
        let code = field(2);
        let (Ok(subject_id), Ok(hadm_id), false) = (
            field(0).parse::<u64>(),
            field(1).parse::<u64>(),
            code.is_empty(),
        ) else {
            load.dropped += 1;
            continue;
        };
        load.diagnoses.push(Diagnosis {
            subject_id,
            hadm_id,
            icd9_category: icd9_category(code),
            icd9_code: code.to_string(),
        });
    }
    Ok(load)
}

/// First three characters of the code, V/E prefixes included.
pub fn icd9_category(code: &str) -> String {
    code.chars().take(3).collect()
}

/// Count, for each (ICD-9 category, LOINC code) cell, the number of distinct
/// admissions with at least one diagnosis in the category and at least one
/// lab event with the code. Rows and columns are truncated to the top-N by
/// distinct-admission count (ties broken by code order).
pub fn cooccurrence(
    events: &[LabEvent],
    diagnoses: &[Diagnosis],
    top_icd9: usize,
    top_loinc: usize,
) -> Result<CooccurrenceMatrix> {
    if top_icd9 < 1 || top_loinc < 1 {
        return Err(Error::Config(
            "co-occurrence matrix needs top_icd9 >= 1 and top_loinc >= 1".to_string(),
        ));
    }
    let mut cats_by_hadm: BTreeMap<u64, BTreeSet<&str>> = BTreeMap::new();
    for d in diagnoses {
        cats_by_hadm.entry(d.hadm_id).or_default().insert(&d.icd9_category);
    }
    let mut codes_by_hadm: BTreeMap<u64, BTreeSet<&str>> = BTreeMap::new();
    for e in events {
        codes_by_hadm.entry(e.hadm_id).or_default().insert(&e.loinc_code);
    }

    let mut cat_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for cats in cats_by_hadm.values() {
        for c in cats {
            *cat_counts.entry(c).or_default() += 1;
        }
    }
    let mut code_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for codes in codes_by_hadm.values() {
        for c in codes {
            *code_counts.entry(c).or_default() += 1;
        }
    }

    let top_by_count = |counts: &BTreeMap<&str, u64>, n: usize| -> Vec<String> {
        let mut items: Vec<(&str, u64)> = counts.iter().map(|(k, v)| (*k, *v)).collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        items.into_iter().take(n).map(|(k, _)| k.to_string()).collect()
    };
    let icd9_categories = top_by_count(&cat_counts, top_icd9);
    let loinc_codes = top_by_count(&code_counts, top_loinc);

    let cat_index: HashMap<&str, usize> = icd9_categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let code_index: HashMap<&str, usize> = loinc_codes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut counts = vec![vec![0u64; loinc_codes.len()]; icd9_categories.len()];
    for (hadm, cats) in &cats_by_hadm {
        let Some(codes) = codes_by_hadm.get(hadm) else { continue };
        for cat in cats {
            let Some(&i) = cat_index.get(cat) else { continue };
            for code in codes {
                if let Some(&j) = code_index.get(code) {
                    counts[i][j] += 1;
                }
            }
        }
    }
    Ok(CooccurrenceMatrix { icd9_categories, loinc_codes, counts })
}

/// Extract one [`LabSeries`] per admission that has enough samples of the
/// given LOINC code and a diagnosis in exactly one of the two categories.
/// Duplicate timestamps are collapsed by mean and times are rebased to
/// fractional days from the first sample.
pub fn select_cohort(
    events: &[LabEvent],
    diagnoses: &[Diagnosis],
    loinc: &str,
    cat_a: &str,
    cat_b: &str,
    min_samples: usize,
) -> Result<CohortSelection> {
    if cat_a == cat_b {
        return Err(Error::Config(format!(
            "cohort categories must differ, got {cat_a:?} twice"
        )));
    }
    let mut cats_by_hadm: HashMap<u64, BTreeSet<&str>> = HashMap::new();
    for d in diagnoses {
        cats_by_hadm.entry(d.hadm_id).or_default().insert(&d.icd9_category);
    }
    let mut samples_by_hadm: BTreeMap<u64, (u64, Vec<(NaiveDateTime, f64)>)> = BTreeMap::new();
    for e in events.iter().filter(|e| e.loinc_code == loinc) {
        samples_by_hadm
            .entry(e.hadm_id)
            .or_insert_with(|| (e.subject_id, Vec::new()))
            .1
            .push((e.charttime, e.value));
    }

    let mut selection = CohortSelection::default();
    for (hadm_id, (subject_id, mut samples)) in samples_by_hadm {
        let cats = cats_by_hadm.get(&hadm_id);
        let in_a = cats.is_some_and(|c| c.contains(cat_a));
        let in_b = cats.is_some_and(|c| c.contains(cat_b));
        match (in_a, in_b) {
            (true, true) => {
                selection.excluded_both_categories += 1;
                continue;
            }
            (false, false) => {
                selection.excluded_neither_category += 1;
                continue;
            }
            _ => {}
        }
        samples.sort_by_key(|(t, _)| *t);
        let (times, values) = collapse_duplicates(&samples);
        if times.len() < min_samples {
            selection.excluded_too_short += 1;
            continue;
        }
        selection.series.push(LabSeries {
            hadm_id,
            subject_id,
            times,
            values,
            label: if in_a { 0 } else { 1 },
        });
    }
    info!(
        "cohort {loinc} {cat_a}/{cat_b}: {} admissions selected ({} both categories, {} neither, {} too short)",
        selection.series.len(),
        selection.excluded_both_categories,
        selection.excluded_neither_category,
        selection.excluded_too_short
    );
    if selection.series.is_empty() {
        warn!("cohort selection produced zero qualifying admissions");
    }
    Ok(selection)
}

/// Mean-collapse exactly equal timestamps and rebase to days from the first
/// sample. Input must be sorted by time.
fn collapse_duplicates(samples: &[(NaiveDateTime, f64)]) -> (Vec<f64>, Vec<f64>) {
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut i = 0;
    while i < samples.len() {
        let t = samples[i].0;
        let mut sum = 0.0;
        let mut count = 0usize;
        while i < samples.len() && samples[i].0 == t {
            sum += samples[i].1;
            count += 1;
            i += 1;
        }
        times.push(t);
        values.push(sum / count as f64);
    }
    let t0 = times[0];
    let days = times
        .iter()
        .map(|t| (*t - t0).num_seconds() as f64 / 86_400.0)
        .collect();
    (days, values)
}

/// Random disjoint partition by admission, reproducible for a given seed;
/// the train side gets `round(train_fraction · n)` admissions.
pub fn split_cohort(
    cohort: &[LabSeries],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabSeries>, Vec<LabSeries>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    if cohort.is_empty() {
        return Err(Error::Data("cannot split an empty cohort".to_string()));
    }
    let mut indices: Vec<usize> = (0..cohort.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = (train_fraction * cohort.len() as f64).round() as usize;
    let mut train: Vec<LabSeries> = indices[..n_train].iter().map(|&i| cohort[i].clone()).collect();
    let mut test: Vec<LabSeries> = indices[n_train..].iter().map(|&i| cohort[i].clone()).collect();
    train.sort_by_key(|s| s.hadm_id);
    test.sort_by_key(|s| s.hadm_id);
    Ok((train, test))
}

/// Long-format cohort CSV `hadm_id,label,t_days,value`, ordered by
/// (hadm_id, t_days).
pub fn write_cohort_csv(path: &Path, cohort: &[LabSeries]) -> Result<()> {
    let mut sorted: Vec<&LabSeries> = cohort.iter().collect();
    sorted.sort_by_key(|s| s.hadm_id);
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["hadm_id", "label", "t_days", "value"])
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for s in sorted {
        for (t, v) in s.times.iter().zip(&s.values) {
            w.write_record(&[
                s.hadm_id.to_string(),
                s.label.to_string(),
                t.to_string(),
                v.to_string(),
            ])
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a cohort CSV back into series. The long format does not carry
/// subject ids, so they come back as 0.
pub fn read_cohort_csv(path: &Path) -> Result<Vec<LabSeries>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        }
    })?;
    let mut out: Vec<LabSeries> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let get = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::Data(format!("{}: short row", path.display())))
        };
        let hadm_id: u64 = parse(path, get(0)?)?;
        let label: u8 = parse(path, get(1)?)?;
        let t: f64 = parse(path, get(2)?)?;
        let v: f64 = parse(path, get(3)?)?;
        match out.last_mut() {
            Some(s) if s.hadm_id == hadm_id => {
                s.times.push(t);
                s.values.push(v);
            }
            _ => out.push(LabSeries {
                hadm_id,
                subject_id: 0,
                times: vec![t],
                values: vec![v],
                label,
            }),
        }
    }
    Ok(out)
}

/// Co-occurrence matrix as CSV: first column the ICD-9 category, one column
/// per LOINC code.
pub fn write_cooccurrence_csv(path: &Path, m: &CooccurrenceMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut header = vec!["icd9_category".to_string()];
    header.extend(m.loinc_codes.iter().cloned());
    w.write_record(&header)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for (cat, row) in m.icd9_categories.iter().zip(&m.counts) {
        let mut record = vec![cat.clone()];
        record.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&record)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e| Error::Data(format!("{}: cannot parse {s:?}: {e}", path.display())))
}
