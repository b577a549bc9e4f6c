//! Campaign reporting: fault records, diversity statistics, file export,
//! and the retraining evaluation.
//!
//! A campaign produces a single [`CampaignReport`] value; everything else
//! here is a pure function of it. Export is deterministic — re-exporting
//! the same report yields byte-identical files — so report artifacts can be
//! diffed across runs to verify reproducibility.
//!
//! On-disk layout produced by [`export_report`]:
//!
//! * `report.json` — the full report, compact JSON.
//! * `coverage.csv` — `step,nc,kmnc,nbc,snac,tknc` (header only when the
//!   campaign ran without coverage feedback).
//! * `faults.csv` — one row per fault.
//! * `lambda.csv` — `step,lambda` schedule history.
//! * `images/fault_NNNNNN.pgm|ppm` — decoded fault inputs, for image-shaped
//!   data (binary PGM for single-channel, PPM for 3-channel).

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::CoverageValues;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::forward::forward;
use crate::model::Model;
use crate::oracle::ModelPrediction;
use crate::tensor::Tensor;
use crate::train::train_sgd;

/// How a fault-triggering candidate was proposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Fresh prior sample on the manifold.
    Explore,
    /// Mutation of a queued seed.
    Exploit,
}

impl Provenance {
    pub fn name(&self) -> &'static str {
        match self {
            Provenance::Explore => "explore",
            Provenance::Exploit => "exploit",
        }
    }
}

/// One recorded prediction fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub id: u64,
    /// Campaign step at which the fault was found.
    pub step: u64,
    pub origin: Provenance,
    /// Corpus-rooted lineage of the seed the candidate was mutated from;
    /// absent for exploration samples.
    pub lineage: Option<u64>,
    /// Class whose manifold chart produced the input — the label the
    /// prediction should have kept (and the label used for retraining).
    pub seed_class: usize,
    /// Latent coordinates of the candidate.
    pub coords: Vec<f64>,
    /// Decoded input after range clipping (flattened; shape in the report
    /// meta). Always passes the input validity check.
    pub decoded: Vec<f32>,
    /// Decoder output before clipping, kept for audit.
    pub raw: Vec<f32>,
    /// Every model's prediction, primary model first.
    pub predictions: Vec<ModelPrediction>,
    pub oracle_kind: String,
    /// L1 probability distance for quantization differentials.
    pub fitness: Option<f64>,
}

/// The class a fault was (wrongly) predicted as: the first prediction whose
/// label differs from the seed class, or the primary prediction when every
/// model agreed on the seed class (possible for numeric-tolerance faults).
pub fn erroneous_class(fault: &FaultRecord) -> Result<usize> {
    let first = fault
        .predictions
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("fault {} has no predictions", fault.id)))?;
    Ok(fault
        .predictions
        .iter()
        .find(|p| p.label != fault.seed_class)
        .unwrap_or(first)
        .label)
}

/// Diversity of the erroneous predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    /// Number of distinct erroneous classes observed.
    pub class_count: usize,
    /// Entropy of the erroneous-class distribution, normalized by
    /// `ln(class_count)` so it lands in `[0, 1]`; defined as 0 for a
    /// single class.
    pub scaled_entropy: f64,
}

/// Computes the scaled entropy of the erroneous-class distribution over a
/// non-empty fault list. Permutation-invariant.
pub fn diversity(faults: &[FaultRecord]) -> Result<DiversityStats> {
    if faults.is_empty() {
        return Err(Error::InvalidArgument("diversity of an empty fault list".into()));
    }
    let mut counts: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for f in faults {
        *counts.entry(erroneous_class(f)?).or_insert(0) += 1;
    }
    let classes = counts.len();
    let scaled_entropy = if classes <= 1 {
        0.0
    } else {
        let n = faults.len() as f64;
        let h: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        h / (classes as f64).ln()
    };
    Ok(DiversityStats { class_count: classes, scaled_entropy })
}

/// One row of the coverage curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub values: CoverageValues,
}

/// One recorded value of the exploit-probability schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub step: u64,
    pub lambda: f64,
}

/// Best fitness seen so far, for campaigns driven by a fitness signal
/// instead of coverage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessPoint {
    pub step: u64,
    pub best: f64,
}

/// Campaign identity and shape information needed to interpret the rest of
/// the report (and to export images).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignMeta {
    /// "graybox" (coverage feedback) or "blackbox" (fitness feedback).
    pub mode: String,
    /// Objective criterion name, or "fitness" in blackbox mode.
    pub objective: String,
    /// "trajectory" or "random".
    pub strategy: String,
    pub rng_seed: u64,
    pub budget_steps: Option<u64>,
    pub budget_seconds: Option<f64>,
    /// Steps actually executed.
    pub steps: u64,
    pub latent_dim: usize,
    pub data_shape: Vec<usize>,
    pub valid_range: (f32, f32),
    pub corpus_size: usize,
}

/// Aggregate counters of one campaign run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CampaignStats {
    pub explores: u64,
    pub exploits: u64,
    pub accepted: u64,
    pub faults: u64,
    /// Candidates skipped because decode or forward failed; each skip also
    /// carries a diagnostic in the report.
    pub skipped: u64,
    pub retired_seeds: u64,
    pub final_queue_len: usize,
    /// Accepted coordinates folded into the trajectory.
    pub trajectory_points: u64,
}

/// Everything a fuzzing campaign produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub meta: CampaignMeta,
    /// Coverage of the corpus seeds alone (absent in blackbox mode).
    pub init_coverage: Option<CoverageValues>,
    pub final_coverage: Option<CoverageValues>,
    /// Sampled every `batch_size` steps plus a final row (empty in
    /// blackbox mode).
    pub curve: Vec<CurvePoint>,
    pub lambda_history: Vec<LambdaPoint>,
    /// Best-fitness curve (empty in graybox mode).
    pub fitness_curve: Vec<FitnessPoint>,
    pub faults: Vec<FaultRecord>,
    pub diversity: Option<DiversityStats>,
    pub stats: CampaignStats,
    /// Human-readable diagnostics for skipped candidates.
    pub diagnostics: Vec<String>,
}

impl CampaignReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)
            .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CampaignReport> {
        crate::manifest::read_json(path)
    }
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Maps a value in the valid range to a display byte, round half-up.
fn to_byte(v: f32, lo: f32, hi: f32) -> u8 {
    let x = (v as f64 - lo as f64) / (hi as f64 - lo as f64) * 255.0;
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Image layout of a data shape: `(width, height, channels)` for shapes an
/// image export makes sense for.
fn image_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [h, w] => Some((*w, *h, 1)),
        [1, h, w] => Some((*w, *h, 1)),
        [3, h, w] => Some((*w, *h, 3)),
        _ => None,
    }
}

fn encode_image(fault: &FaultRecord, meta: &CampaignMeta) -> Option<(String, Vec<u8>)> {
    let (w, h, c) = image_layout(&meta.data_shape)?;
    if fault.decoded.len() != w * h * c {
        return None;
    }
    let (lo, hi) = meta.valid_range;
    let mut out = Vec::with_capacity(32 + w * h * c);
    let magic = if c == 1 { "P5" } else { "P6" };
    out.extend_from_slice(format!("{magic}\n{w} {h}\n255\n").as_bytes());
    if c == 1 {
        for &v in &fault.decoded {
            out.push(to_byte(v, lo, hi));
        }
    } else {
        // Stored channel-major, written interleaved RGB.
        for i in 0..h * w {
            for ch in 0..3 {
                out.push(to_byte(fault.decoded[ch * h * w + i], lo, hi));
            }
        }
    }
    let ext = if c == 1 { "pgm" } else { "ppm" };
    Some((format!("fault_{:06}.{ext}", fault.id), out))
}

fn csv_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => String::new(),
    }
}

/// Writes `report.json`, `coverage.csv`, `faults.csv`, `lambda.csv` and
/// fault images under `out_dir`. Returns the files written, in a
/// deterministic order.
pub fn export_report(report: &CampaignReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let report_path = out_dir.join("report.json");
    report.save(&report_path)?;
    written.push(report_path);

    let mut coverage = String::from("step,nc,kmnc,nbc,snac,tknc\n");
    for p in &report.curve {
        let v = p.values;
        coverage.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.step, v.nc, v.kmnc, v.nbc, v.snac, v.tknc
        ));
    }
    let coverage_path = out_dir.join("coverage.csv");
    write_file(&coverage_path, coverage.as_bytes())?;
    written.push(coverage_path);

    let mut faults = String::from(
        "id,step,origin,lineage,seed_class,erroneous_class,oracle,fitness\n",
    );
    for f in &report.faults {
        faults.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            f.id,
            f.step,
            f.origin.name(),
            csv_opt(&f.lineage),
            f.seed_class,
            erroneous_class(f)?,
            f.oracle_kind,
            csv_opt(&f.fitness),
        ));
    }
    let faults_path = out_dir.join("faults.csv");
    write_file(&faults_path, faults.as_bytes())?;
    written.push(faults_path);

    let mut lambda = String::from("step,lambda\n");
    for p in &report.lambda_history {
        lambda.push_str(&format!("{},{}\n", p.step, p.lambda));
    }
    let lambda_path = out_dir.join("lambda.csv");
    write_file(&lambda_path, lambda.as_bytes())?;
    written.push(lambda_path);

    if image_layout(&report.meta.data_shape).is_some() && !report.faults.is_empty() {
        let images = out_dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for f in &report.faults {
            if let Some((name, bytes)) = encode_image(f, &report.meta) {
                let path = images.join(name);
                write_file(&path, &bytes)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn read_netpbm(path: &Path, magic: &str) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::format(path, reason);
    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // then a single whitespace byte, then the payload.
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let got = token()?;
    if got != magic {
        return Err(bad(format!("magic '{got}', expected '{magic}'")));
    }
    let w: usize = token()?.parse().map_err(|_| bad("bad width".into()))?;
    let h: usize = token()?.parse().map_err(|_| bad("bad height".into()))?;
    let maxval: usize = token()?.parse().map_err(|_| bad("bad maxval".into()))?;
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval}, only 255 supported")));
    }
    pos += 1; // single whitespace after maxval
    let channels = if magic == "P5" { 1 } else { 3 };
    let need = w * h * channels;
    if bytes.len() < pos || bytes.len() - pos != need {
        return Err(bad(format!(
            "payload is {} bytes, expected {need}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

/// Reads a binary PGM (P5) written by [`export_report`]; returns
/// `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P5")
}

/// Reads a binary PPM (P6); pixels are interleaved RGB.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P6")
}

// ---------------------------------------------------------------------------
// Retraining evaluation
// ---------------------------------------------------------------------------

/// Fraction of `data` the model classifies correctly.
pub fn accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
    }
    let mut hits = 0usize;
    for (x, &label) in data.inputs.iter().zip(&data.labels) {
        let out = forward(model, x)?;
        if out.argmax() == Some(label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Outcome of the retraining evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainOutcome {
    pub acc_before: f64,
    pub acc_after: f64,
    /// Faults actually mixed into the training set.
    pub faults_used: usize,
}

/// Fine-tunes a copy of `model` on `train` plus up to `limit` randomly
/// sampled faults (labeled with their seed class) and reports test accuracy
/// before and after.
#[allow(clippy::too_many_arguments)]
pub fn retrain_eval(
    model: &Model,
    train: &LabeledDataset,
    test: &LabeledDataset,
    faults: &[FaultRecord],
    limit: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng_seed: u64,
) -> Result<RetrainOutcome> {
    let acc_before = accuracy(model, test)?;
    let shape = train
        .input_shape()
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?
        .to_vec();

    let take = limit.min(faults.len());
    let mut picked: Vec<usize> = (0..faults.len()).collect();
    if take < faults.len() {
        // Deterministic sample: shuffle indices, keep a prefix.
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        use rand::seq::SliceRandom;
        picked.shuffle(&mut rng);
        picked.truncate(take);
        picked.sort_unstable();
    }

    let mut inputs = train.inputs.clone();
    let mut labels = train.labels.clone();
    for &i in &picked {
        let f = &faults[i];
        if f.seed_class >= train.class_count {
            return Err(Error::InvalidArgument(format!(
                "fault {} has seed class {} outside the {}-class dataset",
                f.id, f.seed_class, train.class_count
            )));
        }
        inputs.push(Tensor::new(shape.clone(), f.decoded.clone()).map_err(|_| {
            Error::Shape(format!(
                "fault {} decoded input has {} values, training shape {:?} needs {}",
                f.id,
                f.decoded.len(),
                shape,
                shape.iter().product::<usize>()
            ))
        })?);
        labels.push(f.seed_class);
    }
    let combined = LabeledDataset::new(inputs, labels, train.class_count)?;
    let (tuned, _) = train_sgd(model, &combined, lr, epochs, batch_size, rng_seed)?;
    let acc_after = accuracy(&tuned, test)?;
    Ok(RetrainOutcome { acc_before, acc_after, faults_used: take })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::CoverageValues;
    use crate::data::gen_blobs;
    use crate::model::build_mlp;
    use rand::seq::SliceRandom;

    fn fault(id: u64, seed_class: usize, predicted: usize) -> FaultRecord {
        FaultRecord {
            id,
            step: id,
            origin: Provenance::Explore,
            lineage: None,
            seed_class,
            coords: vec![0.0, 0.0],
            decoded: vec![0.25, 0.5, 0.75, 1.0],
            raw: vec![0.25, 0.5, 0.75, 1.25],
            predictions: vec![ModelPrediction { label: predicted, probs: vec![0.3, 0.7] }],
            oracle_kind: "label_consistency".into(),
            fitness: None,
        }
    }

    #[test]
    fn diversity_single_class_is_zero() {
        let faults: Vec<_> = (0..5).map(|i| fault(i, 0, 7)).collect();
        let d = diversity(&faults).unwrap();
        assert_eq!(d.class_count, 1);
        assert_eq!(d.scaled_entropy, 0.0);
    }

    #[test]
    fn diversity_uniform_is_one() {
        let faults: Vec<_> = (0..8).map(|i| fault(i, 0, (i % 4 + 1) as usize)).collect();
        let d = diversity(&faults).unwrap();
        assert_eq!(d.class_count, 4);
        assert!((d.scaled_entropy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_three_one_split() {
        let faults = vec![fault(0, 0, 1), fault(1, 0, 1), fault(2, 0, 1), fault(3, 0, 2)];
        let d = diversity(&faults).unwrap();
        assert_eq!(d.class_count, 2);
        assert!((d.scaled_entropy - 0.8113).abs() < 1e-4, "{}", d.scaled_entropy);
    }

    #[test]
    fn diversity_is_permutation_invariant_and_rejects_empty() {
        let mut faults: Vec<_> = (0..9).map(|i| fault(i, 0, (i % 3) as usize + 1)).collect();
        let base = diversity(&faults).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            faults.shuffle(&mut rng);
            assert_eq!(diversity(&faults).unwrap(), base);
        }
        assert!(diversity(&[]).is_err());
    }

    #[test]
    fn erroneous_class_prefers_disagreeing_prediction() {
        let mut f = fault(0, 3, 3);
        f.predictions = vec![
            ModelPrediction { label: 3, probs: vec![] },
            ModelPrediction { label: 5, probs: vec![] },
        ];
        assert_eq!(erroneous_class(&f).unwrap(), 5);
        // All agree with the seed class (numeric-tolerance fault): falls
        // back to the primary prediction.
        f.predictions = vec![ModelPrediction { label: 3, probs: vec![] }];
        assert_eq!(erroneous_class(&f).unwrap(), 3);
    }

    fn sample_report() -> CampaignReport {
        let v0 = CoverageValues { nc: 0.1, kmnc: 0.01, nbc: 0.0, snac: 0.0, tknc: 0.2 };
        let v1 = CoverageValues { nc: 0.3, kmnc: 0.02, nbc: 0.05, snac: 0.1, tknc: 0.4 };
        CampaignReport {
            meta: CampaignMeta {
                mode: "graybox".into(),
                objective: "nc".into(),
                strategy: "trajectory".into(),
                rng_seed: 7,
                budget_steps: Some(64),
                budget_seconds: None,
                steps: 64,
                latent_dim: 2,
                data_shape: vec![2, 2],
                valid_range: (0.0, 1.0),
                corpus_size: 3,
            },
            init_coverage: Some(v0),
            final_coverage: Some(v1),
            curve: vec![
                CurvePoint { step: 0, values: v0 },
                CurvePoint { step: 32, values: v1 },
                CurvePoint { step: 64, values: v1 },
            ],
            lambda_history: vec![
                LambdaPoint { step: 0, lambda: 0.0 },
                LambdaPoint { step: 9, lambda: 0.0005 },
            ],
            fitness_curve: vec![],
            faults: vec![fault(0, 0, 1), fault(1, 1, 0)],
            diversity: None,
            stats: CampaignStats::default(),
            diagnostics: vec![],
        }
    }

    #[test]
    fn export_is_deterministic_and_headers_are_exact() {
        let report = sample_report();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let files_a = export_report(&report, dir_a.path()).unwrap();
        let files_b = export_report(&report, dir_b.path()).unwrap();
        assert_eq!(files_a.len(), files_b.len());
        for (a, b) in files_a.iter().zip(&files_b) {
            assert_eq!(a.file_name(), b.file_name());
            let ba = std::fs::read(a).unwrap();
            let bb = std::fs::read(b).unwrap();
            assert_eq!(ba, bb, "{a:?} differs between exports");
        }

        let coverage = std::fs::read_to_string(dir_a.path().join("coverage.csv")).unwrap();
        let mut lines = coverage.lines();
        assert_eq!(lines.next(), Some("step,nc,kmnc,nbc,snac,tknc"));
        assert_eq!(lines.next(), Some("0,0.1,0.01,0,0,0.2"));

        let faults = std::fs::read_to_string(dir_a.path().join("faults.csv")).unwrap();
        assert_eq!(faults.lines().count(), 1 + report.faults.len());

        // Round-trip the JSON.
        let loaded = CampaignReport::load(&dir_a.path().join("report.json")).unwrap();
        assert_eq!(loaded, report);
    }

    #[test]
    fn exported_pgm_round_trips_rounded_bytes() {
        let report = sample_report();
        let dir = tempfile::tempdir().unwrap();
        export_report(&report, dir.path()).unwrap();
        let (w, h, px) = read_pgm(&dir.path().join("images/fault_000000.pgm")).unwrap();
        assert_eq!((w, h), (2, 2));
        // decoded = [0.25, 0.5, 0.75, 1.0] in [0,1] -> round half-up of
        // 63.75, 127.5, 191.25, 255.
        assert_eq!(px, vec![64, 128, 191, 255]);
    }

    #[test]
    fn exported_ppm_interleaves_channels() {
        let mut report = sample_report();
        report.meta.data_shape = vec![3, 1, 2];
        report.faults = vec![FaultRecord {
            decoded: vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0],
            raw: vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0],
            ..fault(0, 0, 1)
        }];
        let dir = tempfile::tempdir().unwrap();
        export_report(&report, dir.path()).unwrap();
        let (w, h, px) = read_ppm(&dir.path().join("images/fault_000000.ppm")).unwrap();
        assert_eq!((w, h), (2, 1));
        // Channel-major (R: 0,1; G: 0.5,0.5; B: 1,0) -> interleaved.
        assert_eq!(px, vec![0, 128, 255, 255, 128, 0]);
    }

    #[test]
    fn non_image_shapes_export_no_images() {
        let mut report = sample_report();
        report.meta.data_shape = vec![7];
        let dir = tempfile::tempdir().unwrap();
        let files = export_report(&report, dir.path()).unwrap();
        assert!(files.iter().all(|p| p.extension().map_or(true, |e| e != "pgm" && e != "ppm")));
        assert!(!dir.path().join("images").exists());
    }

    #[test]
    fn blackbox_report_yields_header_only_coverage_csv() {
        let mut report = sample_report();
        report.curve.clear();
        report.init_coverage = None;
        report.final_coverage = None;
        let dir = tempfile::tempdir().unwrap();
        export_report(&report, dir.path()).unwrap();
        let coverage = std::fs::read_to_string(dir.path().join("coverage.csv")).unwrap();
        assert_eq!(coverage, "step,nc,kmnc,nbc,snac,tknc\n");
    }

    #[test]
    fn retrain_noop_keeps_accuracy() {
        let data = gen_blobs(2, &[2, 2], 6, 0.05, 3).unwrap();
        let model = build_mlp(&[2, 2], &[8], 2, false, 1).unwrap();
        let out = retrain_eval(&model, &data, &data, &[], 0, 0, 0.1, 4, 9).unwrap();
        assert_eq!(out.acc_before, out.acc_after);
        assert_eq!(out.faults_used, 0);
    }

    #[test]
    fn retrain_uses_all_faults_when_limit_exceeds_count() {
        let data = gen_blobs(2, &[2, 2], 8, 0.05, 3).unwrap();
        let model = build_mlp(&[2, 2], &[8], 2, false, 1).unwrap();
        let faults: Vec<_> = (0..3).map(|i| fault(i, 0, 1)).collect();
        let out = retrain_eval(&model, &data, &data, &faults, 100, 1, 0.05, 4, 9).unwrap();
        assert_eq!(out.faults_used, 3);
    }

    #[test]
    fn retrain_improves_on_mislabeled_region() {
        // Faults drawn near the class-1 template: retraining on them
        // (correctly labeled) should not collapse accuracy.
        let train = gen_blobs(2, &[2, 2], 20, 0.08, 5).unwrap();
        let test = gen_blobs(2, &[2, 2], 10, 0.08, 6).unwrap();
        let (model, _) = train_sgd(
            &build_mlp(&[2, 2], &[8], 2, false, 2).unwrap(),
            &train,
            0.5,
            40,
            8,
            11,
        )
        .unwrap();
        let template = crate::data::class_template(1, 2, &[2, 2]).unwrap();
        let faults: Vec<_> = (0..4)
            .map(|i| {
                let mut f = fault(i, 1, 0);
                f.decoded = template.data().to_vec();
                f
            })
            .collect();
        let out = retrain_eval(&model, &train, &test, &faults, 4, 3, 0.1, 8, 13).unwrap();
        assert!(out.acc_after >= out.acc_before - 0.1, "{out:?}");
    }
}
