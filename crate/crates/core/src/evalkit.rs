//! Ranking metrics and the experiment runners built on them: the toggle
//! ablation grid, the prompt threshold study and the SNR sweep.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{ModelConfig, Prepared, TtmModel, Variant, VmmaConfig};
use crate::psa::{scale_noise_to_snr, Waveform};
use crate::rng::{stream, tag};
use crate::scenario::{generate_splits, noise_samples, NoiseKind, ScenarioConfig, ScenarioDataset};
use crate::train::{self, TrainConfig, TrainReport};
use crate::vmma::{BetaPolicy, PromptMode};

/// How frames are pooled before computing average precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One ranking over every frame of the split.
    #[default]
    Global,
    /// AP per sequence, averaged over sequences that contain a positive.
    PerSequence,
}

/// Mean over positives of precision at the positive's rank. Ranking is a
/// stable sort by descending score, so tied items keep their input order.
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len().min(labels.len())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1.0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Fraction of frames where `score ≥ threshold` agrees with the label.
pub fn top1_accuracy(scores: &[f64], labels: &[f64], threshold: f64) -> f64 {
    let n = scores.len().min(labels.len());
    if n == 0 {
        return 0.0;
    }
    let hit = (0..n).filter(|&i| (scores[i] >= threshold) == (labels[i] == 1.0)).count();
    hit as f64 / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Absent when no group contains a positive.
    pub map: Option<f64>,
    pub acc: f64,
    pub frames: usize,
}

impl Metrics {
    pub fn map_or(&self, default: f64) -> f64 {
        self.map.unwrap_or(default)
    }
}

pub fn metrics(scores: &[Vec<f64>], labels: &[&[f64]], grouping: Grouping, threshold: f64) -> Result<Metrics> {
    if scores.len() != labels.len() {
        return Err(CoreError::Dim(format!("{} score rows vs {} label rows", scores.len(), labels.len())));
    }
    let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
    let flat_y: Vec<f64> = labels.iter().flat_map(|l| l.iter()).copied().collect();
    if flat_s.len() != flat_y.len() {
        return Err(CoreError::Dim(format!("{} scores vs {} labels", flat_s.len(), flat_y.len())));
    }
    let map = match grouping {
        Grouping::Global => average_precision(&flat_s, &flat_y),
        Grouping::PerSequence => {
            let aps: Vec<f64> = scores
                .iter()
                .zip(labels)
                .filter_map(|(s, y)| average_precision(s, y))
                .collect();
            (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
        }
    };
    Ok(Metrics {
        map,
        acc: top1_accuracy(&flat_s, &flat_y, threshold),
        frames: flat_s.len(),
    })
}

// ---- experiments ----------------------------------------------------------

/// Everything needed to generate data for, train and score one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grouping: Grouping,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.model.validate()?;
        self.model.check_scenario(&self.scenario)?;
        self.train.validate()
    }
}

/// The three splits generated for one seed.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub seed: u64,
    pub train: ScenarioDataset,
    pub val: ScenarioDataset,
    pub test: ScenarioDataset,
}

pub fn seed_data(scenario: &ScenarioConfig, seed: u64) -> Result<SeedData> {
    let mut sc = scenario.clone();
    sc.seed = seed;
    let [train, val, test] = generate_splits(&sc)?;
    Ok(SeedData { seed, train, val, test })
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: TtmModel,
    pub report: TrainReport,
    pub test: Metrics,
}

/// Trains `variant` on `data` and scores it on the clean test split.
pub fn train_variant(exp: &Experiment, data: &SeedData, variant: Variant, vmma: Option<&VmmaConfig>) -> Result<Trained> {
    let mut cfg = exp.model.clone();
    if let Some(v) = vmma {
        cfg.vmma = v.clone();
    }
    let mut model = TtmModel::new(cfg, variant, &data.train, data.seed)?;
    let train_set = model.prepare(&data.train)?;
    let val_set = model.prepare(&data.val)?;
    let report = train::fit(&mut model, &train_set, &val_set, &exp.train, data.seed, exp.grouping, |_| {})?;
    let test_set = model.prepare(&data.test)?;
    let test = train::evaluate(&model, &test_set, exp.grouping)?;
    Ok(Trained { model, report, test })
}

/// Per-seed results for one configuration plus their summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResults {
    pub seeds: Vec<u64>,
    /// Error text for seeds whose run failed.
    pub runs: Vec<std::result::Result<Metrics, String>>,
}

impl SeedResults {
    fn ok(&self) -> impl Iterator<Item = &Metrics> {
        self.runs.iter().filter_map(|r| r.as_ref().ok())
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.is_err()).count()
    }

    fn stat(&self, f: impl Fn(&Metrics) -> Option<f64>) -> Option<(f64, f64, f64)> {
        let v: Vec<f64> = self.ok().filter_map(f).collect();
        if v.is_empty() {
            return None;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((mean, lo, hi))
    }

    /// Mean, min and max mAP over successful seeds.
    pub fn map(&self) -> Option<(f64, f64, f64)> {
        self.stat(|m| m.map)
    }

    pub fn acc(&self) -> Option<(f64, f64, f64)> {
        self.stat(|m| Some(m.acc))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub results: SeedResults,
}

/// Seeds and toggle rows of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub rows: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl AblationSpec {
    pub fn full_grid(seeds: Vec<u64>) -> Self {
        Self {
            rows: Variant::grid(),
            seeds,
        }
    }
}

/// Generates each seed's data once.
pub fn seed_cache(scenario: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<SeedData>> {
    if seeds.is_empty() {
        return Err(CoreError::Config("at least one seed is required".into()));
    }
    seeds.iter().map(|&s| seed_data(scenario, s)).collect()
}

fn run_grid<K: Sync>(
    data: &[SeedData],
    keys: &[K],
    job: impl Fn(&K, &SeedData) -> Result<Metrics> + Sync,
) -> Vec<SeedResults> {
    let jobs: Vec<(usize, usize)> = (0..keys.len()).flat_map(|k| (0..data.len()).map(move |d| (k, d))).collect();
    let out: Vec<std::result::Result<Metrics, String>> = jobs
        .par_iter()
        .map(|&(k, d)| job(&keys[k], &data[d]).map_err(|e| e.to_string()))
        .collect();
    (0..keys.len())
        .map(|k| SeedResults {
            seeds: data.iter().map(|d| d.seed).collect(),
            runs: out[k * data.len()..(k + 1) * data.len()].to_vec(),
        })
        .collect()
}

/// Trains and scores every row on every seed; failed runs are recorded and
/// the rest continue.
pub fn run_ablation(exp: &Experiment, spec: &AblationSpec, data: &[SeedData]) -> Result<Vec<AblationRow>> {
    exp.validate()?;
    check_seeds(&spec.seeds, data)?;
    let results = run_grid(data, &spec.rows, |v, d| Ok(train_variant(exp, d, *v, None)?.test));
    Ok(spec
        .rows
        .iter()
        .zip(results)
        .map(|(&variant, results)| AblationRow { variant, results })
        .collect())
}

fn check_seeds(seeds: &[u64], data: &[SeedData]) -> Result<()> {
    if seeds.is_empty() {
        return Err(CoreError::Config("at least one seed is required".into()));
    }
    let have: Vec<u64> = data.iter().map(|d| d.seed).collect();
    if have != seeds {
        return Err(CoreError::Config(format!("seed data {have:?} does not match seeds {seeds:?}")));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn fmt_stat(v: Option<(f64, f64, f64)>) -> [String; 3] {
    match v {
        Some((m, lo, hi)) => [format!("{m:.6}"), format!("{lo:.6}"), format!("{hi:.6}")],
        None => [String::new(), String::new(), String::new()],
    }
}

fn per_seed_cells(r: &SeedResults, f: impl Fn(&Metrics) -> Option<f64>) -> String {
    r.runs
        .iter()
        .map(|x| match x {
            Ok(m) => fmt_opt(f(m)),
            Err(_) => "failed".into(),
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub const ABLATION_HEADER: &str =
    "vstr,psa,vmma,acc_mean,acc_min,acc_max,map_mean,map_min,map_max,acc_per_seed,map_per_seed,failures";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let [am, alo, ahi] = fmt_stat(r.results.acc());
        let [mm, mlo, mhi] = fmt_stat(r.results.map());
        let on = |b: bool| if b { "on" } else { "off" };
        let _ = writeln!(
            out,
            "{},{},{},{am},{alo},{ahi},{mm},{mlo},{mhi},{},{},{}",
            on(r.variant.vstr),
            on(r.variant.psa),
            on(r.variant.vmma),
            per_seed_cells(&r.results, |m| Some(m.acc)),
            per_seed_cells(&r.results, |m| m.map),
            r.results.failures()
        );
    }
    out
}

// ---- prompt threshold study ---------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub label: String,
    pub vmma: VmmaConfig,
    pub results: SeedResults,
}

/// Fine prompt, coarse prompt with the adaptive threshold, and coarse
/// prompts with fixed thresholds of 20%, 50% and 70%.
pub fn threshold_settings(k: f64) -> Vec<(String, VmmaConfig)> {
    let mut v = vec![
        (
            "fine".to_string(),
            VmmaConfig {
                mode: PromptMode::Fine,
                beta: BetaPolicy::Adaptive { k },
            },
        ),
        (
            "coarse_adaptive".to_string(),
            VmmaConfig {
                mode: PromptMode::Coarse,
                beta: BetaPolicy::Adaptive { k },
            },
        ),
    ];
    for beta in [0.2, 0.5, 0.7] {
        v.push((
            format!("coarse_fixed_{}", (beta * 100.0f64).round() as u32),
            VmmaConfig {
                mode: PromptMode::Coarse,
                beta: BetaPolicy::Fixed { beta },
            },
        ));
    }
    v
}

pub fn run_threshold_study(exp: &Experiment, seeds: &[u64], data: &[SeedData], k: f64) -> Result<Vec<ThresholdRow>> {
    exp.validate()?;
    check_seeds(seeds, data)?;
    let settings = threshold_settings(k);
    let results = run_grid(data, &settings, |(_, v), d| Ok(train_variant(exp, d, Variant::FULL, Some(v))?.test));
    Ok(settings
        .into_iter()
        .zip(results)
        .map(|((label, vmma), results)| ThresholdRow { label, vmma, results })
        .collect())
}

pub const THRESHOLD_HEADER: &str = "prompt,beta,acc_mean,acc_min,acc_max,map_mean,map_min,map_max,failures";

pub fn threshold_csv(rows: &[ThresholdRow]) -> String {
    let mut out = String::from(THRESHOLD_HEADER);
    out.push('\n');
    for r in rows {
        let beta = match r.vmma.beta {
            BetaPolicy::Adaptive { k } => format!("adaptive(k={k})"),
            BetaPolicy::Fixed { beta } => format!("{beta}"),
        };
        let [am, alo, ahi] = fmt_stat(r.results.acc());
        let [mm, mlo, mhi] = fmt_stat(r.results.map());
        let _ = writeln!(
            out,
            "{},{beta},{am},{alo},{ahi},{mm},{mlo},{mhi},{}",
            r.label,
            r.results.failures()
        );
    }
    out
}

// ---- SNR sweep -----------------------------------------------------------

/// Fixed per-sequence noise for sweeps, independent of the model.
pub fn sweep_noise(data: &SeedData, kind: NoiseKind) -> Vec<Waveform> {
    data.test
        .sequences
        .iter()
        .map(|s| {
            let mut rng = stream(data.seed, &[tag("sweep"), s.id as u64]);
            let n = noise_samples(kind, s.audio.len(), s.sample_rate, 0.1, &mut rng);
            Waveform {
                samples: n,
                sample_rate: s.sample_rate,
            }
        })
        .collect()
}

/// Test-split metrics with noise added at each SNR; `None` in `grid`
/// means clean audio.
pub fn snr_curve(model: &TtmModel, test: &[Prepared], noise: &[Waveform], grid: &[Option<f64>], grouping: Grouping) -> Result<Vec<Metrics>> {
    if test.len() != noise.len() {
        return Err(CoreError::Dim(format!("{} sequences vs {} noise tracks", test.len(), noise.len())));
    }
    let fe = model.front_end()?;
    grid.iter()
        .map(|snr| {
            let scores = test
                .par_iter()
                .zip(noise)
                .map(|(s, n)| match snr {
                    None => model.predict(s, None),
                    Some(db) => {
                        let noisy = scale_noise_to_snr(&s.clean, n, *db)?;
                        let mel = model.mel_of(&fe, &noisy)?;
                        model.predict(s, Some(&mel))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<&[f64]> = test.iter().map(|s| s.labels.as_slice()).collect();
            metrics(&scores, &labels, grouping, 0.5)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub snr_db: Option<f64>,
    pub variant: String,
    pub results: SeedResults,
}

/// Default grid: −10 to 10 dB in 5 dB steps, then clean.
pub fn default_snr_grid() -> Vec<Option<f64>> {
    let mut g: Vec<Option<f64>> = (-2..=2).map(|i| Some(5.0 * i as f64)).collect();
    g.push(None);
    g
}

/// PSA-trained against non-PSA models at every grid point.
pub fn run_snr_sweep(exp: &Experiment, seeds: &[u64], data: &[SeedData], grid: &[Option<f64>], kind: NoiseKind) -> Result<Vec<SweepPoint>> {
    exp.validate()?;
    check_seeds(seeds, data)?;
    if grid.is_empty() {
        return Err(CoreError::Config("SNR grid is empty".into()));
    }
    let variants = [("psa", Variant::FULL), ("no_psa", Variant { psa: false, ..Variant::FULL })];
    let curves = run_curves(exp, data, &variants, grid, kind);
    let mut out = Vec::new();
    for (gi, &snr) in grid.iter().enumerate() {
        for (vi, (name, _)) in variants.iter().enumerate() {
            out.push(SweepPoint {
                snr_db: snr,
                variant: name.to_string(),
                results: SeedResults {
                    seeds: seeds.to_vec(),
                    runs: curves[vi]
                        .iter()
                        .map(|c| c.as_ref().map(|v| v[gi].clone()).map_err(|e| e.clone()))
                        .collect(),
                },
            });
        }
    }
    Ok(out)
}

type Curve = std::result::Result<Vec<Metrics>, String>;

fn run_curves(exp: &Experiment, data: &[SeedData], variants: &[(&str, Variant)], grid: &[Option<f64>], kind: NoiseKind) -> Vec<Vec<Curve>> {
    let jobs: Vec<(usize, usize)> = (0..variants.len()).flat_map(|v| (0..data.len()).map(move |d| (v, d))).collect();
    let flat: Vec<Curve> = jobs
        .par_iter()
        .map(|&(v, d)| {
            let run = || -> Result<Vec<Metrics>> {
                let t = train_variant(exp, &data[d], variants[v].1, None)?;
                let test = t.model.prepare(&data[d].test)?;
                snr_curve(&t.model, &test, &sweep_noise(&data[d], kind), grid, exp.grouping)
            };
            run().map_err(|e| e.to_string())
        })
        .collect();
    flat.chunks(data.len()).map(|c| c.to_vec()).collect()
}

pub const SNR_HEADER: &str = "snr_db,variant,acc_mean,map_mean,map_min,map_max,map_per_seed,failures";

pub fn snr_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from(SNR_HEADER);
    out.push('\n');
    for p in points {
        let snr = p.snr_db.map_or_else(|| "clean".to_string(), |d| format!("{d}"));
        let [am, _, _] = fmt_stat(p.results.acc());
        let [mm, mlo, mhi] = fmt_stat(p.results.map());
        let _ = writeln!(
            out,
            "{snr},{},{am},{mm},{mlo},{mhi},{},{}",
            p.variant,
            per_seed_cells(&p.results, |m| m.map),
            p.results.failures()
        );
    }
    out
}

/// `sequence_id,frame,score,label,truth` rows; `label` is the thresholded
/// score.
pub fn predictions_csv(ids: &[u32], scores: &[Vec<f64>], truth: &[&[f64]], threshold: f64) -> String {
    let mut out = String::from("sequence_id,frame,score,label,truth\n");
    for ((id, s), y) in ids.iter().zip(scores).zip(truth) {
        for (t, (p, l)) in s.iter().zip(y.iter()).enumerate() {
            let _ = writeln!(out, "{id},{t},{p:.9},{},{}", (*p >= threshold) as u8, *l as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1.0, 1.0, 0.0]), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1.0, 0.0, 1.0]).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision(&[0.3, 0.2], &[0.0, 0.0]), None);
    }

    #[test]
    fn ties_keep_input_order() {
        // positive listed second among equal scores ranks second
        let ap = average_precision(&[0.5, 0.5], &[0.0, 1.0]).unwrap();
        assert_eq!(ap, 0.5);
        let ap = average_precision(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(top1_accuracy(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 0.5), 1.0);
        assert_eq!(top1_accuracy(&[0.5; 4], &[1.0, 1.0, 0.0, 0.0], 0.5), 0.5);
    }

    #[test]
    fn grouping_modes() {
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2]];
        let l1 = [1.0, 0.0];
        let l2 = [0.0, 1.0];
        let labels: Vec<&[f64]> = vec![&l1, &l2];
        let per = metrics(&scores, &labels, Grouping::PerSequence, 0.5).unwrap();
        assert_eq!(per.map, Some(0.75));
        let global = metrics(&scores, &labels, Grouping::Global, 0.5).unwrap();
        // ranking 0.9(+) 0.8(−) 0.2(+) 0.1(−)
        assert!((global.map.unwrap() - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(global.acc, 0.5);
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(default_snr_grid(), vec![Some(-10.0), Some(-5.0), Some(0.0), Some(5.0), Some(10.0), None]);
        let names: Vec<String> = threshold_settings(0.0).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["fine", "coarse_adaptive", "coarse_fixed_20", "coarse_fixed_50", "coarse_fixed_70"]);
        assert_eq!(Variant::grid().len(), 8);
    }
}
