//! Change-detection metrics, a small early-fusion CD network, a procedural
//! "real" benchmark, and the zero-shot / few-shot transfer protocol.

use std::collections::HashSet;
use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::change::{
    derive_change_mask, generate_toy_semantic_mask, simulate_event, ChangeError, ChangeMask,
    EventParams, Palette, ToyMaskParams,
};
use crate::denoiser::{make_toy_scene, DenoiserError, ToySceneSpec, TrainingLog};
use crate::generator::{event_kind_for, sample_seed, SamplePair};
use crate::grid::{GridError, LatentGrid};
use crate::nn::{
    adamw_update, weighted_softmax_cross_entropy, ConvNet, ConvNetConfig, NnError, OptimizerConfig,
    ParamStore, Tape,
};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction is {pred_w}x{pred_h} but ground truth is {gt_w}x{gt_h}")]
    DimensionMismatch {
        pred_w: usize,
        pred_h: usize,
        gt_w: usize,
        gt_h: usize,
    },
    #[error("training needs at least one pair")]
    EmptyStream,
    #[error("ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error("test split shares ids with training data: {0}")]
    OverlappingSplits(String),
    #[error("real benchmark sample {index}: no usable mask after {attempts} draws")]
    NoUsableMask { index: usize, attempts: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Change(#[from] ChangeError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// Pixel tallies with "change" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

pub fn accumulate_confusion(
    pred: &ChangeMask,
    gt: &ChangeMask,
    counts: &mut ConfusionCounts,
) -> Result<(), EvalError> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(EvalError::DimensionMismatch {
            pred_w: pred.width(),
            pred_h: pred.height(),
            gt_w: gt.width(),
            gt_h: gt.height(),
        });
    }
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p, g) {
            (1, 1) => counts.tp += 1,
            (1, _) => counts.fp += 1,
            (_, 1) => counts.fn_ += 1,
            _ => counts.tn += 1,
        }
    }
    Ok(())
}

/// Metrics on the change class. `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Precision `tp/(tp+fp)`, recall `tp/(tp+fn)`, F1 `2tp/(2tp+fp+fn)` and
/// IoU `tp/(tp+fp+fn)`.
pub fn compute_metrics(c: &ConfusionCounts) -> MetricsReport {
    MetricsReport {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        tn: c.tn,
    }
}

/// Early-fusion change detector: the two images are stacked along the
/// channel axis and mapped to per-pixel logits for {non-change, change}.
#[derive(Debug, Clone)]
pub struct CdModel {
    image_channels: usize,
    net: ConvNet,
    store: ParamStore,
}

impl CdModel {
    pub fn new(image_channels: usize, hidden_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let config = ConvNetConfig {
            in_channels: 2 * image_channels,
            hidden_channels,
            out_channels: 2,
            depth: 3,
            kernel: 3,
            time_embed_dim: None,
            zero_init_output: false,
        };
        let net = ConvNet::new(config, &mut store, "cd.", &mut rng);
        Self {
            image_channels,
            net,
            store,
        }
    }

    pub fn image_channels(&self) -> usize {
        self.image_channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(
        &self,
        x1: &LatentGrid,
        x2: &LatentGrid,
        tape: &mut Tape,
    ) -> Result<LatentGrid, EvalError> {
        let input = x1.concat_channels(x2)?;
        Ok(self.net.forward(&self.store, &input, None, tape)?)
    }

    pub fn logits(&self, x1: &LatentGrid, x2: &LatentGrid) -> Result<LatentGrid, EvalError> {
        self.forward(x1, x2, &mut Tape::new())
    }

    /// Argmax over the two logits; ties go to non-change.
    pub fn predict(&self, x1: &LatentGrid, x2: &LatentGrid) -> Result<ChangeMask, EvalError> {
        let logits = self.logits(x1, x2)?;
        let values = logits
            .plane(0)
            .iter()
            .zip(logits.plane(1))
            .map(|(n, c)| u8::from(c > n))
            .collect();
        Ok(ChangeMask::new(logits.width(), logits.height(), values)?)
    }

    /// Adds the weighted cross-entropy gradient for one pair and returns
    /// the loss.
    pub fn accumulate_loss_grad(
        &mut self,
        x1: &LatentGrid,
        x2: &LatentGrid,
        gt: &ChangeMask,
        class_weights: &[f64; 2],
    ) -> Result<f64, EvalError> {
        let mut tape = Tape::new();
        let logits = self.forward(x1, x2, &mut tape)?;
        let (loss, grad) = weighted_softmax_cross_entropy(&logits, gt.values(), class_weights)?;
        self.net.backward(&mut self.store, &tape, &grad)?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Cross-entropy weight of the change class; non-change has weight 1.
    pub change_weight: f64,
}

/// Each step draws `batch_size` pairs uniformly with replacement and takes
/// one AdamW step on the mean loss.
pub fn train_cd_model<R: Rng + ?Sized>(
    model: &mut CdModel,
    pairs: &[&SamplePair],
    cfg: &CdTrainConfig,
    rng: &mut R,
) -> Result<TrainingLog, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyStream);
    }
    cfg.optimizer.validate()?;
    let weights = [1.0, cfg.change_weight];
    let batch = cfg.batch_size.max(1);
    let mut log = TrainingLog::default();
    for _ in 0..cfg.steps {
        model.store.zero_grad();
        let mut total = 0.0;
        for _ in 0..batch {
            let p = pairs[rng.random_range(0..pairs.len())];
            total += model.accumulate_loss_grad(&p.x_t1, &p.x_t2, &p.change, &weights)?;
        }
        model.store.scale_grads(1.0 / batch as f64);
        adamw_update(&mut model.store, &cfg.optimizer)?;
        log.losses.push(total / batch as f64);
    }
    Ok(log)
}

/// Pooled confusion over all pairs, evaluated in parallel.
pub fn evaluate(model: &CdModel, pairs: &[&SamplePair]) -> Result<ConfusionCounts, EvalError> {
    pairs
        .par_iter()
        .map(|p| {
            let mut c = ConfusionCounts::default();
            accumulate_confusion(&model.predict(&p.x_t1, &p.x_t2)?, &p.change, &mut c)?;
            Ok(c)
        })
        .try_reduce(ConfusionCounts::default, |a, b| Ok(a.merge(b)))
}

/// Procedural stand-in for a real bi-temporal benchmark: both dates are
/// independent renders of the class-Gaussian scene model, and the second
/// date's class means are shifted to mimic seasonal appearance change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealToyConfig {
    pub masks: ToyMaskParams,
    pub scene: ToySceneSpec,
    /// Added to every class mean at the second date, per channel.
    pub seasonal_shift: Vec<f64>,
    pub events: EventParams,
    pub max_mask_draws: usize,
}

impl RealToyConfig {
    pub fn new(size: usize, num_classes: usize) -> Self {
        Self {
            masks: ToyMaskParams::new(size, num_classes),
            scene: ToySceneSpec::from_palette(&Palette::land_cover(num_classes), 0.15),
            seasonal_shift: vec![0.05, 0.1, -0.05],
            events: EventParams::default(),
            max_mask_draws: 16,
        }
    }
}

pub fn make_real_toy_pair(
    index: usize,
    base_seed: u64,
    cfg: &RealToyConfig,
) -> Result<SamplePair, EvalError> {
    let seed = sample_seed(base_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if cfg.seasonal_shift.len() != cfg.scene.channels() {
        return Err(EvalError::InvalidProtocol(
            "seasonal shift needs one value per channel".into(),
        ));
    }
    let mut later = cfg.scene.clone();
    for m in &mut later.means {
        for (v, d) in m.iter_mut().zip(&cfg.seasonal_shift) {
            *v += d;
        }
    }
    let kind = event_kind_for(index);
    let attempts = cfg.max_mask_draws.max(1);
    for _ in 0..attempts {
        let y1 = generate_toy_semantic_mask(rng.random(), &cfg.masks);
        let Ok((y2, event)) = simulate_event(kind, &y1, rng.random(), &cfg.events) else {
            continue;
        };
        let x_t1 = make_toy_scene(&cfg.scene, &y1, &mut rng)?;
        let x_t2 = make_toy_scene(&later, &y2, &mut rng)?;
        let change = derive_change_mask(&y1, &y2)?;
        return Ok(SamplePair {
            id: format!("real-{index:06}"),
            index,
            seed,
            x_t1,
            x_t2,
            y1,
            y2,
            change,
            event: Some(event),
            metadata: None,
        });
    }
    Err(EvalError::NoUsableMask { index, attempts })
}

pub fn real_toy_dataset(
    count: usize,
    base_seed: u64,
    cfg: &RealToyConfig,
) -> Result<Vec<SamplePair>, EvalError> {
    (0..count)
        .into_par_iter()
        .map(|i| make_real_toy_pair(i, base_seed, cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    OnlySup,
    PretrainFinetune,
    ZeroShot,
}

impl Arm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::OnlySup => "only_sup",
            Arm::PretrainFinetune => "pretrain_finetune",
            Arm::ZeroShot => "zero_shot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Fraction of the real benchmark held out for testing.
    pub test_fraction: f64,
    pub hidden_channels: usize,
    pub pretrain: CdTrainConfig,
    pub finetune: CdTrainConfig,
}

/// Metrics of one (arm, ratio, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: Arm,
    pub ratio: f64,
    pub seed: u64,
    pub train_pairs: usize,
    pub counts: ConfusionCounts,
    pub metrics: MetricsReport,
}

/// Mean and population standard deviation over the runs where the metric
/// is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let xs: Vec<f64> = values.into_iter().flatten().collect();
        if xs.is_empty() {
            return Self {
                mean: None,
                std: None,
                defined: 0,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean: Some(mean),
            std: Some(var.sqrt()),
            defined: xs.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: Arm,
    pub ratio: f64,
    pub runs: usize,
    pub f1: Summary,
    pub precision: Summary,
    pub recall: Summary,
    pub iou: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunResult>,
}

const COLUMNS: [&str; 11] = [
    "arm",
    "ratio",
    "runs",
    "f1_mean",
    "f1_std",
    "precision_mean",
    "precision_std",
    "recall_mean",
    "recall_std",
    "iou_mean",
    "iou_std",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl ReportRow {
    fn cells(&self) -> Vec<String> {
        let mut cells = vec![
            self.arm.as_str().to_string(),
            format!("{:.6}", self.ratio),
            self.runs.to_string(),
        ];
        for s in [self.f1, self.precision, self.recall, self.iou] {
            cells.push(fmt_opt(s.mean));
            cells.push(fmt_opt(s.std));
        }
        cells
    }
}

impl TransferReport {
    pub fn row(&self, arm: Arm, ratio: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.arm == arm && r.ratio == ratio)
    }

    /// One header line then one line per row; undefined values are `-`.
    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.cells().join(","));
            out.push('\n');
        }
        out
    }

    /// Same content as [`Self::to_csv`], padded into aligned columns.
    pub fn to_table(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![COLUMNS.iter().map(|s| s.to_string()).collect()];
        grid.extend(self.rows.iter().map(ReportRow::cells));
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &grid {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, w))| {
                    if i == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

fn check_disjoint(test: &[&SamplePair], train: &[&SamplePair]) -> Result<(), EvalError> {
    let test_ids: HashSet<&str> = test.iter().map(|p| p.id.as_str()).collect();
    if let Some(p) = train.iter().find(|p| test_ids.contains(p.id.as_str())) {
        return Err(EvalError::OverlappingSplits(p.id.clone()));
    }
    Ok(())
}

/// Runs the transfer protocol. Per seed the real benchmark is shuffled and
/// split into a test part and a training pool; each ratio takes the first
/// `ceil(ratio·pool)` pool pairs as fine-tuning data. One model per seed is
/// pretrained on the synthetic pairs and reused across ratios; every arm of
/// a seed starts from the same initial weights.
pub fn transfer_experiment(
    synthetic: &[SamplePair],
    real: &[SamplePair],
    cfg: &TransferConfig,
) -> Result<TransferReport, EvalError> {
    if let Some(&r) = cfg.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(EvalError::InvalidRatio(r));
    }
    if cfg.ratios.is_empty() || cfg.seeds.is_empty() {
        return Err(EvalError::InvalidProtocol(
            "need at least one ratio and one seed".into(),
        ));
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(EvalError::InvalidProtocol(format!(
            "test fraction {} outside (0, 1)",
            cfg.test_fraction
        )));
    }
    if synthetic.is_empty() {
        return Err(EvalError::EmptyStream);
    }
    let n_test = ((real.len() as f64) * cfg.test_fraction).round() as usize;
    if n_test == 0 || n_test >= real.len() {
        return Err(EvalError::InvalidProtocol(format!(
            "cannot split {} real pairs with test fraction {}",
            real.len(),
            cfg.test_fraction
        )));
    }
    let channels = real[0].x_t1.channels();
    let synthetic_refs: Vec<&SamplePair> = synthetic.iter().collect();

    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<&SamplePair> = real.iter().collect();
        order.shuffle(&mut rng);
        let (test, pool) = order.split_at(n_test);
        check_disjoint(test, &synthetic_refs)?;
        check_disjoint(test, pool)?;

        let init_seed = rng.random();
        let fresh = CdModel::new(channels, cfg.hidden_channels, init_seed);
        let mut pretrained = fresh.clone();
        let log = train_cd_model(&mut pretrained, &synthetic_refs, &cfg.pretrain, &mut rng)?;
        info!(
            "seed {seed}: pretrained on {} synthetic pairs, final loss {:.4}",
            synthetic.len(),
            log.losses.last().copied().unwrap_or(f64::NAN)
        );
        let zero_shot = evaluate(&pretrained, test)?;

        for &ratio in &cfg.ratios {
            let k = ((ratio * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
            let subset = &pool[..k];
            check_disjoint(test, subset)?;
            let ft_seed: u64 = rng.random();

            let mut only_sup = fresh.clone();
            train_cd_model(
                &mut only_sup,
                subset,
                &cfg.finetune,
                &mut ChaCha8Rng::seed_from_u64(ft_seed),
            )?;
            let mut tuned = pretrained.clone();
            train_cd_model(
                &mut tuned,
                subset,
                &cfg.finetune,
                &mut ChaCha8Rng::seed_from_u64(ft_seed),
            )?;

            for (arm, counts, n) in [
                (Arm::OnlySup, evaluate(&only_sup, test)?, k),
                (Arm::PretrainFinetune, evaluate(&tuned, test)?, k),
                (Arm::ZeroShot, zero_shot, 0),
            ] {
                runs.push(RunResult {
                    arm,
                    ratio,
                    seed,
                    train_pairs: n,
                    counts,
                    metrics: compute_metrics(&counts),
                });
            }
        }
    }

    let mut rows = Vec::new();
    for arm in [Arm::OnlySup, Arm::PretrainFinetune, Arm::ZeroShot] {
        for &ratio in &cfg.ratios {
            let sel: Vec<&RunResult> = runs
                .iter()
                .filter(|r| r.arm == arm && r.ratio == ratio)
                .collect();
            rows.push(ReportRow {
                arm,
                ratio,
                runs: sel.len(),
                f1: Summary::of(sel.iter().map(|r| r.metrics.f1)),
                precision: Summary::of(sel.iter().map(|r| r.metrics.precision)),
                recall: Summary::of(sel.iter().map(|r| r.metrics.recall)),
                iou: Summary::of(sel.iter().map(|r| r.metrics.iou)),
            });
        }
    }
    Ok(TransferReport { rows, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_hand_example() {
        let m = compute_metrics(&ConfusionCounts::new(50, 25, 25, 900));
        assert_eq!(m.precision, Some(2.0 / 3.0));
        assert_eq!(m.recall, Some(2.0 / 3.0));
        assert_eq!(m.f1, Some(2.0 / 3.0));
        assert_eq!(m.iou, Some(0.5));
        assert_eq!(m.tn, 900);
    }

    #[test]
    fn empty_positive_class_is_undefined() {
        let m = compute_metrics(&ConfusionCounts::new(0, 0, 0, 17));
        assert_eq!(
            (m.precision, m.recall, m.f1, m.iou),
            (None, None, None, None)
        );
        assert_eq!(m.tn, 17);
    }

    #[test]
    fn confusion_extremes() {
        let all = ChangeMask::new(3, 2, vec![1; 6]).unwrap();
        let none = ChangeMask::zeros(3, 2);
        let mut c = ConfusionCounts::default();
        accumulate_confusion(&all, &all, &mut c).unwrap();
        assert_eq!(c, ConfusionCounts::new(6, 0, 0, 0));
        let mut c = ConfusionCounts::default();
        accumulate_confusion(&none, &all, &mut c).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(accumulate_confusion(&none, &ChangeMask::zeros(2, 3), &mut c).is_err());
    }

    #[test]
    fn summary_ignores_undefined() {
        let s = Summary::of([Some(0.2), None, Some(0.4)]);
        assert_eq!(s.defined, 2);
        assert!((s.mean.unwrap() - 0.3).abs() < 1e-15);
        assert!((s.std.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(Summary::of([None]).mean, None);
    }
}
