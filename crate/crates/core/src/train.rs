//! Training orchestration: source pretraining, then adaptation with RegDA,
//! the disparity-discrepancy minimax baseline, or the max-`L_F` ablation.
//!
//! Every adaptation step builds one graph. Parameter scoping comes from how
//! each network is bound ([`Binding::Frozen`] keeps a copy out of the
//! gradient), from `detach` on features, and from `reverse_grad` where a
//! player ascends. After one backward pass each group (`ψ`, `f`, `f'`) takes
//! its own optimizer step; groups no objective reached are left alone.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{make_dataset, AreaRange, BatchStream, Dataset, DatasetSpec, ShapeKind, Style};
use crate::error::{Error, Result};
use crate::eval::{diagnostics, Diagnostics, DEFAULT_ALPHA, MAE_UNIT};
use crate::heatmap::{decode_batch, gaussian_heatmap, AreaMask, KeypointSet};
use crate::losses::{disparity_discrepancy, loss_mse, DisparityKind, KlLoss, LossValue, LOG_EPS};
use crate::model::{Binding, Model, ModelConfig, Network};
use crate::optim::{LrSchedule, OptimState, Optimizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Heatmap L2 on source for both phases; target images unused.
    SourceOnlyL2,
    /// KL to the ground-truth distribution on source for both phases.
    SourceOnlyKl,
    /// Disparity-discrepancy minimax with `L_T` as the disparity.
    Dd,
    /// `f'` minimizes `L_F` on target while `ψ` maximizes it.
    MinimaxLf,
    /// Two opposite minimizations.
    Regda,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::SourceOnlyL2,
        Method::SourceOnlyKl,
        Method::Dd,
        Method::MinimaxLf,
        Method::Regda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnlyL2 => "source_only_l2",
            Method::SourceOnlyKl => "source_only_kl",
            Method::Dd => "dd",
            Method::MinimaxLf => "minimax_lf",
            Method::Regda => "regda",
        }
    }

    pub fn adapts(self) -> bool {
        !matches!(self, Method::SourceOnlyL2 | Method::SourceOnlyKl)
    }

    /// Methods with the same pretraining can share one phase-1 run.
    fn pretrains_with_l2(self) -> bool {
        self == Method::SourceOnlyL2
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What `f'` is fitted to on source samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialTarget {
    /// `f`'s decoded prediction, detached.
    Prediction,
    /// The source label.
    Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: u64,
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    /// Learning-rate factor of both heads relative to `ψ`.
    pub head_lr_mult: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            optimizer: Optimizer::adam(),
            schedule: LrSchedule::Milestones {
                lr0: 1e-3,
                milestones: vec![1000, 1300],
                gamma: 0.1,
            },
            head_lr_mult: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub iterations: u64,
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    pub head_lr_mult: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            optimizer: Optimizer::nesterov(),
            schedule: LrSchedule::Polynomial {
                lr0: 1e-3,
                alpha: 1e-3,
                beta: 0.75,
            },
            head_lr_mult: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegdaConfig {
    /// Source supervision of `ψ, f` and source fit of `f'`.
    pub objective1: bool,
    /// `f'` minimizes `L_F` on target features (ψ detached).
    pub objective2: bool,
    /// `ψ` minimizes `L_T` of the frozen `f'` against `f` on target.
    pub objective3: bool,
    /// One optimizer step per objective, in order, instead of one joint step.
    pub sequential: bool,
    pub adversarial_source_target: AdversarialTarget,
}

impl Default for RegdaConfig {
    fn default() -> Self {
        Self {
            objective1: true,
            objective2: true,
            objective3: true,
            sequential: false,
            adversarial_source_target: AdversarialTarget::Prediction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Gaussian width in grid cells; `H'/32` when unset.
    pub sigma: Option<f64>,
    pub eps: f64,
    /// Cells that may carry ground-false mass for single-keypoint tasks;
    /// defaults to the source dataset's keypoint area.
    pub false_area: Option<AreaRange>,
    pub dd_disparity: DisparityKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sigma: None,
            eps: LOG_EPS,
            false_area: None,
            dd_disparity: DisparityKind::Kl,
        }
    }
}

/// A dataset read from disk or generated in memory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<DatasetSpec>,
}

impl DataSource {
    fn validate(&self, name: &str) -> Result<()> {
        match (&self.path, &self.generate) {
            (Some(_), None) => Ok(()),
            (None, Some(spec)) => spec
                .validate()
                .map_err(|e| Error::Config(format!("{name}.generate: {e}"))),
            _ => Err(Error::Config(format!("{name}: set exactly one of `path` or `generate`"))),
        }
    }

    pub fn resolve(&self, threads: usize) -> Result<Dataset> {
        match (&self.path, &self.generate) {
            (Some(p), None) => Dataset::load(p),
            (None, Some(spec)) => make_dataset(spec, threads),
            _ => Err(Error::Config("data source needs exactly one of `path` or `generate`".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// Trade-off between supervision and adaptation terms.
    pub eta: f64,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    /// Evaluate every this many steps, plus at the end of each phase.
    pub eval_every: u64,
    /// Target samples held out for evaluation (labels used there only).
    pub eval_samples: usize,
    pub alpha: f64,
    /// Also write `step-<n>.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub source: DataSource,
    pub target: DataSource,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub regda: RegdaConfig,
    pub loss: LossConfig,
}

fn desk_spec(domain: &str, style: Style, seed: u64) -> DatasetSpec {
    DatasetSpec {
        domain: domain.into(),
        style,
        shape: ShapeKind::Ellipse,
        keypoints: 1,
        image_size: 32,
        grid_size: 16,
        shape_radius: 4.0,
        area: AreaRange { h: [2, 13], w: [2, 13] },
        count: 5000,
        seed,
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Regda,
            eta: 1.0,
            seeds: vec![0],
            batch_size: 16,
            eval_every: 100,
            eval_samples: 500,
            alpha: DEFAULT_ALPHA,
            checkpoint_every: 0,
            model: ModelConfig {
                image_channels: 3,
                image_size: 32,
                channels: vec![8, 16, 16],
                strides: vec![2, 1, 1],
                head_width: 16,
                keypoints: 1,
                upsample: false,
            },
            source: DataSource {
                path: None,
                generate: Some(desk_spec("C", Style::Color, 1)),
            },
            target: DataSource {
                path: None,
                generate: Some(desk_spec("N", Style::Noisy { amplitude: 1.0 }, 2)),
            },
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            regda: RegdaConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Field-level checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad(format!("eta: must be a finite value ≥ 0, got {}", self.eta));
        }
        if self.seeds.is_empty() {
            return bad("seeds: need at least one seed".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size: must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every: must be positive".into());
        }
        if self.eval_samples == 0 {
            return bad("eval_samples: must be positive".into());
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha: must be positive, got {}", self.alpha));
        }
        if self.pretrain.iterations == 0 {
            return bad("pretrain.iterations: must be positive".into());
        }
        if self.method.adapts() && self.adapt.iterations == 0 {
            return bad("adapt.iterations: must be positive".into());
        }
        for (name, mult) in [("pretrain", self.pretrain.head_lr_mult), ("adapt", self.adapt.head_lr_mult)] {
            if !(mult > 0.0) || !mult.is_finite() {
                return bad(format!("{name}.head_lr_mult: must be positive, got {mult}"));
            }
        }
        self.pretrain
            .schedule
            .validate()
            .map_err(|e| Error::Config(format!("pretrain.schedule: {e}")))?;
        self.adapt
            .schedule
            .validate()
            .map_err(|e| Error::Config(format!("adapt.schedule: {e}")))?;
        if let Some(s) = self.loss.sigma {
            if !(s > 0.0) {
                return bad(format!("loss.sigma: must be positive, got {s}"));
            }
        }
        if !(self.loss.eps > 0.0) {
            return bad(format!("loss.eps: must be positive, got {}", self.loss.eps));
        }
        self.model.validate()?;
        self.source.validate("source")?;
        self.target.validate("target")?;
        let grid = self.model.grid()?;
        for (name, src) in [("source", &self.source), ("target", &self.target)] {
            if let Some(spec) = &src.generate {
                self.check_dataset_shape(name, spec.image_size, spec.grid(), spec.keypoints, grid)?;
            }
        }
        Ok(())
    }

    fn check_dataset_shape(
        &self,
        name: &str,
        image_size: usize,
        data_grid: crate::heatmap::Grid,
        keypoints: usize,
        grid: crate::heatmap::Grid,
    ) -> Result<()> {
        if image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "{name}: images are {image_size}px but model.image_size is {}",
                self.model.image_size
            )));
        }
        if data_grid != grid {
            return Err(Error::Config(format!(
                "{name}: labels live on a {}x{} grid but the model predicts {}x{}",
                data_grid.height, data_grid.width, grid.height, grid.width
            )));
        }
        if keypoints != self.model.keypoints {
            return Err(Error::Config(format!(
                "{name}: {keypoints} keypoints but model.keypoints is {}",
                self.model.keypoints
            )));
        }
        Ok(())
    }

    pub fn pretrain_steps(&self) -> u64 {
        self.pretrain.iterations
    }

    pub fn total_steps(&self) -> u64 {
        self.pretrain.iterations + self.adapt.iterations
    }
}

/// Source set, unlabeled target training set, and held-out target set.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: Dataset,
    pub target: Dataset,
    pub target_eval: Dataset,
}

impl TrainData {
    /// Splits the first `eval_samples` target samples off for evaluation.
    pub fn new(config: &TrainConfig, source: Dataset, target: Dataset) -> Result<Self> {
        let grid = config.model.grid()?;
        for (name, d) in [("source", &source), ("target", &target)] {
            config.check_dataset_shape(name, d.image_size, d.grid, d.keypoints, grid)?;
        }
        if target.len() < config.eval_samples + config.batch_size {
            return Err(Error::Config(format!(
                "target: {} samples cannot cover {} held out plus one batch of {}",
                target.len(),
                config.eval_samples,
                config.batch_size
            )));
        }
        if source.len() < config.batch_size {
            return Err(Error::Config(format!(
                "source: {} samples, fewer than one batch of {}",
                source.len(),
                config.batch_size
            )));
        }
        let (target_eval, target) = target.split(config.eval_samples);
        Ok(Self {
            source,
            target,
            target_eval,
        })
    }

    pub fn load(config: &TrainConfig, threads: usize) -> Result<Self> {
        let source = config.source.resolve(threads)?;
        let target = config.target.resolve(threads)?;
        Self::new(config, source, target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
}

/// Losses of one step. Unused objectives are `None`.
///
/// For RegDA `objective2` is `L_F` of `f'` on target and `objective3` the
/// target `L_T` of the frozen `f'` against `f`. For DD they are the
/// disparity discrepancy and the target disparity; for the max-`L_F`
/// ablation `objective2` is the `L_F` both players fight over.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub source: f64,
    pub objective2: Option<f64>,
    pub objective3: Option<f64>,
}

/// One evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    /// Losses averaged over the steps since the previous record.
    pub source_loss: Option<f64>,
    pub objective2_loss: Option<f64>,
    pub objective3_loss: Option<f64>,
    pub target_mae_f: f64,
    pub target_mae_adv: f64,
    pub target_pck_f: f64,
    pub target_pck_adv: f64,
    pub accuracy_difference: f64,
    pub prediction_difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub seed: u64,
    pub eta: f64,
    pub alpha: f64,
    pub mae_unit: String,
    pub pretrain_iterations: u64,
    pub adapt_iterations: u64,
    pub records: Vec<Record>,
    /// Metrics of the last step, not the best one.
    pub final_metrics: Option<Record>,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<Record>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Runs a model over a dataset in chunks; returns both heads' decoded
/// predictions.
pub fn predict_dataset<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    chunk: usize,
) -> Result<(Vec<KeypointSet>, Vec<KeypointSet>)> {
    let (mut f, mut adv) = (Vec::with_capacity(data.len()), Vec::with_capacity(data.len()));
    let idx: Vec<usize> = (0..data.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let (lf, la) = model.predict_both(&data.images::<T>(c))?;
        f.extend(decode_batch(&lf)?);
        adv.extend(decode_batch(&la)?);
    }
    Ok((f, adv))
}

/// Both heads' metrics on a labeled dataset.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, data: &Dataset, alpha: f64) -> Result<Diagnostics> {
    let (f, adv) = predict_dataset(model, data, 64)?;
    let gts: Vec<KeypointSet> = data.samples.iter().map(|s| s.keypoints.clone()).collect();
    diagnostics(&f, &adv, &gts, alpha, data.grid)
}

/// Which network goes into a graph, and how.
struct Bound {
    gen: Vec<Var>,
    head: Vec<Var>,
    adv: Vec<Var>,
}

fn bind3<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, b: [Binding; 3]) -> Bound {
    Bound {
        gen: model.generator.bind(g, b[0]),
        head: model.head.bind(g, b[1]),
        adv: model.adversarial.bind(g, b[2]),
    }
}

fn binding(trainable: bool) -> Binding {
    if trainable {
        Binding::Trainable
    } else {
        Binding::Frozen
    }
}

fn group_grads<T: Scalar>(g: &Graph<T>, vars: &[Var]) -> Result<Vec<Option<Tensor<T>>>> {
    vars.iter().map(|&v| Ok(g.grad(v)?.cloned())).collect()
}

/// Which adaptation terms a RegDA graph contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Objectives {
    pub one: bool,
    pub two: bool,
    pub three: bool,
}

impl Objectives {
    pub const ALL: Objectives = Objectives {
        one: true,
        two: true,
        three: true,
    };

    pub fn only(i: usize) -> Self {
        Self {
            one: i == 1,
            two: i == 2,
            three: i == 3,
        }
    }
}

/// One step's inputs. Target keypoints are never part of it.
pub struct StepBatch<'a, T> {
    pub source_ids: &'a [u64],
    pub source_images: &'a Tensor<T>,
    pub source_keypoints: &'a [KeypointSet],
    pub target_ids: &'a [u64],
    pub target_images: Option<&'a Tensor<T>>,
}

impl<T> StepBatch<'_, T> {
    fn ids(&self) -> Vec<u64> {
        self.source_ids.iter().chain(self.target_ids).copied().collect()
    }
}

/// Mutable training state of one seed.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    config: TrainConfig,
    seed: u64,
    model: Model<T>,
    states: [OptimState<T>; 3],
    step: u64,
    source_stream: BatchStream,
    target_stream: BatchStream,
    kl: KlLoss,
    sigma: f64,
    records: Vec<Record>,
    pending: Vec<StepLosses>,
}

fn stream_seed(seed: u64, purpose: u64) -> u64 {
    seed.wrapping_mul(0xD134_2543_DE82_EF95).wrapping_add(purpose)
}

/// Mean of the present values.
fn mean_some(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        total += v;
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

fn check_loss(v: f64, objective: &'static str, step: u64, ids: &[u64]) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        log::error!("non-finite {objective} loss at step {step}; batch ids {ids:?}");
        Err(Error::NonFiniteLoss {
            objective,
            step,
            batch_ids: ids.to_vec(),
        })
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &TrainConfig, seed: u64, data: &TrainData) -> Result<Self> {
        config.validate()?;
        let grid = config.model.grid()?;
        let sigma = config.loss.sigma.unwrap_or_else(|| grid.default_sigma());
        let mut kl = KlLoss::new(grid, sigma)?.with_eps(config.loss.eps);
        if config.model.keypoints == 1 {
            let mask = match (&config.loss.false_area, &data.source.spec) {
                (Some(a), _) => AreaMask::rect(grid, (a.h[0], a.h[1]), (a.w[0], a.w[1]))?,
                (None, Some(spec)) => spec.area_mask()?,
                (None, None) => AreaMask::central(grid)?,
            };
            kl = kl.with_mask(mask)?;
        }
        Ok(Self {
            config: config.clone(),
            seed,
            model: Model::new(config.model.clone(), seed)?,
            states: std::array::from_fn(|_| OptimState::new()),
            step: 0,
            source_stream: BatchStream::new(data.source.len(), config.batch_size, stream_seed(seed, 1))?,
            target_stream: BatchStream::new(data.target.len(), config.batch_size, stream_seed(seed, 2))?,
            kl,
            sigma,
            records: Vec::new(),
            pending: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<T> {
        &mut self.model
    }

    pub fn kl(&self) -> &KlLoss {
        &self.kl
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    /// Phase of the next step.
    pub fn phase(&self) -> Phase {
        if self.step < self.config.pretrain_steps() {
            Phase::Pretrain
        } else {
            Phase::Adapt
        }
    }

    /// `ψ`'s learning rate at global step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let p = self.config.pretrain_steps();
        if step <= p {
            self.config.pretrain.schedule.at(step - 1)
        } else {
            self.config.adapt.schedule.at(step - 1 - p)
        }
    }

    /// Copy of a trainer that has not started adapting, switched to another
    /// method with the same pretraining.
    pub fn fork(&self, method: Method) -> Result<Self> {
        if self.step > self.config.pretrain_steps() {
            return Err(Error::Config("cannot fork a trainer that has started adapting".into()));
        }
        if method.pretrains_with_l2() != self.config.method.pretrains_with_l2() {
            return Err(Error::Config(format!(
                "{method} and {} pretrain differently",
                self.config.method
            )));
        }
        let mut out = self.clone();
        out.config.method = method;
        Ok(out)
    }

    /// Runs steps until `until` (global) or the end of training, calling
    /// `on_record` for each new evaluation row.
    pub fn run_until(
        &mut self,
        data: &TrainData,
        until: u64,
        on_record: &mut dyn FnMut(&Self, &Record) -> Result<()>,
    ) -> Result<()> {
        let end = until.min(self.config.total_steps());
        while self.step < end {
            self.train_step(data)?;
            if self.should_record() {
                let r = self.record(data)?;
                on_record(self, &r)?;
            }
        }
        Ok(())
    }

    fn should_record(&self) -> bool {
        self.step % self.config.eval_every == 0
            || self.step == self.config.pretrain_steps()
            || self.step == self.config.total_steps()
    }

    /// Evaluates on the held-out target split and appends a record.
    pub fn record(&mut self, data: &TrainData) -> Result<Record> {
        let d = evaluate_model(&self.model, &data.target_eval, self.config.alpha)?;
        let pending = std::mem::take(&mut self.pending);
        let phase = if self.step <= self.config.pretrain_steps() {
            Phase::Pretrain
        } else {
            Phase::Adapt
        };
        let r = Record {
            step: self.step,
            phase,
            lr: self.lr_at(self.step.max(1)),
            source_loss: mean_some(pending.iter().map(|l| Some(l.source))),
            objective2_loss: mean_some(pending.iter().map(|l| l.objective2)),
            objective3_loss: mean_some(pending.iter().map(|l| l.objective3)),
            target_mae_f: d.mae_f,
            target_mae_adv: d.mae_adv,
            target_pck_f: d.pck_f,
            target_pck_adv: d.pck_adv,
            accuracy_difference: d.accuracy_difference,
            prediction_difference: d.prediction_difference,
        };
        self.records.push(r.clone());
        Ok(r)
    }

    pub fn report(&self) -> TrainReport {
        TrainReport {
            method: self.config.method,
            seed: self.seed,
            eta: self.config.eta,
            alpha: self.config.alpha,
            mae_unit: MAE_UNIT.into(),
            pretrain_iterations: self.config.pretrain.iterations,
            adapt_iterations: self.config.adapt.iterations,
            records: self.records.clone(),
            final_metrics: self.records.last().filter(|r| r.step == self.step).cloned(),
        }
    }

    /// Draws the next batches and applies one training step.
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepLosses> {
        if self.done() {
            return Err(Error::invalid("train_step", "training already finished"));
        }
        let phase = self.phase();
        if self.step == self.config.pretrain_steps() {
            // Adaptation starts with fresh optimizer buffers.
            self.states = std::array::from_fn(|_| OptimState::new());
        }
        let si = self.source_stream.next_batch();
        let source = data.source.labeled_batch::<T>(&si);
        let target = match phase {
            Phase::Adapt => {
                let ti = self.target_stream.next_batch();
                Some(data.target.unlabeled_batch::<T>(&ti))
            }
            Phase::Pretrain => None,
        };
        let batch = StepBatch {
            source_ids: &source.ids,
            source_images: &source.images,
            source_keypoints: &source.keypoints,
            target_ids: target.as_ref().map_or(&[][..], |t| &t.ids[..]),
            target_images: target.as_ref().map(|t| &t.images),
        };
        let step = self.step + 1;
        let ids = batch.ids();
        let result = match phase {
            Phase::Pretrain => self.pretrain_step(&batch),
            Phase::Adapt => match self.config.method {
                Method::Regda => {
                    let r = &self.config.regda;
                    let on = Objectives {
                        one: r.objective1,
                        two: r.objective2,
                        three: r.objective3,
                    };
                    if r.sequential {
                        self.regda_step_sequential(&batch, on)
                    } else {
                        self.regda_step(&batch, on)
                    }
                }
                Method::Dd => self.dd_step(&batch),
                Method::MinimaxLf => self.maxlf_step(&batch),
                Method::SourceOnlyL2 | Method::SourceOnlyKl => self.pretrain_step(&batch),
            },
        };
        let losses = match result {
            Err(Error::NonFinite(what)) => {
                log::error!("non-finite {what} at step {step}; batch ids {ids:?}");
                return Err(Error::NonFiniteLoss {
                    objective: "forward",
                    step,
                    batch_ids: ids,
                });
            }
            other => other?,
        };
        self.step += 1;
        self.pending.push(losses.clone());
        Ok(losses)
    }

    fn lrs(&self) -> (f64, f64, &Optimizer) {
        let step = self.step + 1;
        let lr = self.lr_at(step);
        let mult = match self.phase() {
            Phase::Pretrain => self.config.pretrain.head_lr_mult,
            Phase::Adapt => self.config.adapt.head_lr_mult,
        };
        let opt = match self.phase() {
            Phase::Pretrain => &self.config.pretrain.optimizer,
            Phase::Adapt => &self.config.adapt.optimizer,
        };
        (lr, lr * mult, opt)
    }

    /// One optimizer step per group using the graph's gradients.
    fn apply(&mut self, g: &Graph<T>, bound: &Bound) -> Result<()> {
        let grads = [
            group_grads(g, &bound.gen)?,
            group_grads(g, &bound.head)?,
            group_grads(g, &bound.adv)?,
        ];
        let (lr, head_lr, opt) = self.lrs();
        let opt = opt.clone();
        let nets: [&mut Network<T>; 3] = [
            &mut self.model.generator,
            &mut self.model.head,
            &mut self.model.adversarial,
        ];
        for (i, ((net, grads), state)) in nets.into_iter().zip(&grads).zip(&mut self.states).enumerate() {
            if grads.iter().all(Option::is_none) {
                continue;
            }
            let rate = if i == 0 { lr } else { head_lr };
            opt.step(net.params_mut(), grads, state, rate)?;
        }
        Ok(())
    }

    fn labels_or_predictions(&self, g: &Graph<T>, logits: Var, labels: &[KeypointSet]) -> Result<Vec<KeypointSet>> {
        match self.config.regda.adversarial_source_target {
            AdversarialTarget::Label => Ok(labels.to_vec()),
            AdversarialTarget::Prediction => decode_batch(g.value(logits)),
        }
    }

    fn heatmap_targets(&self, labels: &[KeypointSet]) -> Result<Tensor<T>> {
        let grid = self.kl.grid();
        let maps: Vec<f64> = labels
            .iter()
            .map(|k| gaussian_heatmap(k, grid, self.sigma).map(|h| h.data().to_vec()))
            .collect::<Result<Vec<_>>>()?
            .concat();
        Tensor::from_f64(&[labels.len(), self.config.model.keypoints, grid.height, grid.width], &maps)
    }

    fn source_kl(&self, g: &mut Graph<T>, logits: Var, labels: &[KeypointSet]) -> Result<LossValue> {
        let p = g.spatial_softmax(logits)?;
        self.kl.loss_true(g, p, labels)
    }

    /// Phase 1, and every step of source-only training: `ψ, f` on the
    /// source loss; `f'` fitted to the labels on detached features so
    /// adaptation starts from a sensible second head.
    pub fn pretrain_step(&mut self, batch: &StepBatch<'_, T>) -> Result<StepLosses> {
        let l2 = self.config.method.pretrains_with_l2();
        let mut g = Graph::new();
        let bound = bind3(&mut g, &self.model, [Binding::Trainable, Binding::Trainable, binding(!l2)]);
        let x = g.constant(batch.source_images.clone());
        let feat = self.model.generator.forward(&mut g, &bound.gen, x)?;
        let logits = self.model.head.forward(&mut g, &bound.head, feat)?;
        let src = if l2 {
            let target = self.heatmap_targets(batch.source_keypoints)?;
            loss_mse(&mut g, logits, &target)?
        } else {
            self.source_kl(&mut g, logits, batch.source_keypoints)?
        };
        let ids = batch.ids();
        let source = check_loss(src.scalar(&g), "source", self.step + 1, &ids)?;
        let mut total = src.value;
        if !l2 {
            let fd = g.detach(feat);
            let adv = self.model.adversarial.forward(&mut g, &bound.adv, fd)?;
            let warm = self.source_kl(&mut g, adv, batch.source_keypoints)?;
            check_loss(warm.scalar(&g), "adversarial warm-up", self.step + 1, &ids)?;
            total = g.add(total, warm.value)?;
        }
        g.backward(total)?;
        self.apply(&g, &bound)?;
        Ok(StepLosses {
            source,
            objective2: None,
            objective3: None,
        })
    }

    fn target_images<'a>(batch: &StepBatch<'a, T>) -> Result<&'a Tensor<T>> {
        batch
            .target_images
            .ok_or_else(|| Error::invalid("adapt_step", "adaptation needs a target batch"))
    }

    /// Generator features of source and target images from one pass.
    fn features(&self, g: &mut Graph<T>, bound: &Bound, xs: &Tensor<T>, xt: &Tensor<T>) -> Result<(Var, Var)> {
        let b = xs.shape()[0];
        let x = g.constant(Tensor::stack_batch(&[xs.clone(), xt.clone()])?);
        let feat = self.model.generator.forward(g, &bound.gen, x)?;
        let n = g.shape(feat)[0];
        Ok((g.slice(feat, 0, 0, b)?, g.slice(feat, 0, b, n)?))
    }

    /// `f`'s target logits as a constant.
    fn reference_logits(&self, g: &mut Graph<T>, feat_t: Var) -> Result<Var> {
        let ft = g.detach(feat_t);
        let frozen = self.model.head.bind(g, Binding::Frozen);
        self.model.head.forward(g, &frozen, ft)
    }

    /// Objective 1: supervised `L_T` on `f` plus `η`-weighted fit of `f'` to
    /// `f` (or the labels) on source. Returns the loss to add and `L_T(f)`.
    fn objective1(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        feat_s: Var,
        labels: &[KeypointSet],
    ) -> Result<(Var, LossValue)> {
        let fs = self.model.head.forward(g, &bound.head, feat_s)?;
        let src = self.source_kl(g, fs, labels)?;
        let mut total = src.value;
        if self.config.eta > 0.0 {
            let targets = self.labels_or_predictions(g, fs, labels)?;
            let adv = self.model.adversarial.forward(g, &bound.adv, feat_s)?;
            let fit = self.source_kl(g, adv, &targets)?;
            let scaled = g.scale(fit.value, self.config.eta);
            total = g.add(total, scaled)?;
        }
        Ok((total, src))
    }

    fn add_opt(g: &mut Graph<T>, acc: Option<Var>, v: Var) -> Result<Option<Var>> {
        Ok(Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        }))
    }

    /// One joint RegDA step with the selected objectives.
    pub fn regda_step(&mut self, batch: &StepBatch<'_, T>, on: Objectives) -> Result<StepLosses> {
        let xt = Self::target_images(batch)?;
        let eta = self.config.eta;
        let adapt = eta > 0.0;
        let mut g = Graph::new();
        let bound = bind3(
            &mut g,
            &self.model,
            [
                binding(on.one || (on.three && adapt)),
                binding(on.one),
                binding((on.one || on.two) && adapt),
            ],
        );
        let (feat_s, feat_t) = self.features(&mut g, &bound, batch.source_images, xt)?;
        let ids = batch.ids();
        let step = self.step + 1;
        let mut total = None;
        let mut losses = StepLosses::default();

        if on.one {
            let (v, src) = self.objective1(&mut g, &bound, feat_s, batch.source_keypoints)?;
            losses.source = check_loss(src.scalar(&g), "objective1", step, &ids)?;
            check_loss(g.value(v).item().as_f64(), "objective1", step, &ids)?;
            total = Self::add_opt(&mut g, total, v)?;
        } else {
            // Logged only; `f` is bound frozen here.
            let fd = g.detach(feat_s);
            let fs = self.model.head.forward(&mut g, &bound.head, fd)?;
            losses.source = self.source_kl(&mut g, fs, batch.source_keypoints)?.scalar(&g);
        }

        if adapt && (on.two || on.three) {
            let ft = self.reference_logits(&mut g, feat_t)?;
            if on.two {
                let fd = g.detach(feat_t);
                let adv = self.model.adversarial.forward(&mut g, &bound.adv, fd)?;
                let p = g.spatial_softmax(adv)?;
                let lf = self.kl.loss_false(&mut g, p, ft)?;
                losses.objective2 = Some(check_loss(lf.scalar(&g), "objective2", step, &ids)?);
                let v = g.scale(lf.value, eta);
                total = Self::add_opt(&mut g, total, v)?;
            }
            if on.three {
                let frozen = self.model.adversarial.bind(&mut g, Binding::Frozen);
                let adv = self.model.adversarial.forward(&mut g, &frozen, feat_t)?;
                let p = g.spatial_softmax(adv)?;
                let decoded = decode_batch(g.value(ft))?;
                let lt = self.kl.loss_true(&mut g, p, &decoded)?;
                losses.objective3 = Some(check_loss(lt.scalar(&g), "objective3", step, &ids)?);
                let v = g.scale(lt.value, eta);
                total = Self::add_opt(&mut g, total, v)?;
            }
        }

        if let Some(total) = total {
            g.backward(total)?;
            self.apply(&g, &bound)?;
        }
        Ok(losses)
    }

    /// The three objectives as three consecutive updates.
    pub fn regda_step_sequential(&mut self, batch: &StepBatch<'_, T>, on: Objectives) -> Result<StepLosses> {
        let mut out = StepLosses::default();
        let mut source = None;
        for i in 1..=3 {
            let only = Objectives::only(i);
            if !((only.one && on.one) || (only.two && on.two) || (only.three && on.three)) {
                continue;
            }
            let l = self.regda_step(batch, only)?;
            source.get_or_insert(l.source);
            out.objective2 = out.objective2.or(l.objective2);
            out.objective3 = out.objective3.or(l.objective3);
        }
        out.source = source.unwrap_or(0.0);
        Ok(out)
    }

    /// Disparity-discrepancy minimax: `ψ, f` minimize
    /// `L_src + η (D_t − D_s)` while `f'` maximizes `D_t − D_s` through a
    /// gradient reversal on its input features.
    pub fn dd_step(&mut self, batch: &StepBatch<'_, T>) -> Result<StepLosses> {
        let xt = Self::target_images(batch)?;
        let eta = self.config.eta;
        let mut g = Graph::new();
        let bound = bind3(&mut g, &self.model, [Binding::Trainable, Binding::Trainable, binding(eta > 0.0)]);
        let (feat_s, feat_t) = self.features(&mut g, &bound, batch.source_images, xt)?;
        let ids = batch.ids();
        let step = self.step + 1;
        let fs = self.model.head.forward(&mut g, &bound.head, feat_s)?;
        let src = self.source_kl(&mut g, fs, batch.source_keypoints)?;
        let mut losses = StepLosses {
            source: check_loss(src.scalar(&g), "source", step, &ids)?,
            ..Default::default()
        };
        let mut total = src.value;
        if eta > 0.0 {
            let ft = self.reference_logits(&mut g, feat_t)?;
            let rs = g.reverse_grad(feat_s, 1.0);
            let rt = g.reverse_grad(feat_t, 1.0);
            let adv_s = self.model.adversarial.forward(&mut g, &bound.adv, rs)?;
            let adv_t = self.model.adversarial.forward(&mut g, &bound.adv, rt)?;
            let dd = disparity_discrepancy(
                &mut g,
                &self.kl,
                (adv_s, fs),
                (adv_t, ft),
                self.config.loss.dd_disparity,
            )?;
            let dd_value = check_loss(dd.scalar(&g), "disparity_discrepancy", step, &ids)?;
            losses.objective2 = Some(dd_value);
            losses.objective3 = Some(dd_value + self.source_disparity(&g, adv_s, fs)?);
            let v = g.scale(dd.value, -eta);
            total = g.add(total, v)?;
        }
        g.backward(total)?;
        self.apply(&g, &bound)?;
        Ok(losses)
    }

    /// `D_s` recomputed from values only, for logging.
    fn source_disparity(&self, g: &Graph<T>, adv_s: Var, fs: Var) -> Result<f64> {
        let mut scratch = Graph::new();
        let a = scratch.constant(g.value(adv_s).clone());
        let f = scratch.constant(g.value(fs).clone());
        let d = crate::losses::disparity(&mut scratch, &self.kl, a, f, self.config.loss.dd_disparity)?;
        Ok(d.scalar(&scratch))
    }

    /// Ablation: objective 1, then `f'` minimizes target `L_F` while `ψ`
    /// maximizes it through a gradient reversal.
    pub fn maxlf_step(&mut self, batch: &StepBatch<'_, T>) -> Result<StepLosses> {
        let xt = Self::target_images(batch)?;
        let eta = self.config.eta;
        let mut g = Graph::new();
        let bound = bind3(&mut g, &self.model, [Binding::Trainable, Binding::Trainable, binding(eta > 0.0)]);
        let (feat_s, feat_t) = self.features(&mut g, &bound, batch.source_images, xt)?;
        let ids = batch.ids();
        let step = self.step + 1;
        let (mut total, src) = self.objective1(&mut g, &bound, feat_s, batch.source_keypoints)?;
        let mut losses = StepLosses {
            source: check_loss(src.scalar(&g), "objective1", step, &ids)?,
            ..Default::default()
        };
        check_loss(g.value(total).item().as_f64(), "objective1", step, &ids)?;
        if eta > 0.0 {
            let ft = self.reference_logits(&mut g, feat_t)?;
            let rt = g.reverse_grad(feat_t, 1.0);
            let adv = self.model.adversarial.forward(&mut g, &bound.adv, rt)?;
            let p = g.spatial_softmax(adv)?;
            let lf = self.kl.loss_false(&mut g, p, ft)?;
            losses.objective2 = Some(check_loss(lf.scalar(&g), "objective2", step, &ids)?);
            let v = g.scale(lf.value, eta);
            total = g.add(total, v)?;
        }
        g.backward(total)?;
        self.apply(&g, &bound)?;
        Ok(losses)
    }

    /// Parameters, optimizer buffers, step counter and records.
    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        let mut arrays = self.model.named_params();
        let groups = ["generator", "head", "adversarial"];
        let mut opt_steps = Vec::new();
        for (name, state) in groups.iter().zip(&self.states) {
            for (i, t) in state.first.iter().enumerate() {
                arrays.push((format!("optim.{name}.first.{i}"), t.clone()));
            }
            for (i, t) in state.second.iter().enumerate() {
                arrays.push((format!("optim.{name}.second.{i}"), t.clone()));
            }
            opt_steps.push(state.step);
        }
        Ok(Checkpoint {
            step: self.step,
            architecture: serde_json::to_value(&self.config.model)?,
            metadata: serde_json::json!({
                "method": self.config.method,
                "seed": self.seed,
                "config": serde_json::to_value(&self.config)?,
                "optimizer_steps": opt_steps,
                "records": serde_json::to_value(&self.records)?,
                "pending": serde_json::to_value(&self.pending)?,
            }),
            arrays,
        })
    }

    /// Rebuilds a trainer from a checkpoint written by the same method and
    /// seed. Batch streams are replayed up to the stored step.
    pub fn from_checkpoint(config: &TrainConfig, data: &TrainData, ckpt: &Checkpoint<T>) -> Result<Self> {
        let arch: ModelConfig = serde_json::from_value(ckpt.architecture.clone())?;
        if arch != config.model {
            return Err(Error::Checkpoint("model architecture differs from the config".into()));
        }
        let meta = &ckpt.metadata;
        let method: Method = serde_json::from_value(meta["method"].clone())?;
        if method != config.method {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with {method}, config asks for {}",
                config.method
            )));
        }
        let seed: u64 = serde_json::from_value(meta["seed"].clone())?;
        let mut t = Self::new(config, seed, data)?;
        if ckpt.step > config.total_steps() {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at step {} but the config ends at {}",
                ckpt.step,
                config.total_steps()
            )));
        }
        t.model.load_named(&ckpt.arrays)?;
        let steps: Vec<u64> = serde_json::from_value(meta["optimizer_steps"].clone())?;
        let groups = ["generator", "head", "adversarial"];
        for ((name, state), s) in groups.iter().zip(&mut t.states).zip(steps) {
            state.step = s;
            for (which, buf) in [("first", &mut state.first), ("second", &mut state.second)] {
                let prefix = format!("optim.{name}.{which}.");
                let mut found: Vec<(usize, Tensor<T>)> = ckpt
                    .arrays
                    .iter()
                    .filter_map(|(n, a)| n.strip_prefix(&prefix).and_then(|i| i.parse().ok()).map(|i| (i, a.clone())))
                    .collect();
                found.sort_by_key(|(i, _)| *i);
                *buf = found.into_iter().map(|(_, a)| a).collect();
            }
        }
        t.records = serde_json::from_value(meta["records"].clone())?;
        t.pending = serde_json::from_value(meta["pending"].clone())?;
        let p = config.pretrain_steps();
        for _ in 0..ckpt.step {
            t.source_stream.next_batch();
        }
        for _ in p..ckpt.step {
            t.target_stream.next_batch();
        }
        t.step = ckpt.step;
        Ok(t)
    }
}

/// Files written by [`run_training`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub report_csv: PathBuf,
    pub report_json: PathBuf,
    pub checkpoint: PathBuf,
}

/// Trains one seed to completion, streaming `report.csv` into `out` and
/// finishing with `report.json` and `final.ckpt`. With `resume`, continues
/// from that checkpoint.
pub fn run_training<T: Scalar>(
    config: &TrainConfig,
    seed: u64,
    data: &TrainData,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(TrainReport, RunArtifacts)> {
    fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::<T>::from_checkpoint(config, data, &Checkpoint::load(p)?)?;
            if t.seed() != seed {
                return Err(Error::Checkpoint(format!("checkpoint seed {} differs from {seed}", t.seed())));
            }
            t
        }
        None => Trainer::<T>::new(config, seed, data)?,
    };
    let csv_path = out.join("report.csv");
    // Rewritten from the trainer's records so a resumed run has one clean file.
    let mut writer = csv::Writer::from_writer(File::create(&csv_path)?);
    for r in trainer.records() {
        writer.serialize(r)?;
    }
    writer.flush()?;
    let every = config.checkpoint_every;
    let total = config.total_steps();
    trainer.run_until(data, total, &mut |t, r| {
        writer.serialize(r)?;
        writer.flush()?;
        log::info!(
            "{} seed {} step {}/{}: target mae {:.4} pck {:.3}",
            t.config().method,
            t.seed(),
            r.step,
            total,
            r.target_mae_f,
            r.target_pck_f
        );
        if every > 0 && t.step() % every == 0 {
            t.to_checkpoint()?.save(&out.join(format!("step-{}.ckpt", t.step())))?;
        }
        Ok(())
    })?;
    let report = trainer.report();
    let artifacts = RunArtifacts {
        report_csv: csv_path,
        report_json: out.join("report.json"),
        checkpoint: out.join("final.ckpt"),
    };
    report.write_json(&artifacts.report_json)?;
    trainer.to_checkpoint()?.save(&artifacts.checkpoint)?;
    Ok((report, artifacts))
}
