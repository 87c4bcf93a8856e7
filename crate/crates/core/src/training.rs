//! Training objectives, datasets, optimizers, the training loop and metrics.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;

use crate::autodiff::{Graph, LinearMap, Var};
use crate::error::{Error, Result};
use crate::groups::{CompareRegion, ImageAction};
use crate::operators::{LinearOperator, NoiseModel};
use crate::reconstruct::ReconstructionModel;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which group elements enter the equivariance term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupSampling {
    /// Sum over every element.
    Full,
    /// `k` elements drawn uniformly per item; the term is their plain sum.
    Random(usize),
}

#[derive(Clone, Debug)]
pub enum LossKind {
    Supervised,
    /// Supervised on `(T_g u, A T_g u + noise)` with one random `g` per item.
    SupervisedDa {
        action: Arc<ImageAction>,
        /// Draw fresh noise for every augmented measurement (otherwise noiseless).
        resample_noise: bool,
        noise: NoiseModel,
    },
    MeasurementConsistency,
    EquivariantImaging {
        action: Arc<ImageAction>,
        alpha: f64,
        sampling: GroupSampling,
        /// Pixels compared in the equivariance term.
        region: CompareRegion,
    },
}

#[derive(Clone, Debug)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Use `||.||_1` instead of the squared error for the supervised terms.
    pub l1: bool,
}

impl LossSpec {
    pub fn supervised() -> Self {
        Self {
            kind: LossKind::Supervised,
            l1: false,
        }
    }

    pub fn measurement_consistency() -> Self {
        Self {
            kind: LossKind::MeasurementConsistency,
            l1: false,
        }
    }

    pub fn equivariant_imaging(action: Arc<ImageAction>, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::InvalidArgument("alpha must be nonnegative".into()));
        }
        Ok(Self {
            kind: LossKind::EquivariantImaging {
                action,
                alpha,
                sampling: GroupSampling::Full,
                region: CompareRegion::Full,
            },
            l1: false,
        })
    }

    pub fn supervised_da(action: Arc<ImageAction>, noise: NoiseModel, resample_noise: bool) -> Self {
        Self {
            kind: LossKind::SupervisedDa {
                action,
                resample_noise,
                noise,
            },
            l1: false,
        }
    }

    /// Short method name used in reports.
    pub fn name(&self) -> &'static str {
        match self.kind {
            LossKind::Supervised => "supervised",
            LossKind::SupervisedDa { .. } => "supervised-da",
            LossKind::MeasurementConsistency => "mc",
            LossKind::EquivariantImaging { .. } => "ei",
        }
    }

    pub fn needs_ground_truth(&self) -> bool {
        matches!(self.kind, LossKind::Supervised | LossKind::SupervisedDa { .. })
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            LossKind::Supervised => write!(f, "supervised")?,
            LossKind::SupervisedDa {
                action, resample_noise, ..
            } => write!(f, "supervised-da:{}:resample={resample_noise}", action.spec())?,
            LossKind::MeasurementConsistency => write!(f, "mc")?,
            LossKind::EquivariantImaging {
                action,
                alpha,
                sampling,
                region,
            } => {
                write!(f, "ei:{}:alpha={alpha}", action.spec())?;
                if let GroupSampling::Random(k) = sampling {
                    write!(f, ":samples={k}")?;
                }
                if *region != CompareRegion::Full {
                    write!(f, ":region={}", region.spec())?;
                }
            }
        }
        if self.l1 {
            write!(f, ":l1")?;
        }
        Ok(())
    }
}

/// EI specs for each value of `alpha`.
pub fn alpha_sweep(action: &Arc<ImageAction>, alphas: &[f64]) -> Result<Vec<LossSpec>> {
    alphas.iter().map(|&a| LossSpec::equivariant_imaging(action.clone(), a)).collect()
}

/// Train or test partition tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images with their simulated measurements. Every read of a ground-truth
/// image is counted.
#[derive(Debug)]
pub struct SupervisedSet<T: Scalar = f64> {
    op: Arc<LinearOperator<T>>,
    images: Vec<Tensor<T>>,
    measurements: Vec<Tensor<T>>,
    noise: NoiseModel,
    split: Split,
    gt_reads: AtomicUsize,
}

impl<T: Scalar> Clone for SupervisedSet<T> {
    fn clone(&self) -> Self {
        Self {
            op: self.op.clone(),
            images: self.images.clone(),
            measurements: self.measurements.clone(),
            noise: self.noise,
            split: self.split,
            gt_reads: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> SupervisedSet<T> {
    /// `y_i = A u_i + noise`, with noise draw `i` of `noise`.
    pub fn simulate(op: Arc<LinearOperator<T>>, images: Vec<Tensor<T>>, noise: NoiseModel, split: Split) -> Result<Self> {
        let measurements = images
            .iter()
            .enumerate()
            .map(|(i, u)| noise.sample(&op.apply(u)?, i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            op,
            images,
            measurements,
            noise,
            split,
            gt_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn operator(&self) -> &Arc<LinearOperator<T>> {
        &self.op
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn ground_truth(&self, i: usize) -> &Tensor<T> {
        self.gt_reads.fetch_add(1, Ordering::Relaxed);
        &self.images[i]
    }

    pub fn measurement(&self, i: usize) -> &Tensor<T> {
        &self.measurements[i]
    }

    /// Number of ground-truth reads so far.
    pub fn ground_truth_reads(&self) -> usize {
        self.gt_reads.load(Ordering::Relaxed)
    }

    /// Drops the images, keeping only the measurements.
    pub fn measurements_only(&self) -> MeasurementSet<T> {
        MeasurementSet {
            op: self.op.clone(),
            measurements: self.measurements.clone(),
            split: self.split,
        }
    }

    /// First `n` items.
    pub fn take(&self, n: usize) -> Self {
        Self {
            op: self.op.clone(),
            images: self.images.iter().take(n).cloned().collect(),
            measurements: self.measurements.iter().take(n).cloned().collect(),
            noise: self.noise,
            split: self.split,
            gt_reads: AtomicUsize::new(0),
        }
    }
}

/// Measurements only; no ground truth exists in this type.
#[derive(Clone, Debug)]
pub struct MeasurementSet<T: Scalar = f64> {
    op: Arc<LinearOperator<T>>,
    measurements: Vec<Tensor<T>>,
    split: Split,
}

impl<T: Scalar> MeasurementSet<T> {
    pub fn new(op: Arc<LinearOperator<T>>, measurements: Vec<Tensor<T>>, split: Split) -> Result<Self> {
        if let Some(y) = measurements.iter().find(|y| y.len() != op.m()) {
            return Err(Error::ShapeMismatch {
                op: "measurement set",
                left: y.shape().to_vec(),
                right: vec![op.m()],
            });
        }
        Ok(Self { op, measurements, split })
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn operator(&self) -> &Arc<LinearOperator<T>> {
        &self.op
    }

    pub fn measurement(&self, i: usize) -> &Tensor<T> {
        &self.measurements[i]
    }

    pub fn split(&self) -> Split {
        self.split
    }
}

#[derive(Clone, Debug)]
pub enum Dataset<T: Scalar = f64> {
    Supervised(SupervisedSet<T>),
    Unsupervised(MeasurementSet<T>),
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        match self {
            Self::Supervised(s) => s.len(),
            Self::Unsupervised(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn operator(&self) -> &Arc<LinearOperator<T>> {
        match self {
            Self::Supervised(s) => s.operator(),
            Self::Unsupervised(s) => s.operator(),
        }
    }

    /// Items `indices` as a batch. Ground truth is read only in supervised mode.
    pub fn batch(&self, indices: &[usize]) -> Batch<'_, T> {
        match self {
            Self::Supervised(s) => Batch::Pairs(indices.iter().map(|&i| (s.ground_truth(i), s.measurement(i), i)).collect()),
            Self::Unsupervised(s) => Batch::Measurements(indices.iter().map(|&i| (s.measurement(i), i)).collect()),
        }
    }
}

/// Items of a minibatch, each tagged with its dataset index.
#[derive(Clone, Debug)]
pub enum Batch<'a, T: Scalar> {
    Pairs(Vec<(&'a Tensor<T>, &'a Tensor<T>, usize)>),
    Measurements(Vec<(&'a Tensor<T>, usize)>),
}

impl<T: Scalar> Batch<'_, T> {
    pub fn len(&self) -> usize {
        match self {
            Self::Pairs(p) => p.len(),
            Self::Measurements(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Simulated augmentation: `(T_g u, A T_g u + noise)`.
pub fn augment<T: Scalar>(
    dataset: &Dataset<T>,
    index: usize,
    g: usize,
    action: &ImageAction,
    noise: &NoiseModel,
    draw: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    match dataset {
        Dataset::Supervised(s) => augment_image(s.ground_truth(index), g, action, s.operator(), noise, draw),
        Dataset::Unsupervised(_) => Err(Error::InvalidArgument(
            "augmentation needs ground-truth images; the dataset holds measurements only".into(),
        )),
    }
}

/// Augments one image.
pub fn augment_image<T: Scalar>(
    u: &Tensor<T>,
    g: usize,
    action: &ImageAction,
    op: &LinearOperator<T>,
    noise: &NoiseModel,
    draw: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ug = action.act(g, u)?;
    let y = noise.sample(&op.apply(&ug)?, draw)?;
    Ok((ug, y))
}

fn distance<'g, T: Scalar>(a: &Var<'g, T>, b: &Var<'g, T>, l1: bool) -> Result<Var<'g, T>> {
    let d = a.sub(b)?;
    if l1 {
        d.abs()?.sum()
    } else {
        d.square()?.sum()
    }
}

/// Per-item randomness: element choices and noise draws.
fn item_rng(seed: u64, step: u64, index: usize) -> rng::Rng {
    rng::stream(seed, rng::substream(rng::substream(0x1055, step), index as u64))
}

/// Loss of one item recorded on `g`.
#[allow(clippy::too_many_arguments)]
fn item_loss<'g, T: Scalar>(
    g: &'g Graph<T>,
    params: &[Var<'g, T>],
    spec: &LossSpec,
    model: &ReconstructionModel<T>,
    op: &Arc<LinearOperator<T>>,
    u: Option<&Tensor<T>>,
    y: &Tensor<T>,
    r: &mut rng::Rng,
    draw: u64,
) -> Result<Var<'g, T>> {
    let dyn_op: Arc<dyn LinearMap<T>> = op.clone();
    let need_gt = || Error::InvalidArgument(format!("{} loss needs (image, measurement) pairs", spec.name()));
    match &spec.kind {
        LossKind::Supervised => {
            let u = g.constant(u.ok_or_else(need_gt)?.clone());
            let out = model.forward(g, params, op, &g.constant(y.clone()))?;
            distance(&out, &u, spec.l1)
        }
        LossKind::SupervisedDa {
            action,
            resample_noise,
            noise,
        } => {
            let u = u.ok_or_else(need_gt)?;
            let e = r.gen_range(0..action.order());
            let noise = if *resample_noise { *noise } else { NoiseModel::none() };
            let (ug, yg) = augment_image(u, e, action, op, &noise, draw)?;
            let out = model.forward(g, params, op, &g.constant(yg))?;
            distance(&out, &g.constant(ug), spec.l1)
        }
        LossKind::MeasurementConsistency => {
            let yv = g.constant(y.clone());
            let out = model.forward(g, params, op, &yv)?;
            out.linear(dyn_op)?.sub(&yv)?.square()?.sum()
        }
        LossKind::EquivariantImaging {
            action,
            alpha,
            sampling,
            region,
        } => {
            let yv = g.constant(y.clone());
            let x1 = model.forward(g, params, op, &yv)?;
            let mc = x1.linear(dyn_op.clone())?.sub(&yv)?.square()?.sum()?;
            if *alpha == 0.0 {
                return Ok(mc);
            }
            let elements: Vec<usize> = match sampling {
                GroupSampling::Full => action.elements().collect(),
                GroupSampling::Random(k) => (0..*k).map(|_| r.gen_range(0..action.order())).collect(),
            };
            let mask = match region {
                CompareRegion::Full => None,
                r => {
                    let (h, w) = model.grid();
                    Some(g.constant(r.mask(1, h, w)?))
                }
            };
            let mut total: Option<Var<'g, T>> = None;
            for e in elements {
                let x2 = x1.linear(Arc::new(action.linear_map(e, 1)?))?;
                let y2 = x2.linear(dyn_op.clone())?;
                let x3 = model.forward(g, params, op, &y2)?;
                let diff = x3.sub(&x2)?;
                let diff = match &mask {
                    Some(m) => diff.mul(m)?,
                    None => diff,
                };
                let term = diff.square()?.sum()?;
                total = Some(match total {
                    Some(t) => t.add(&term)?,
                    None => term,
                });
            }
            match total {
                Some(t) => mc.add(&t.scale(T::lit(*alpha))?),
                None => Ok(mc),
            }
        }
    }
}

/// Mean item loss of `batch`, recorded on `g`.
///
/// `step` and `seed` address the random element choices and noise draws so
/// a given step is reproducible.
#[allow(clippy::too_many_arguments)]
pub fn loss_eval<'g, T: Scalar>(
    g: &'g Graph<T>,
    params: &[Var<'g, T>],
    spec: &LossSpec,
    model: &ReconstructionModel<T>,
    batch: &Batch<'_, T>,
    op: &Arc<LinearOperator<T>>,
    seed: u64,
    step: u64,
) -> Result<Var<'g, T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total: Option<Var<'g, T>> = None;
    let mut push = |v: Var<'g, T>| -> Result<()> {
        total = Some(match total.take() {
            Some(t) => t.add(&v)?,
            None => v,
        });
        Ok(())
    };
    match batch {
        Batch::Pairs(items) => {
            for &(u, y, i) in items {
                let mut r = item_rng(seed, step, i);
                let draw = rng::substream(step, i as u64);
                push(item_loss(g, params, spec, model, op, Some(u), y, &mut r, draw)?)?;
            }
        }
        Batch::Measurements(items) => {
            if spec.needs_ground_truth() {
                return Err(Error::InvalidArgument(format!(
                    "{} loss cannot be evaluated on a measurement-only batch",
                    spec.name()
                )));
            }
            for &(y, i) in items {
                let mut r = item_rng(seed, step, i);
                push(item_loss(g, params, spec, model, op, None, y, &mut r, 0)?)?;
            }
        }
    }
    total.expect("nonempty").scale(T::one() / T::lit(batch.len() as f64))
}

/// Loss value without gradients.
pub fn loss_value<T: Scalar>(
    spec: &LossSpec,
    model: &ReconstructionModel<T>,
    batch: &Batch<'_, T>,
    op: &Arc<LinearOperator<T>>,
    seed: u64,
) -> Result<T> {
    let g = Graph::new();
    let params: Vec<_> = model.params().iter().map(|p| g.constant(p.clone())).collect();
    Ok(loss_eval(&g, &params, spec, model, batch, op, seed, 0)?.value().item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            kind,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        self.step += 1;
        let lr = T::lit(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.axpy(-lr, g)?;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                let c1 = T::one() - T::lit(beta1.powi(self.step as i32));
                let c2 = T::one() - T::lit(beta2.powi(self.step as i32));
                let eps = T::lit(eps);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    let pd = p.data_mut();
                    for (k, &gk) in g.data().iter().enumerate() {
                        let mk = &mut m.data_mut()[k];
                        *mk = b1 * *mk + (T::one() - b1) * gk;
                        let mhat = *mk / c1;
                        let vk = &mut v.data_mut()[k];
                        *vk = b2 * *vk + (T::one() - b2) * gk * gk;
                        let vhat = *vk / c2;
                        pd[k] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Evaluate every this many epochs (and always after the last).
    pub eval_every: usize,
    /// Keep the parameters with the best validation PSNR instead of the last ones.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            eval_every: 1,
            select_best: false,
        }
    }
}

/// One row of the metric history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the epoch was not evaluated or no test ground truth exists.
    pub test_psnr_db: Option<f64>,
    pub wall_time_s: f64,
}

impl EpochMetrics {
    /// Equality ignoring wall time.
    pub fn same_metrics(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.test_psnr_db.map(f64::to_bits) == other.test_psnr_db.map(f64::to_bits)
    }
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,test_psnr_db,wall_time_s";

/// Formats a PSNR, writing `inf` for identical images.
pub fn format_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p}")
    }
}

/// Metric history as CSV.
pub fn history_csv(history: &[EpochMetrics]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{:.3}\n",
            h.epoch,
            h.train_loss,
            h.test_psnr_db.map(format_psnr).unwrap_or_default(),
            h.wall_time_s
        ));
    }
    out
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar = f64> {
    pub model: ReconstructionModel<T>,
    pub history: Vec<EpochMetrics>,
    /// Epoch whose parameters were returned (0 = initialization).
    pub best_epoch: usize,
}

/// `10 log10(peak^2 / MSE)`; `+inf` for identical images.
pub fn psnr<T: Scalar>(reference: &Tensor<T>, estimate: &Tensor<T>, peak: f64) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            left: reference.shape().to_vec(),
            right: estimate.shape().to_vec(),
        });
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument("peak must be positive".into()));
    }
    let mse = reference
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(&a, &b)| (a - b).as_f64().powi(2))
        .sum::<f64>()
        / reference.len() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean PSNR of a reconstruction function over a test set (peak 1).
pub fn evaluate<T: Scalar>(test: &SupervisedSet<T>, mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let mut total = 0.0;
    for i in 0..test.len() {
        let est = f(test.measurement(i))?;
        total += psnr(test.ground_truth(i), &est, 1.0)?;
    }
    Ok(total / test.len() as f64)
}

/// Mean PSNR of the model on `test`.
pub fn evaluate_model<T: Scalar>(model: &ReconstructionModel<T>, test: &SupervisedSet<T>) -> Result<f64> {
    let op = test.operator().clone();
    evaluate(test, |y| model.reconstruct(&op, y))
}

/// Mean PSNR of the linear inversion `A^+ y`.
pub fn evaluate_pinv<T: Scalar>(test: &SupervisedSet<T>) -> Result<f64> {
    let op = test.operator().clone();
    evaluate(test, |y| op.pseudo_inverse(y))
}

fn check_compat<T: Scalar>(dataset: &Dataset<T>, spec: &LossSpec) -> Result<()> {
    if matches!(dataset, Dataset::Unsupervised(_)) && spec.needs_ground_truth() {
        return Err(Error::InvalidArgument(format!(
            "{} loss needs a supervised dataset",
            spec.name()
        )));
    }
    Ok(())
}

/// Minibatch training with `test` PSNR recorded in the history. Returns the
/// best-by-PSNR parameters on `test` when `select_best` is set, the last
/// ones otherwise. See [`train_with_validation`] to select on another split.
pub fn train<T: Scalar>(
    model: &ReconstructionModel<T>,
    dataset: &Dataset<T>,
    test: Option<&SupervisedSet<T>>,
    spec: &LossSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with_validation(model, dataset, test, test, spec, config)
}

/// As [`train`], but the best epoch is picked on `validation`.
pub fn train_with_validation<T: Scalar>(
    model: &ReconstructionModel<T>,
    dataset: &Dataset<T>,
    test: Option<&SupervisedSet<T>>,
    validation: Option<&SupervisedSet<T>>,
    spec: &LossSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    check_compat(dataset, spec)?;
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let start = Instant::now();
    let op = dataset.operator().clone();
    let mut model = model.clone();
    let mut params = model.params().to_vec();
    let mut opt = Optimizer::new(config.optimizer, config.lr, &params);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor<T>>)> = None;
    if let (Some(t), true) = (validation, config.select_best) {
        let p0 = evaluate_model(&model, t)?;
        best = Some((p0, 0, params.clone()));
    }
    let n = dataset.len();
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng::stream(config.seed, rng::substream(0xe90c, epoch as u64)));
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch = dataset.batch(chunk);
            let g = Graph::new();
            let vars: Vec<Var<'_, T>> = params.iter().map(|p| g.param(p.clone())).collect();
            let loss = loss_eval(&g, &vars, spec, &model, &batch, &op, config.seed, step)?;
            let value = loss.value().item();
            if !value.is_finite() {
                let (node, name) = g.first_non_finite().unwrap_or((loss.id(), "loss"));
                return Err(Error::NonFinite { op: name, node });
            }
            let grads = g.backward(loss, &vars)?.into_vec()?;
            if let Some(bad) = grads.iter().position(|t| !t.all_finite()) {
                return Err(Error::NonFinite {
                    op: "gradient",
                    node: vars[bad].id(),
                });
            }
            opt.update(&mut params, &grads)?;
            loss_sum += value.as_f64();
            batches += 1;
        }
        model.set_params(params.clone())?;
        let evaluate_now = config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs);
        let test_psnr = match (test, evaluate_now) {
            (Some(t), true) => Some(evaluate_model(&model, t)?),
            _ => None,
        };
        let val_psnr = match (validation, evaluate_now && config.select_best) {
            (Some(v), true) if test.is_some_and(|t| std::ptr::eq(t, v)) => test_psnr,
            (Some(v), true) => Some(evaluate_model(&model, v)?),
            _ => None,
        };
        if let (Some(p), Some((bp, _, _))) = (val_psnr, &best) {
            if p > *bp {
                best = Some((p, epoch, params.clone()));
            }
        }
        history.push(EpochMetrics {
            epoch,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            test_psnr_db: test_psnr,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    let best_epoch = match best {
        Some((_, e, p)) if config.select_best => {
            model.set_params(p)?;
            e
        }
        _ => config.epochs,
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}
