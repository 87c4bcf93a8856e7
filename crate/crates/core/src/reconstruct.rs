//! Reconstruction functions: classic proximal gradient descent, direct
//! networks on `A^+ y`, and unrolled proximal gradient networks.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::autodiff::{Graph, LinearMap, Var};
use crate::error::{Error, Result};
use crate::groups::ImageAction;
use crate::linalg;
use crate::nn::{self, PointGroup};
use crate::operators::{LinearOperator, PinvMap};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tensor};

/// Proximal operator of a handcrafted regularizer `J`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProxSpec {
    /// `J = 0`.
    Identity,
    /// `J = lambda * ||.||_1`.
    SoftThreshold { lambda: f64 },
}

impl ProxSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::Spec {
            spec: spec.to_string(),
            reason: "unknown prox".into(),
            grammar: "identity | l1:<lambda>",
        };
        match spec.trim().split_once(':') {
            None if spec.trim() == "identity" => Ok(Self::Identity),
            Some(("l1", l)) => Ok(Self::SoftThreshold {
                lambda: l.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }

    /// `J(u)`.
    pub fn penalty<T: Scalar>(&self, u: &Tensor<T>) -> T {
        match *self {
            Self::Identity => T::zero(),
            Self::SoftThreshold { lambda } => T::lit(lambda) * u.data().iter().map(|v| v.abs()).sum::<T>(),
        }
    }
}

impl fmt::Display for ProxSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "identity"),
            Self::SoftThreshold { lambda } => write!(f, "l1:{lambda}"),
        }
    }
}

/// `prox_{tau J}(u) = argmin_v 1/2 ||u - v||^2 + tau J(v)`.
pub fn prox_eval<T: Scalar>(spec: &ProxSpec, u: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    if !(tau > T::zero()) {
        return Err(Error::InvalidArgument("prox step must be positive".into()));
    }
    Ok(match *spec {
        ProxSpec::Identity => u.clone(),
        ProxSpec::SoftThreshold { lambda } => {
            let t = tau * T::lit(lambda);
            u.map(|v| v.signum() * (v.abs() - t).max(T::zero()))
        }
    })
}

/// Output of [`pgd_solve`].
#[derive(Clone, Debug)]
pub struct PgdResult<T: Scalar = f64> {
    pub u: Tensor<T>,
    /// `1/2 ||A u - y||^2 + J(u)` at the start and after every iteration.
    pub objective: Vec<T>,
    /// Estimated `||A||` (50 power iterations).
    pub operator_norm: T,
    pub warnings: Vec<String>,
}

fn objective<T: Scalar>(a: &dyn LinearMap<T>, y: &[T], u: &Tensor<T>, prox: &ProxSpec) -> T {
    let r: T = a.apply(u.data()).iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum();
    T::lit(0.5) * r + prox.penalty(u)
}

/// Proximal gradient descent on `1/2 ||A u - y||^2 + J(u)`:
/// `u <- prox_{tau J}(u - tau A^T (A u - y))`.
///
/// A step above `1/||A||^2` is allowed but recorded in `warnings`.
pub fn pgd_solve<T: Scalar>(
    a: &dyn LinearMap<T>,
    y: &Tensor<T>,
    prox: &ProxSpec,
    tau: T,
    iters: usize,
    u0: &Tensor<T>,
) -> Result<PgdResult<T>> {
    let n: usize = a.in_shape().iter().product();
    let m: usize = a.out_shape().iter().product();
    if u0.len() != n || y.len() != m {
        return Err(Error::ShapeMismatch {
            op: "pgd_solve",
            left: vec![u0.len(), y.len()],
            right: vec![n, m],
        });
    }
    let norm = linalg::operator_norm(a, 50);
    let mut warnings = Vec::new();
    if tau * norm * norm > T::one() + T::lit(1e-9) {
        warnings.push(format!(
            "step {tau} exceeds 1/||A||^2 = {}; convergence is not guaranteed",
            T::one() / (norm * norm)
        ));
    }
    let mut u = u0.clone();
    let mut history = vec![objective(a, y.data(), &u, prox)];
    for _ in 0..iters {
        let resid: Vec<T> = a.apply(u.data()).iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let grad = a.apply_adjoint(&resid);
        let step = Tensor::new(u.shape().to_vec(), u.data().iter().zip(&grad).map(|(&x, &g)| x - tau * g).collect())?;
        u = prox_eval(prox, &step, tau)?;
        history.push(objective(a, y.data(), &u, prox));
    }
    Ok(PgdResult {
        u,
        objective: history,
        operator_norm: norm,
        warnings,
    })
}

/// A per-iteration or direct network.
#[derive(Clone, Debug, PartialEq)]
pub enum NetSpec {
    Identity,
    /// Fixed soft-thresholding with threshold `t`.
    SoftThreshold { t: f64 },
    /// `layers` convolutions with leaky ReLU in between.
    Cnn {
        layers: usize,
        channels: usize,
        kernel: usize,
        slope: f64,
        bias: bool,
        residual: bool,
        zero_last: bool,
    },
    /// Lifting layer, group convolutions and mean pooling over the point group.
    GroupCnn {
        group: String,
        layers: usize,
        channels: usize,
        kernel: usize,
        slope: f64,
        residual: bool,
        zero_last: bool,
    },
}

pub const NET_GRAMMAR: &str = "identity | soft:t=<threshold> | cnn[:layers=<L>][:channels=<C>][:k=<k>][:slope=<a>][:bias][:noresidual][:zero-last] | gcnn:<group>[:layers=..][:channels=..][:k=..][:slope=..][:noresidual][:zero-last]";

impl Default for NetSpec {
    fn default() -> Self {
        Self::Cnn {
            layers: 3,
            channels: 16,
            kernel: 3,
            slope: 0.01,
            bias: false,
            residual: true,
            zero_last: false,
        }
    }
}

impl NetSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Spec {
            spec: spec.to_string(),
            reason: reason.to_string(),
            grammar: NET_GRAMMAR,
        };
        let parts: Vec<&str> = spec.trim().split(':').collect();
        let (head, rest) = (parts[0], &parts[1..]);
        let (group, rest) = if head == "gcnn" {
            let g = rest.first().ok_or_else(|| bad("missing group"))?;
            (Some(g.to_string()), &rest[1..])
        } else {
            (None, rest)
        };
        let mut kv = BTreeMap::new();
        let mut flags = Vec::new();
        for p in rest {
            match p.split_once('=') {
                Some((k, v)) => {
                    kv.insert(k, v);
                }
                None => flags.push(*p),
            }
        }
        let int = |k: &str, d: usize| -> Result<usize> {
            kv.get(k).map_or(Ok(d), |v| v.parse().map_err(|_| bad(&format!("`{k}` must be an integer"))))
        };
        let float = |k: &str, d: f64| -> Result<f64> {
            kv.get(k).map_or(Ok(d), |v| v.parse().map_err(|_| bad(&format!("`{k}` must be a number"))))
        };
        let known_flags = ["bias", "noresidual", "zero-last"];
        if let Some(f) = flags.iter().find(|f| !known_flags.contains(f)) {
            return Err(bad(&format!("unknown flag `{f}`")));
        }
        let has = |f: &str| flags.contains(&f);
        let net = match head {
            "identity" => Self::Identity,
            "soft" => Self::SoftThreshold { t: float("t", 0.0)? },
            "cnn" => Self::Cnn {
                layers: int("layers", 3)?,
                channels: int("channels", 16)?,
                kernel: int("k", 3)?,
                slope: float("slope", 0.01)?,
                bias: has("bias"),
                residual: !has("noresidual"),
                zero_last: has("zero-last"),
            },
            "gcnn" => Self::GroupCnn {
                group: group.expect("checked"),
                layers: int("layers", 3)?,
                channels: int("channels", 8)?,
                kernel: int("k", 3)?,
                slope: float("slope", 0.01)?,
                residual: !has("noresidual"),
                zero_last: has("zero-last"),
            },
            _ => return Err(bad("unknown network")),
        };
        match net {
            Self::Cnn { layers: 0, .. } | Self::GroupCnn { layers: 0, .. } => Err(bad("a network needs at least one layer")),
            Self::GroupCnn { layers: 1, .. } => Err(bad("a group network needs at least two layers")),
            _ => Ok(net),
        }
    }

    /// Parameter names and shapes for `c_in` input channels.
    fn param_shapes(&self, c_in: usize, pg: Option<&PointGroup>) -> Vec<(String, Vec<usize>)> {
        match self {
            Self::Identity | Self::SoftThreshold { .. } => Vec::new(),
            Self::Cnn {
                layers,
                channels,
                kernel,
                bias,
                ..
            } => {
                let mut out = Vec::new();
                let mut c = c_in;
                for l in 0..*layers {
                    let co = if l + 1 == *layers { 1 } else { *channels };
                    out.push((format!("conv{l}.weight"), vec![co, c, *kernel, *kernel]));
                    if *bias {
                        out.push((format!("conv{l}.bias"), vec![co]));
                    }
                    c = co;
                }
                out
            }
            Self::GroupCnn {
                layers,
                channels,
                kernel,
                ..
            } => {
                let p = pg.map_or(1, PointGroup::order);
                let mut out = vec![("lift.weight".to_string(), vec![*channels, c_in, *kernel, *kernel])];
                for l in 1..*layers {
                    let co = if l + 1 == *layers { 1 } else { *channels };
                    out.push((format!("gconv{l}.weight"), vec![co, *channels, p, *kernel, *kernel]));
                }
                out
            }
        }
    }

    fn init_param<T: Scalar>(&self, name: &str, shape: &[usize], last: bool, rng: &mut rng::Rng) -> Tensor<T> {
        let (slope, zero_last) = match self {
            Self::Cnn { slope, zero_last, .. } | Self::GroupCnn { slope, zero_last, .. } => (*slope, *zero_last),
            _ => (0.0, false),
        };
        if name.ends_with("bias") || (last && zero_last) {
            return Tensor::zeros(shape);
        }
        let fan_in: usize = shape[1..].iter().product();
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        rng::normal(rng, shape, gain / (fan_in as f64).sqrt())
    }

    fn forward<'g, T: Scalar>(&self, x: &Var<'g, T>, params: &[Var<'g, T>], pg: Option<&PointGroup>) -> Result<Var<'g, T>> {
        let residual_of = |x: &Var<'g, T>, out: Var<'g, T>| -> Result<Var<'g, T>> {
            let s = x.shape();
            let first = if s[0] == 1 { *x } else { x.linear(Arc::new(FirstChannel { shape: s }))? };
            first.add(&out)
        };
        match self {
            Self::Identity => {
                let s = x.shape();
                if s[0] == 1 {
                    Ok(*x)
                } else {
                    x.linear(Arc::new(FirstChannel { shape: s }))
                }
            }
            Self::SoftThreshold { t } => x.soft_threshold(T::lit(*t)),
            Self::Cnn {
                layers,
                slope,
                bias,
                residual,
                ..
            } => {
                let per = if *bias { 2 } else { 1 };
                let mut h = *x;
                for l in 0..*layers {
                    h = h.conv2d(&params[l * per], Padding::Circular)?;
                    if *bias {
                        let s = h.shape();
                        h = h.add(&params[l * per + 1].linear(Arc::new(ChannelBroadcast { shape: s }))?)?;
                    }
                    if l + 1 < *layers {
                        h = h.leaky_relu(T::lit(*slope))?;
                    }
                }
                if *residual {
                    residual_of(x, h)
                } else {
                    Ok(h)
                }
            }
            Self::GroupCnn {
                layers,
                slope,
                residual,
                ..
            } => {
                let pg = pg.expect("group network has a point group");
                let mut h = nn::graph::lift(x, &params[0], pg, Padding::Circular)?;
                for l in 1..*layers {
                    h = h.leaky_relu(T::lit(*slope))?;
                    h = nn::graph::group_conv(&h, &params[l], pg, Padding::Circular)?;
                }
                let out = nn::graph::project_mean(&h, pg)?;
                if *residual {
                    residual_of(x, out)
                } else {
                    Ok(out)
                }
            }
        }
    }

    /// Point group of a group network on an `h x w` grid.
    fn point_group(&self, h: usize, w: usize) -> Result<Option<PointGroup>> {
        match self {
            Self::GroupCnn { group, .. } => {
                let point = group.split('+').next().unwrap_or(group);
                let action = ImageAction::parse(point, h, w)?;
                Ok(Some(PointGroup::from_action(&action)?))
            }
            _ => Ok(None),
        }
    }
}

impl fmt::Display for NetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "identity"),
            Self::SoftThreshold { t } => write!(f, "soft:t={t}"),
            Self::Cnn {
                layers,
                channels,
                kernel,
                slope,
                bias,
                residual,
                zero_last,
            } => {
                write!(f, "cnn:layers={layers}:channels={channels}:k={kernel}:slope={slope}")?;
                if *bias {
                    write!(f, ":bias")?;
                }
                if !residual {
                    write!(f, ":noresidual")?;
                }
                if *zero_last {
                    write!(f, ":zero-last")?;
                }
                Ok(())
            }
            Self::GroupCnn {
                group,
                layers,
                channels,
                kernel,
                slope,
                residual,
                zero_last,
            } => {
                write!(f, "gcnn:{group}:layers={layers}:channels={channels}:k={kernel}:slope={slope}")?;
                if !residual {
                    write!(f, ":noresidual")?;
                }
                if *zero_last {
                    write!(f, ":zero-last")?;
                }
                Ok(())
            }
        }
    }
}

/// First channel of a `[C, H, W]` value.
struct FirstChannel {
    shape: Vec<usize>,
}

impl<T: Scalar> LinearMap<T> for FirstChannel {
    fn in_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![1, self.shape[1], self.shape[2]]
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        x[..self.shape[1] * self.shape[2]].to_vec()
    }
    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        let mut out = y.to_vec();
        out.resize(self.shape.iter().product(), T::zero());
        out
    }
    fn name(&self) -> &'static str {
        "first_channel"
    }
}

/// `[C] -> [C, H, W]`, constant over each plane.
struct ChannelBroadcast {
    shape: Vec<usize>,
}

impl<T: Scalar> LinearMap<T> for ChannelBroadcast {
    fn in_shape(&self) -> Vec<usize> {
        vec![self.shape[0]]
    }
    fn out_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        let plane = self.shape[1] * self.shape[2];
        x.iter().flat_map(|&v| std::iter::repeat_n(v, plane)).collect()
    }
    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        let plane = self.shape[1] * self.shape[2];
        y.chunks(plane).map(|c| c.iter().copied().sum()).collect()
    }
    fn name(&self) -> &'static str {
        "channel_broadcast"
    }
}

/// Initial estimate fed to the network or iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// `A^+ y`.
    PseudoInverse,
    /// `A^T y`.
    Adjoint,
    Zero,
}

/// How an unrolled iteration combines `u` and `grad E(u)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixKind {
    /// `net(u - tau_k grad E(u))`.
    Fixed,
    /// `net([u, grad E(u)])` with a two-channel input.
    Learned,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelKind {
    Direct { net: NetSpec },
    Unrolled {
        iters: usize,
        net: NetSpec,
        tied: bool,
        mix: MixKind,
        /// Initial value of every `tau_k`.
        step: f64,
        learn_step: bool,
    },
    Classic { prox: ProxSpec, step: f64, iters: usize },
}

/// Full model description; round-trips through its string form.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub init: InitKind,
}

pub const MODEL_GRAMMAR: &str = "kind=direct;net=<net> | kind=unrolled;iters=<K>;net=<net>[;tied=true][;mix=fixed|learned][;step=<tau>][;learn_step=false] | kind=classic;prox=<identity|l1:lambda>;step=<tau>;iters=<K>   (optional ;init=pinv|adjoint|zero)";

impl ModelSpec {
    pub fn direct(net: NetSpec) -> Self {
        Self {
            kind: ModelKind::Direct { net },
            init: InitKind::PseudoInverse,
        }
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Spec {
            spec: spec.to_string(),
            reason: reason.to_string(),
            grammar: MODEL_GRAMMAR,
        };
        let mut kv = BTreeMap::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied();
        let boolean = |k: &str, d: bool| -> Result<bool> {
            match get(k) {
                None => Ok(d),
                Some("true") => Ok(true),
                Some("false") => Ok(false),
                Some(_) => Err(bad(&format!("`{k}` must be true or false"))),
            }
        };
        let num = |k: &str, d: Option<f64>| -> Result<f64> {
            match get(k) {
                Some(v) => v.parse().map_err(|_| bad(&format!("`{k}` must be a number"))),
                None => d.ok_or_else(|| bad(&format!("missing `{k}`"))),
            }
        };
        let net = || get("net").map_or(Ok(NetSpec::default()), NetSpec::parse);
        let init = match get("init") {
            None | Some("pinv") => InitKind::PseudoInverse,
            Some("adjoint") => InitKind::Adjoint,
            Some("zero") => InitKind::Zero,
            Some(_) => return Err(bad("init must be pinv, adjoint or zero")),
        };
        let kind = match get("kind") {
            Some("direct") | None => ModelKind::Direct { net: net()? },
            Some("unrolled") => ModelKind::Unrolled {
                iters: num("iters", Some(5.0))? as usize,
                net: net()?,
                tied: boolean("tied", false)?,
                mix: match get("mix") {
                    None | Some("fixed") => MixKind::Fixed,
                    Some("learned") => MixKind::Learned,
                    Some(_) => return Err(bad("mix must be fixed or learned")),
                },
                step: num("step", Some(1.0))?,
                learn_step: boolean("learn_step", true)?,
            },
            Some("classic") => ModelKind::Classic {
                prox: ProxSpec::parse(get("prox").unwrap_or("identity"))?,
                step: num("step", None)?,
                iters: num("iters", None)? as usize,
            },
            Some(_) => return Err(bad("unknown model kind")),
        };
        Ok(Self { kind, init })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ModelKind::Direct { net } => write!(f, "kind=direct;net={net}")?,
            ModelKind::Unrolled {
                iters,
                net,
                tied,
                mix,
                step,
                learn_step,
            } => write!(
                f,
                "kind=unrolled;iters={iters};net={net};tied={tied};mix={};step={step};learn_step={learn_step}",
                if *mix == MixKind::Fixed { "fixed" } else { "learned" }
            )?,
            ModelKind::Classic { prox, step, iters } => write!(f, "kind=classic;prox={prox};step={step};iters={iters}")?,
        }
        let init = match self.init {
            InitKind::PseudoInverse => "pinv",
            InitKind::Adjoint => "adjoint",
            InitKind::Zero => "zero",
        };
        write!(f, ";init={init}")
    }
}

/// Parameter block of one network application.
#[derive(Clone, Debug)]
struct Block {
    /// Index of the learnable step, if any.
    step: Option<usize>,
    first: usize,
    count: usize,
}

/// A reconstruction function `f_theta(y)` with its parameters.
#[derive(Clone, Debug)]
pub struct ReconstructionModel<T: Scalar = f64> {
    spec: ModelSpec,
    seed: u64,
    grid: (usize, usize),
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    blocks: Vec<Block>,
    point_group: Option<PointGroup>,
}

impl<T: Scalar> ReconstructionModel<T> {
    /// Builds and initializes a model for `h x w` images.
    pub fn new(spec: ModelSpec, h: usize, w: usize, seed: u64) -> Result<Self> {
        let (net, applications, c_in, step) = match &spec.kind {
            ModelKind::Direct { net } => (net.clone(), 1, 1, None),
            ModelKind::Unrolled {
                iters,
                net,
                tied,
                mix,
                step,
                learn_step,
            } => {
                let c_in = if *mix == MixKind::Learned { 2 } else { 1 };
                let tau = (*learn_step && *mix == MixKind::Fixed).then_some(*step);
                (net.clone(), if *tied { (*iters).min(1) } else { *iters }, c_in, tau)
            }
            ModelKind::Classic { .. } => (NetSpec::Identity, 0, 1, None),
        };
        let point_group = net.point_group(h, w)?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut blocks = Vec::new();
        for k in 0..applications {
            let mut r = rng::stream(seed, rng::substream(0x6e6e, k as u64));
            let prefix = if applications > 1 { format!("iter{k}.") } else { String::new() };
            let step_idx = step.map(|tau| {
                names.push(format!("{prefix}step"));
                params.push(Tensor::scalar(T::lit(tau)));
                params.len() - 1
            });
            let shapes = net.param_shapes(c_in, point_group.as_ref());
            let first = params.len();
            let last = shapes.len().saturating_sub(1);
            for (i, (name, shape)) in shapes.iter().enumerate() {
                params.push(net.init_param(name, shape, i == last, &mut r));
                names.push(format!("{prefix}{name}"));
            }
            blocks.push(Block {
                step: step_idx,
                first,
                count: shapes.len(),
            });
        }
        Ok(Self {
            spec,
            seed,
            grid: (h, w),
            names,
            params,
            blocks,
            point_group,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "model has {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (new, old) in params.iter().zip(&self.params) {
            if new.shape() != old.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_params",
                    left: new.shape().to_vec(),
                    right: old.shape().to_vec(),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Number of network applications per forward pass.
    pub fn net_applications(&self) -> usize {
        match &self.spec.kind {
            ModelKind::Direct { .. } => 1,
            ModelKind::Unrolled { iters, .. } => *iters,
            ModelKind::Classic { .. } => 0,
        }
    }

    fn block(&self, k: usize) -> &Block {
        &self.blocks[k.min(self.blocks.len() - 1)]
    }

    /// Registers the parameters as graph leaves, in order.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> Vec<Var<'g, T>> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// `f_theta(y)` recorded on `g`, with `params` from [`Self::bind`].
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        params: &[Var<'g, T>],
        op: &Arc<LinearOperator<T>>,
        y: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        if (op.image_shape()[1], op.image_shape()[2]) != self.grid {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                left: op.image_shape().to_vec(),
                right: vec![1, self.grid.0, self.grid.1],
            });
        }
        if y.len() != op.m() {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                left: y.shape(),
                right: vec![op.m()],
            });
        }
        let y = if y.shape() == [op.m()] { *y } else { y.reshape(&[op.m()])? };
        let dyn_op: Arc<dyn LinearMap<T>> = op.clone();
        let u0 = match self.spec.init {
            InitKind::PseudoInverse => y.linear(Arc::new(PinvMap::new(op.clone())?))?,
            InitKind::Adjoint => y.linear_adjoint(dyn_op.clone())?,
            InitKind::Zero => g.constant(Tensor::zeros(&op.image_shape())),
        };
        let grad_e = |u: &Var<'g, T>| -> Result<Var<'g, T>> { u.linear(dyn_op.clone())?.sub(&y)?.linear_adjoint(dyn_op.clone()) };
        match &self.spec.kind {
            ModelKind::Direct { net } => {
                let b = self.block(0);
                net.forward(&u0, &params[b.first..b.first + b.count], self.point_group.as_ref())
            }
            ModelKind::Unrolled { iters, net, mix, step, .. } => {
                let mut u = u0;
                for k in 0..*iters {
                    let b = self.block(k);
                    let theta = &params[b.first..b.first + b.count];
                    let grad = grad_e(&u)?;
                    let input = match mix {
                        MixKind::Fixed => {
                            let tau = match b.step {
                                Some(i) => params[i],
                                None => g.constant(Tensor::scalar(T::lit(*step))),
                            };
                            u.sub(&grad.mul(&tau)?)?
                        }
                        MixKind::Learned => Var::concat(&[u, grad])?,
                    };
                    u = net.forward(&input, theta, self.point_group.as_ref())?;
                }
                Ok(u)
            }
            ModelKind::Classic { prox, step, iters } => {
                let tau = T::lit(*step);
                let mut u = u0;
                for _ in 0..*iters {
                    let z = u.sub(&grad_e(&u)?.scale(tau)?)?;
                    u = match prox {
                        ProxSpec::Identity => z,
                        ProxSpec::SoftThreshold { lambda } => z.soft_threshold(tau * T::lit(*lambda))?,
                    };
                }
                Ok(u)
            }
        }
    }

    /// Evaluates `f_theta(y)` without recording gradients.
    pub fn reconstruct(&self, op: &Arc<LinearOperator<T>>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let params: Vec<_> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let yv = g.constant(y.clone());
        Ok(self.forward(&g, &params, op, &yv)?.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prox_examples() {
        let s = ProxSpec::SoftThreshold { lambda: 1.0 };
        let u = Tensor::from_slice(&[2.0, -0.5, -3.0]);
        assert_eq!(prox_eval(&s, &u, 1.0).unwrap().data(), &[1.0, 0.0, -2.0]);
        let z = ProxSpec::SoftThreshold { lambda: 0.0 };
        assert_eq!(prox_eval(&z, &u, 1.0).unwrap(), u);
        assert!(prox_eval(&s, &u, 0.0).is_err());
    }

    #[test]
    fn soft_threshold_matches_grid_search() {
        for &u in &[2.0, -0.5, 0.3, -1.7] {
            let best = (-4000..=4000)
                .map(|i| i as f64 * 1e-3)
                .min_by(|a, b| {
                    let f = |v: f64| 0.5 * (u - v) * (u - v) + v.abs();
                    f(*a).partial_cmp(&f(*b)).unwrap()
                })
                .unwrap();
            let p = prox_eval(&ProxSpec::SoftThreshold { lambda: 1.0 }, &Tensor::from_slice(&[u]), 1.0).unwrap();
            assert!((p.data()[0] - best).abs() <= 1e-3);
        }
    }

    #[test]
    fn pgd_identity_one_step() {
        let op = LinearOperator::<f64>::identity(2, 2);
        let y = Tensor::from_slice(&[1.0, -2.0, 3.0, 0.5]);
        let u0 = Tensor::zeros(&[1, 2, 2]);
        let r = pgd_solve(&op, &y, &ProxSpec::Identity, 1.0, 1, &u0).unwrap();
        assert_eq!(r.u.data(), y.data());
        let r0 = pgd_solve(&op, &y, &ProxSpec::Identity, 1.0, 0, &u0).unwrap();
        assert_eq!(r0.u, u0);
        let r = pgd_solve(&op, &y, &ProxSpec::Identity, 3.0, 1, &u0).unwrap();
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn spec_round_trips() {
        for s in [
            "kind=direct;net=cnn:layers=3:channels=16:k=3:slope=0.01;init=pinv",
            "kind=unrolled;iters=4;net=gcnn:c4:layers=2:channels=4:k=3:slope=0.01:zero-last;tied=true;mix=learned;step=0.5;learn_step=true;init=adjoint",
            "kind=classic;prox=l1:0.1;step=0.9;iters=10;init=zero",
        ] {
            assert_eq!(ModelSpec::parse(s).unwrap().to_string(), s);
        }
        assert!(ModelSpec::parse("kind=magic").unwrap_err().to_string().contains("Accepted grammar"));
        assert!(NetSpec::parse("cnn:layers=0").is_err());
    }

    #[test]
    fn unrolled_counts_and_ties() {
        let net = NetSpec::parse("cnn:layers=2:channels=4").unwrap();
        let spec = |tied| ModelSpec {
            kind: ModelKind::Unrolled {
                iters: 3,
                net: net.clone(),
                tied,
                mix: MixKind::Fixed,
                step: 0.5,
                learn_step: true,
            },
            init: InitKind::PseudoInverse,
        };
        let untied = ReconstructionModel::<f64>::new(spec(false), 4, 4, 1).unwrap();
        let tied = ReconstructionModel::<f64>::new(spec(true), 4, 4, 1).unwrap();
        assert_eq!(untied.params().len(), 3 * tied.params().len());
        assert_eq!(untied.net_applications(), 3);
        assert_eq!(tied.net_applications(), 3);
    }
}
