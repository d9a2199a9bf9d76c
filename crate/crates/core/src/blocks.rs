//! MixFaceNet building blocks: MixConv, squeeze-and-excitation, the
//! inverted-residual MixConv block, the head and the embedding stage.
//!
//! Every layer holds only [`ParamId`]s; values live in a [`ParamStore`] and
//! are bound to graph variables by a [`Ctx`] for one forward pass.

use std::cell::RefCell;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::ops::norm::{self, BnSaved, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::ops::{BnMode, ConvParams};
use crate::params::{Initializer, ParamId, ParamKind, ParamStore};
use crate::tensor::{Element, Shape, Tensor};

pub const SHUFFLE_GROUPS: usize = 2;

/// Per-pass binding of stored parameters to graph variables.
pub struct Ctx<'a, T: Element> {
    pub graph: &'a Graph<T>,
    store: &'a ParamStore<T>,
    vars: Vec<Var<T>>,
    pub mode: BnMode,
    bn_stats: RefCell<Vec<BnRecord<T>>>,
}

pub struct BnRecord<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub count: usize,
    pub saved: BnSaved<T>,
}

impl<'a, T: Element> Ctx<'a, T> {
    /// Trainable parameters become leaves when `graph` records.
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>, mode: BnMode) -> Self {
        let vars = store
            .entries()
            .iter()
            .map(|e| {
                if e.kind.trainable() {
                    graph.leaf(e.tensor.clone())
                } else {
                    graph.constant(e.tensor.clone())
                }
            })
            .collect();
        Ctx {
            graph,
            store,
            vars,
            mode,
            bn_stats: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Batch statistics gathered by train-mode batch norms, in call order.
    pub fn take_bn_stats(&self) -> Vec<BnRecord<T>> {
        std::mem::take(&mut self.bn_stats.borrow_mut())
    }

    /// Gradient per trainable parameter (zeros where unused).
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.store
            .ids()
            .filter(|&id| self.store.entry(id).kind.trainable())
            .map(|id| (id, grads.get_or_zeros(&self.vars[id.0])))
            .collect()
    }
}

/// Applies recorded running-stat updates to `store`.
pub fn apply_bn_updates<T: Element>(store: &mut ParamStore<T>, records: &[BnRecord<T>]) {
    for r in records {
        let mut mean = store.get(r.running_mean).clone();
        let mut var = store.get(r.running_var).clone();
        norm::update_running_stats(&r.saved, r.count, T::from_f64c(r.momentum), &mut mean, &mut var);
        *store.get_mut(r.running_mean) = mean;
        *store.get_mut(r.running_var) = var;
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: ConvParams,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        params: ConvParams,
        bias: bool,
    ) -> Result<Self> {
        if in_channels % params.groups != 0 || out_channels % params.groups != 0 {
            return Err(Error::Divisibility(format!(
                "{name}: channels {in_channels}->{out_channels} not divisible by groups {}",
                params.groups
            )));
        }
        let wshape = Shape::new(
            out_channels,
            in_channels / params.groups,
            params.kernel.0,
            params.kernel.1,
        );
        let weight = store.register(format!("{name}.weight"), ParamKind::Weight, init.kaiming(wshape))?;
        let bias = if bias {
            Some(store.register(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::vector(vec![T::zero(); out_channels]),
            )?)
        } else {
            None
        };
        Ok(Conv {
            name: name.to_string(),
            weight,
            bias,
            params,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<T: Element>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().c != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {}",
                self.name,
                self.in_channels,
                x.shape().c
            )));
        }
        cx.graph.conv2d(
            x,
            cx.param(self.weight),
            self.bias.map(|b| cx.param(b)),
            self.params,
        )
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let (h, w) = self.params.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels, h, w))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let ones = || Tensor::vector(vec![T::one(); channels]);
        let zeros = || Tensor::vector(vec![T::zero(); channels]);
        Ok(BatchNorm {
            name: name.to_string(),
            gamma: store.register(format!("{name}.gamma"), ParamKind::BnGamma, ones())?,
            beta: store.register(format!("{name}.beta"), ParamKind::BnBeta, zeros())?,
            running_mean: store.register(format!("{name}.running_mean"), ParamKind::BnRunningMean, zeros())?,
            running_var: store.register(format!("{name}.running_var"), ParamKind::BnRunningVar, ones())?,
            channels,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    pub fn forward<T: Element>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (y, saved) = cx.graph.batch_norm(
            x,
            cx.param(self.gamma),
            cx.param(self.beta),
            cx.store.get(self.running_mean),
            cx.store.get(self.running_var),
            T::from_f64c(self.eps),
            cx.mode,
        )?;
        if cx.mode == BnMode::Train {
            let s = x.shape();
            cx.bn_stats.borrow_mut().push(BnRecord {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: self.momentum,
                count: s.n * s.plane(),
                saved,
            });
        }
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActKind {
    Swish,
    Prelu,
}

impl ActKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActKind::Swish => "swish",
            ActKind::Prelu => "prelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "swish" => Ok(ActKind::Swish),
            "prelu" => Ok(ActKind::Prelu),
            other => Err(Error::Invalid(format!("unknown activation {other:?}"))),
        }
    }
}

pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug)]
pub enum Activation {
    Swish,
    Prelu { alpha: ParamId, channels: usize },
}

impl Activation {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, kind: ActKind, channels: usize) -> Result<Self> {
        Ok(match kind {
            ActKind::Swish => Activation::Swish,
            ActKind::Prelu => Activation::Prelu {
                alpha: store.register(
                    format!("{name}.alpha"),
                    ParamKind::PreluAlpha,
                    Tensor::vector(vec![T::from_f64c(PRELU_INIT); channels]),
                )?,
                channels,
            },
        })
    }

    pub fn kind(&self) -> ActKind {
        match self {
            Activation::Swish => ActKind::Swish,
            Activation::Prelu { .. } => ActKind::Prelu,
        }
    }

    pub fn forward<T: Element>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Activation::Swish => Ok(cx.graph.swish(x)),
            Activation::Prelu { alpha, .. } => cx.graph.prelu(x, cx.param(*alpha)),
        }
    }
}

/// Kernel sizes and the channel partition of a mixed depthwise convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixConvSpec {
    pub kernel_sizes: Vec<usize>,
    pub stride: usize,
    pub channel_split: Vec<usize>,
}

/// Equal split; the remainder goes to the first group.
pub fn split_channels(channels: usize, groups: usize) -> Vec<usize> {
    let mut split = vec![channels / groups; groups];
    split[0] += channels - split.iter().sum::<usize>();
    split
}

impl MixConvSpec {
    pub fn new(kernel_sizes: Vec<usize>, stride: usize, channels: usize) -> Result<Self> {
        if kernel_sizes.is_empty() {
            return Err(Error::Invalid("mixconv needs at least one kernel size".into()));
        }
        let channel_split = split_channels(channels, kernel_sizes.len());
        let spec = MixConvSpec {
            kernel_sizes,
            stride,
            channel_split,
        };
        spec.validate(channels)?;
        Ok(spec)
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kernel_sizes.len() != self.channel_split.len() {
            return Err(Error::Invalid(format!(
                "mixconv has {} kernel sizes but {} channel groups",
                self.kernel_sizes.len(),
                self.channel_split.len()
            )));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Invalid(format!("mixconv kernel size {k} is even")));
        }
        if self.channel_split.iter().any(|&c| c == 0) {
            return Err(Error::Invalid(format!(
                "mixconv split {:?} has an empty group",
                self.channel_split
            )));
        }
        let total: usize = self.channel_split.iter().sum();
        if total != channels {
            return Err(Error::Shape(format!(
                "mixconv split {:?} sums to {total}, input has {channels} channels",
                self.channel_split
            )));
        }
        if self.stride == 0 {
            return Err(Error::Invalid("mixconv stride must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channel_split.iter().sum()
    }

    pub fn group_params(&self, group: usize) -> ConvParams {
        let k = self.kernel_sizes[group];
        ConvParams::new(k, self.stride, (k - 1) / 2, self.channel_split[group])
    }

    /// Stored depthwise weights: sum of `c_i * k_i^2`.
    pub fn weight_count(&self) -> usize {
        self.kernel_sizes
            .iter()
            .zip(&self.channel_split)
            .map(|(k, c)| c * k * k)
            .sum()
    }
}

/// Mixed depthwise convolution over graph variables.
pub fn mixconv_var<T: Element>(
    graph: &Graph<T>,
    input: &Var<T>,
    kernels: &[&Var<T>],
    spec: &MixConvSpec,
) -> Result<Var<T>> {
    spec.validate(input.shape().c)?;
    if kernels.len() != spec.kernel_sizes.len() {
        return Err(Error::Invalid(format!(
            "mixconv got {} kernels for {} groups",
            kernels.len(),
            spec.kernel_sizes.len()
        )));
    }
    if kernels.len() == 1 {
        return graph.conv2d(input, kernels[0], None, spec.group_params(0));
    }
    let mut start = 0;
    let mut outs = Vec::with_capacity(kernels.len());
    for (i, w) in kernels.iter().enumerate() {
        let c = spec.channel_split[i];
        let part = graph.slice_channels(input, start, c)?;
        outs.push(graph.conv2d(&part, w, None, spec.group_params(i))?);
        start += c;
    }
    graph.concat_channels(&outs)
}

/// Mixed depthwise convolution on plain tensors.
pub fn mixconv<T: Element>(input: &Tensor<T>, kernels: &[Tensor<T>], spec: &MixConvSpec) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let x = g.constant(input.clone());
    let ws: Vec<Var<T>> = kernels.iter().map(|k| g.constant(k.clone())).collect();
    let refs: Vec<&Var<T>> = ws.iter().collect();
    Ok(mixconv_var(&g, &x, &refs, spec)?.into_value())
}

#[derive(Clone, Debug)]
pub struct MixConv {
    pub spec: MixConvSpec,
    pub kernels: Vec<ParamId>,
}

impl MixConv {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        spec: MixConvSpec,
    ) -> Result<Self> {
        let kernels = spec
            .kernel_sizes
            .iter()
            .zip(&spec.channel_split)
            .map(|(&k, &c)| {
                store.register(
                    format!("{name}.k{k}.weight"),
                    ParamKind::Weight,
                    init.kaiming(Shape::new(c, 1, k, k)),
                )
            })
            .collect::<Result<_>>()?;
        Ok(MixConv { spec, kernels })
    }

    pub fn forward<T: Element>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let ws: Vec<&Var<T>> = self.kernels.iter().map(|&k| cx.param(k)).collect();
        mixconv_var(cx.graph, x, &ws, &self.spec)
    }
}

/// Squeeze-and-excitation with 1x1 convolutions (with bias) as the
/// bottleneck transform.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Conv,
    pub act: Activation,
    pub expand: Conv,
}

/// Weights of a squeeze-and-excitation gate on plain tensors.
pub struct SeWeights<'a, T> {
    pub reduce_weight: &'a Tensor<T>,
    pub reduce_bias: &'a Tensor<T>,
    pub expand_weight: &'a Tensor<T>,
    pub expand_bias: &'a Tensor<T>,
    /// `None` for swish, per-channel alphas for PReLU.
    pub prelu_alpha: Option<&'a Tensor<T>>,
}

pub fn se_var<T: Element>(
    graph: &Graph<T>,
    x: &Var<T>,
    reduce: (&Var<T>, &Var<T>),
    expand: (&Var<T>, &Var<T>),
    prelu_alpha: Option<&Var<T>>,
) -> Result<Var<T>> {
    let c = x.shape().c;
    let r = reduce.0.shape();
    let e = expand.0.shape();
    if r.c != c || r.h != 1 || r.w != 1 || e.n != c || e.c != r.n || e.h != 1 || e.w != 1 {
        return Err(Error::Shape(format!(
            "squeeze-excite weights {r} / {e} do not fit {c} channels"
        )));
    }
    let pooled = graph.global_avg_pool(x)?;
    let z = graph.conv2d(&pooled, reduce.0, Some(reduce.1), ConvParams::pointwise(1))?;
    let z = match prelu_alpha {
        Some(a) => graph.prelu(&z, a)?,
        None => graph.swish(&z),
    };
    let z = graph.conv2d(&z, expand.0, Some(expand.1), ConvParams::pointwise(1))?;
    let gate = graph.sigmoid(&z);
    graph.scale_channels(x, &gate)
}

pub fn se_block<T: Element>(input: &Tensor<T>, w: &SeWeights<'_, T>) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let c = |t: &Tensor<T>| g.constant(t.clone());
    let x = c(input);
    let (rw, rb, ew, eb) = (c(w.reduce_weight), c(w.reduce_bias), c(w.expand_weight), c(w.expand_bias));
    let alpha = w.prelu_alpha.map(c);
    Ok(se_var(&g, &x, (&rw, &rb), (&ew, &eb), alpha.as_ref())?.into_value())
}

impl SqueezeExcite {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        reduced: usize,
        act: ActKind,
    ) -> Result<Self> {
        let reduce = Conv::new(store, init, &format!("{name}.reduce"), channels, reduced, ConvParams::pointwise(1), true)?;
        let act = Activation::new(store, &format!("{name}.act"), act, reduced)?;
        let expand = Conv::new(store, init, &format!("{name}.expand"), reduced, channels, ConvParams::pointwise(1), true)?;
        Ok(SqueezeExcite { reduce, act, expand })
    }

    pub fn reduced(&self) -> usize {
        self.reduce.out_channels
    }

    pub fn forward<T: Element>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let p = |id: Option<ParamId>| cx.param(id.expect("SE convs carry a bias"));
        let alpha = match &self.act {
            Activation::Swish => None,
            Activation::Prelu { alpha, .. } => Some(cx.param(*alpha)),
        };
        se_var(
            cx.graph,
            x,
            (cx.param(self.reduce.weight), p(self.reduce.bias)),
            (cx.param(self.expand.weight), p(self.expand.bias)),
            alpha,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ShufflePlacement {
    /// Last op of the block, after the residual addition.
    #[default]
    AfterBlock,
    /// Directly after the depthwise MixConv.
    AfterMixConv,
}

impl ShufflePlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            ShufflePlacement::AfterBlock => "after_block",
            ShufflePlacement::AfterMixConv => "after_mixconv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "after_block" => Ok(ShufflePlacement::AfterBlock),
            "after_mixconv" => Ok(ShufflePlacement::AfterMixConv),
            other => Err(Error::Invalid(format!("unknown shuffle placement {other:?}"))),
        }
    }
}

/// One inverted-residual MixConv block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub in_channels: usize,
    /// Width after the 1x1 expansion; equal to `in_channels` means no
    /// expansion convolution.
    pub expansion_channels: usize,
    pub out_channels: usize,
    pub kernel_sizes: Vec<usize>,
    pub stride: usize,
    /// Groups of the 1x1 expansion convolution.
    pub expand_groups: usize,
    /// Groups of the 1x1 projection convolution.
    pub project_groups: usize,
    pub use_se: bool,
    /// SE bottleneck width is `expansion_channels / se_reduction`.
    pub se_reduction: usize,
    pub activation: ActKind,
    pub shuffle: bool,
    pub shuffle_placement: ShufflePlacement,
    pub residual: bool,
}

impl BlockSpec {
    pub fn has_expansion(&self) -> bool {
        self.expansion_channels != self.in_channels
    }

    pub fn se_channels(&self) -> usize {
        (self.expansion_channels / self.se_reduction.max(1)).max(1)
    }

    pub fn mixconv_spec(&self) -> Result<MixConvSpec> {
        MixConvSpec::new(self.kernel_sizes.clone(), self.stride, self.expansion_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.residual && (self.stride != 1 || self.in_channels != self.out_channels) {
            return Err(Error::Shape(format!(
                "residual block needs stride 1 and equal channels, got stride {} and {}->{}",
                self.stride, self.in_channels, self.out_channels
            )));
        }
        if self.use_se && self.se_reduction == 0 {
            return Err(Error::Invalid("se_reduction must be positive".into()));
        }
        for (what, c, g) in [
            ("expansion", self.in_channels, self.expand_groups),
            ("expansion", self.expansion_channels, self.expand_groups),
            ("projection", self.expansion_channels, self.project_groups),
            ("projection", self.out_channels, self.project_groups),
        ] {
            if g == 0 || c % g != 0 {
                return Err(Error::Divisibility(format!(
                    "{what} convolution: {c} channels not divisible by {g} groups"
                )));
            }
        }
        if self.shuffle {
            let c = match self.shuffle_placement {
                ShufflePlacement::AfterBlock => self.out_channels,
                ShufflePlacement::AfterMixConv => self.expansion_channels,
            };
            if c % SHUFFLE_GROUPS != 0 {
                return Err(Error::Divisibility(format!(
                    "channel shuffle: {c} channels not divisible by {SHUFFLE_GROUPS}"
                )));
            }
        }
        self.mixconv_spec().map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct MixConvBlock {
    pub name: String,
    pub spec: BlockSpec,
    pub expand: Option<(Conv, BatchNorm, Activation)>,
    pub mixconv: MixConv,
    pub dw_bn: BatchNorm,
    pub dw_act: Activation,
    pub se: Option<SqueezeExcite>,
    pub project: Conv,
    pub project_bn: BatchNorm,
}

impl MixConvBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        spec: BlockSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let ex = spec.expansion_channels;
        let expand = if spec.has_expansion() {
            Some((
                Conv::new(store, init, &format!("{name}.expand"), spec.in_channels, ex, ConvParams::pointwise(spec.expand_groups), false)?,
                BatchNorm::new(store, &format!("{name}.expand_bn"), ex)?,
                Activation::new(store, &format!("{name}.expand_act"), spec.activation, ex)?,
            ))
        } else {
            None
        };
        let mixconv = MixConv::new(store, init, &format!("{name}.mixconv"), spec.mixconv_spec()?)?;
        let dw_bn = BatchNorm::new(store, &format!("{name}.mixconv_bn"), ex)?;
        let dw_act = Activation::new(store, &format!("{name}.mixconv_act"), spec.activation, ex)?;
        let se = if spec.use_se {
            Some(SqueezeExcite::new(store, init, &format!("{name}.se"), ex, spec.se_channels(), spec.activation)?)
        } else {
            None
        };
        let project = Conv::new(store, init, &format!("{name}.project"), ex, spec.out_channels, ConvParams::pointwise(spec.project_groups), false)?;
        let project_bn = BatchNorm::new(store, &format!("{name}.project_bn"), spec.out_channels)?;
        Ok(MixConvBlock {
            name: name.to_string(),
            spec,
            expand,
            mixconv,
            dw_bn,
            dw_act,
            se,
            project,
            project_bn,
        })
    }

    pub fn forward<T: Element>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {}",
                self.name, self.spec.in_channels, s.c
            )));
        }
        let shuffle = |v: &Var<T>, at: ShufflePlacement| -> Result<Var<T>> {
            if self.spec.shuffle && self.spec.shuffle_placement == at {
                cx.graph.channel_shuffle(v, SHUFFLE_GROUPS)
            } else {
                Ok(v.clone())
            }
        };
        let mut h = x.clone();
        if let Some((conv, bn, act)) = &self.expand {
            h = conv.forward(cx, &h)?;
            h = bn.forward(cx, &h)?;
            h = act.forward(cx, &h)?;
        }
        h = self.mixconv.forward(cx, &h)?;
        h = shuffle(&h, ShufflePlacement::AfterMixConv)?;
        h = self.dw_bn.forward(cx, &h)?;
        h = self.dw_act.forward(cx, &h)?;
        if let Some(se) = &self.se {
            h = se.forward(cx, &h)?;
        }
        h = self.project.forward(cx, &h)?;
        h = self.project_bn.forward(cx, &h)?;
        if self.spec.residual {
            if h.shape() != s {
                return Err(Error::Shape(format!(
                    "{}: residual branch shape {} != input shape {}",
                    self.name,
                    h.shape(),
                    s
                )));
            }
            h = cx.graph.add(&h, x)?;
        }
        shuffle(&h, ShufflePlacement::AfterBlock)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let k = self.spec.kernel_sizes[0];
        let (h, w) = ConvParams::new(k, self.spec.stride, (k - 1) / 2, 1).output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.spec.out_channels, h, w))
    }
}

/// Stem: 3x3 stride-2 convolution, batch norm, PReLU, then one residual block.
#[derive(Clone, Debug)]
pub struct Head {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub act: Activation,
    pub block: MixConvBlock,
}

impl Head {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        in_channels: usize,
        stem_channels: usize,
        block: BlockSpec,
    ) -> Result<Self> {
        let conv = Conv::new(store, init, "head.conv", in_channels, stem_channels, ConvParams::new(3, 2, 1, 1), false)?;
        let bn = BatchNorm::new(store, "head.bn", stem_channels)?;
        let act = Activation::new(store, "head.act", ActKind::Prelu, stem_channels)?;
        if block.in_channels != stem_channels {
            return Err(Error::Shape(format!(
                "head block expects {} channels, stem produces {stem_channels}",
                block.in_channels
            )));
        }
        let block = MixConvBlock::new(store, init, "head.block", block)?;
        Ok(Head { conv, bn, act, block })
    }

    pub fn forward<T: Element>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.conv.forward(cx, x)?;
        let h = self.bn.forward(cx, &h)?;
        let h = self.act.forward(cx, &h)?;
        self.block.forward(cx, &h)
    }
}

/// 1x1 expansion, global depthwise convolution over the whole map and a 1x1
/// projection to the embedding width, each followed by batch norm.
#[derive(Clone, Debug)]
pub struct EmbeddingStage {
    pub expand: Conv,
    pub expand_bn: BatchNorm,
    pub expand_act: Activation,
    pub gdc: Conv,
    pub gdc_bn: BatchNorm,
    pub project: Conv,
    pub project_bn: BatchNorm,
    pub spatial: usize,
}

impl EmbeddingStage {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        in_channels: usize,
        feature_channels: usize,
        embed_dim: usize,
        spatial: usize,
    ) -> Result<Self> {
        let f = feature_channels;
        Ok(EmbeddingStage {
            expand: Conv::new(store, init, "embedding.expand", in_channels, f, ConvParams::pointwise(1), false)?,
            expand_bn: BatchNorm::new(store, "embedding.expand_bn", f)?,
            expand_act: Activation::new(store, "embedding.expand_act", ActKind::Prelu, f)?,
            gdc: Conv::new(store, init, "embedding.gdc", f, f, ConvParams::new(spatial, 1, 0, f), false)?,
            gdc_bn: BatchNorm::new(store, "embedding.gdc_bn", f)?,
            project: Conv::new(store, init, "embedding.project", f, embed_dim, ConvParams::pointwise(1), false)?,
            project_bn: BatchNorm::new(store, "embedding.project_bn", embed_dim)?,
            spatial,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.project.out_channels
    }

    /// Returns `(n, embed_dim, 1, 1)`.
    pub fn forward<T: Element>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.h != self.spatial || s.w != self.spatial {
            return Err(Error::Shape(format!(
                "embedding stage needs {0}x{0} input, got {1}x{2}",
                self.spatial, s.h, s.w
            )));
        }
        let h = self.expand.forward(cx, x)?;
        let h = self.expand_bn.forward(cx, &h)?;
        let h = self.expand_act.forward(cx, &h)?;
        let h = self.gdc.forward(cx, &h)?;
        let h = self.gdc_bn.forward(cx, &h)?;
        let h = self.project.forward(cx, &h)?;
        self.project_bn.forward(cx, &h)
    }
}
