//! Static parameter and FLOPs accounting.
//!
//! Two counts are reported per layer:
//!
//! * `macs`: multiply-accumulates of convolutions, including the SE 1x1
//!   convolutions.
//! * `flops`: the convention of forward-hook layer counters. A convolution
//!   costs `2 * k_h * k_w * c_in / groups` operations per output element,
//!   plus one per output element when it has a bias. Batch norm costs 2 per
//!   element, every activation (PReLU, swish, sigmoid) 1 per element.
//!   Pooling inside SE, the SE gate product, residual additions and channel
//!   shuffles cost 0.
//!
//! Everything is per sample.

use std::fmt::Write as _;

use crate::blocks::{Activation, BatchNorm, Conv, EmbeddingStage, Head, MixConv, MixConvBlock, SqueezeExcite};
use crate::error::Result;
use crate::network::Network;
use crate::ops::ConvParams;
use crate::params::ParamStore;
use crate::tensor::{Element, Shape};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub layer: String,
    pub kind: &'static str,
    pub out_shape: Shape,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

pub const CONVENTION: &str = "per-sample; macs = conv multiply-accumulates; flops = 2*MAC + bias + 2/elem batch norm + 1/elem activation";

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    fn push(&mut self, layer: &str, kind: &'static str, out_shape: Shape, macs: u64, flops: u64, params: u64) {
        self.rows.push(CostRow {
            layer: layer.to_string(),
            kind,
            out_shape,
            macs,
            flops,
            params,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,out_shape,macs,params,flops\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.layer, r.kind, r.out_shape, r.macs, r.params, r.flops
            );
        }
        let _ = writeln!(
            s,
            "total,,,{},{},{}",
            self.total_macs(),
            self.total_params(),
            self.total_flops()
        );
        s
    }

    pub fn to_table(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<name_w$}  {:<16}  {:<14}  {:>14}  {:>14}  {:>10}",
            "layer", "kind", "out_shape", "macs", "flops", "params"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<name_w$}  {:<16}  {:<14}  {:>14}  {:>14}  {:>10}",
                r.layer,
                r.kind,
                r.out_shape.to_string(),
                r.macs,
                r.flops,
                r.params
            );
        }
        let _ = writeln!(
            s,
            "{:<name_w$}  {:<16}  {:<14}  {:>14}  {:>14}  {:>10}",
            "total",
            "",
            "",
            self.total_macs(),
            self.total_flops(),
            self.total_params()
        );
        let _ = writeln!(
            s,
            "total: {:.1}M MACs, {:.1}M FLOPs, {:.3}M params ({CONVENTION})",
            self.total_macs() as f64 / 1e6,
            self.total_flops() as f64 / 1e6,
            self.total_params() as f64 / 1e6
        );
        s
    }
}

/// Layers that can add their own cost rows given an input shape.
pub trait Costed {
    fn account<T: Element>(&self, store: &ParamStore<T>, input: Shape, report: &mut CostReport) -> Result<Shape>;
}

/// Multiply-accumulates of one convolution on a batch of one.
pub fn conv_macs(params: ConvParams, in_channels: usize, out: Shape) -> u64 {
    let (kh, kw) = params.kernel;
    (out.c * out.plane() * kh * kw * (in_channels / params.groups)) as u64
}

impl Costed for Conv {
    fn account<T: Element>(&self, store: &ParamStore<T>, input: Shape, report: &mut CostReport) -> Result<Shape> {
        let out = self.output_shape(Shape::new(1, input.c, input.h, input.w))?;
        let macs = conv_macs(self.params, self.in_channels, out);
        let bias_ops = if self.bias.is_some() { out.numel() as u64 } else { 0 };
        let params = store.get(self.weight).numel() + self.bias.map_or(0, |b| store.get(b).numel());
        report.push(&self.name, "conv", out, macs, 2 * macs + bias_ops, params as u64);
        Ok(out)
    }
}

impl Costed for BatchNorm {
    fn account<T: Element>(&self, store: &ParamStore<T>, input: Shape, report: &mut CostReport) -> Result<Shape> {
        let out = Shape::new(1, input.c, input.h, input.w);
        let params = store.get(self.gamma).numel() + store.get(self.beta).numel();
        report.push(&self.name, "batch_norm", out, 0, 2 * out.numel() as u64, params as u64);
        Ok(out)
    }
}

/// Adds the cost row of one activation layer.
pub fn account_activation<T: Element>(
    act: &Activation,
    name: &str,
    store: &ParamStore<T>,
    input: Shape,
    report: &mut CostReport,
) -> Shape {
    let out = Shape::new(1, input.c, input.h, input.w);
    let (kind, params) = match act {
        Activation::Swish => ("swish", 0),
        Activation::Prelu { alpha, .. } => ("prelu", store.get(*alpha).numel()),
    };
    report.push(name, kind, out, 0, out.numel() as u64, params as u64);
    out
}

impl Costed for MixConv {
    fn account<T: Element>(&self, store: &ParamStore<T>, input: Shape, report: &mut CostReport) -> Result<Shape> {
        let mut macs = 0;
        let mut params = 0;
        let mut out = input;
        for (g, &id) in self.kernels.iter().enumerate() {
            let p = self.spec.group_params(g);
            let c = self.spec.channel_split[g];
            let (h, w) = p.output_hw(input.h, input.w)?;
            let o = Shape::new(1, c, h, w);
            macs += conv_macs(p, c, o);
            params += store.get(id).numel();
            out = Shape::new(1, input.c, h, w);
        }
        let name = store.entry(self.kernels[0]).name.trim_end_matches(".weight");
        let name = name.rsplit_once('.').map_or(name, |(prefix, _)| prefix);
        report.push(name, "mixconv", out, macs, 2 * macs, params as u64);
        Ok(out)
    }
}

impl Costed for SqueezeExcite {
    fn account<T: Element>(&self, store: &ParamStore<T>, input: Shape, report: &mut CostReport) -> Result<Shape> {
        let pooled = Shape::new(1, input.c, 1, 1);
        let z = self.reduce.account(store, pooled, report)?;
        let prefix = self.reduce.name.trim_end_matches(".reduce");
        account_activation(&self.act, &format!("{prefix}.act"), store, z, report);
        let g = self.expand.account(store, z, report)?;
        report.push(&format!("{prefix}.gate"), "sigmoid", g, 0, g.numel() as u64, 0);
        Ok(Shape::new(1, input.c, input.h, input.w))
    }
}

impl Costed for MixConvBlock {
    fn account<T: Element>(&self, store: &ParamStore<T>, input: Shape, report: &mut CostReport) -> Result<Shape> {
        let mut s = Shape::new(1, input.c, input.h, input.w);
        if let Some((conv, bn, act)) = &self.expand {
            s = conv.account(store, s, report)?;
            s = bn.account(store, s, report)?;
            s = account_activation(act, &format!("{}.expand_act", self.name), store, s, report);
        }
        s = self.mixconv.account(store, s, report)?;
        s = self.dw_bn.account(store, s, report)?;
        s = account_activation(&self.dw_act, &format!("{}.mixconv_act", self.name), store, s, report);
        if let Some(se) = &self.se {
            s = se.account(store, s, report)?;
        }
        s = self.project.account(store, s, report)?;
        self.project_bn.account(store, s, report)
    }
}

impl Costed for Head {
    fn account<T: Element>(&self, store: &ParamStore<T>, input: Shape, report: &mut CostReport) -> Result<Shape> {
        let s = self.conv.account(store, input, report)?;
        let s = self.bn.account(store, s, report)?;
        let s = account_activation(&self.act, "head.act", store, s, report);
        self.block.account(store, s, report)
    }
}

impl Costed for EmbeddingStage {
    fn account<T: Element>(&self, store: &ParamStore<T>, input: Shape, report: &mut CostReport) -> Result<Shape> {
        let s = self.expand.account(store, input, report)?;
        let s = self.expand_bn.account(store, s, report)?;
        let s = account_activation(&self.expand_act, "embedding.expand_act", store, s, report);
        let s = self.gdc.account(store, s, report)?;
        let s = self.gdc_bn.account(store, s, report)?;
        let s = self.project.account(store, s, report)?;
        self.project_bn.account(store, s, report)
    }
}

/// Per-layer cost rows of `net` for one `input` (batch dimension ignored).
pub fn describe(net: &Network, input_hw: Option<(usize, usize)>) -> Result<CostReport> {
    let (h, w) = input_hw.unwrap_or(net.config().input_size);
    let input = Shape::new(1, net.config().in_channels, h, w);
    let store = net.params();
    let mut report = CostReport::default();
    let mut s = net.head.account(store, input, &mut report)?;
    for b in &net.blocks {
        s = b.account(store, s, &mut report)?;
    }
    net.embedding.account(store, s, &mut report)?;
    Ok(report)
}

/// Trainable scalars: conv weights and biases, BN gamma/beta, PReLU
/// alphas. Running statistics are excluded.
pub fn count_params(net: &Network) -> u64 {
    net.params().trainable_count() as u64
}

/// Per-sample FLOPs under the hook convention described above.
pub fn count_flops(net: &Network, input_hw: (usize, usize)) -> Result<u64> {
    Ok(describe(net, Some(input_hw))?.total_flops())
}

/// Per-sample convolution multiply-accumulates.
pub fn count_macs(net: &Network, input_hw: (usize, usize)) -> Result<u64> {
    Ok(describe(net, Some(input_hw))?.total_macs())
}
