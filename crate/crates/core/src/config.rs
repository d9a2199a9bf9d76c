//! Declarative network configurations, the built-in presets and their
//! key-value text form.
//!
//! ```text
//! # comments start with '#'
//! name = mixfacenet-s
//! input_size = 112 112
//! in_channels = 3
//! stem_channels = 16
//! width_multiplier = 1
//! round_divisor = 8
//! feature_channels = 1024
//! embedding_input_channels = 200
//! embed_dim = 512
//! shuffle = false
//! shuffle_placement = after_block
//! head_block = in=16 out=16 expand=1 kernels=3 stride=1 expand_groups=1 project_groups=1 se_reduction=0 act=prelu repeat=1
//! stage = in=16 out=24 expand=6 kernels=3 stride=1 expand_groups=2 project_groups=2 se_reduction=0 act=prelu repeat=1
//! ...
//! ```
//!
//! `stage` lines are ordered. Channel counts are written at width 1.0 and
//! scaled by `width_multiplier` when the network is resolved.

use std::fmt::Write as _;

use crate::blocks::{ActKind, BlockSpec, ShufflePlacement};
use crate::error::{Error, Result};

/// One row of the stage table, repeated `repeat` times (repeats after the
/// first keep the output width and use stride 1).
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expand_ratio: usize,
    pub kernel_sizes: Vec<usize>,
    pub stride: usize,
    pub expand_groups: usize,
    pub project_groups: usize,
    /// 0 disables squeeze-and-excitation.
    pub se_reduction: usize,
    pub activation: ActKind,
    pub repeat: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub name: String,
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub stem_channels: usize,
    pub head_block: StageSpec,
    pub stages: Vec<StageSpec>,
    pub embedding_input_channels: usize,
    pub feature_channels: usize,
    pub embed_dim: usize,
    pub width_multiplier: f64,
    pub round_divisor: usize,
    pub shuffle: bool,
    pub shuffle_placement: ShufflePlacement,
}

/// Channel counts after width scaling, with concrete per-block specs.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub stem_channels: usize,
    pub head_block: BlockSpec,
    pub blocks: Vec<BlockSpec>,
    pub feature_channels: usize,
    pub embed_dim: usize,
    /// Spatial size entering the embedding stage (the global depthwise kernel).
    pub final_spatial: usize,
}

/// Rounds `channels` to the nearest multiple of `divisor` (at least
/// `divisor`), bumping up one step if that loses more than 10%.
pub fn round_channels(channels: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut c = (((channels + d / 2.0) / d).floor() * d).max(d);
    if c < 0.9 * channels {
        c += d;
    }
    c as usize
}

#[allow(clippy::too_many_arguments)]
const fn row(
    in_channels: usize,
    out_channels: usize,
    expand_ratio: usize,
    stride: usize,
    expand_groups: usize,
    project_groups: usize,
    se_reduction: usize,
    activation: ActKind,
) -> (usize, usize, usize, usize, usize, usize, usize, ActKind) {
    (in_channels, out_channels, expand_ratio, stride, expand_groups, project_groups, se_reduction, activation)
}

fn table(rows: &[((usize, usize, usize, usize, usize, usize, usize, ActKind), &[usize])]) -> Vec<StageSpec> {
    rows.iter()
        .map(|&((i, o, e, s, eg, pg, se, act), ks)| StageSpec {
            in_channels: i,
            out_channels: o,
            expand_ratio: e,
            kernel_sizes: ks.to_vec(),
            stride: s,
            expand_groups: eg,
            project_groups: pg,
            se_reduction: se,
            activation: act,
            repeat: 1,
        })
        .collect()
}

use ActKind::{Prelu as P, Swish as S};

/// MixNet-S body with the first post-head block kept at stride 1. SE
/// reductions are relative to the expanded width.
fn mixfacenet_s_stages() -> Vec<StageSpec> {
    table(&[
        (row(16, 24, 6, 1, 2, 2, 0, P), &[3]),
        (row(24, 24, 3, 1, 2, 2, 0, P), &[3]),
        (row(24, 40, 6, 2, 1, 1, 12, S), &[3, 5, 7]),
        (row(40, 40, 6, 1, 2, 2, 12, S), &[3, 5]),
        (row(40, 40, 6, 1, 2, 2, 12, S), &[3, 5]),
        (row(40, 40, 6, 1, 2, 2, 12, S), &[3, 5]),
        (row(40, 80, 6, 2, 1, 2, 24, S), &[3, 5, 7]),
        (row(80, 80, 6, 1, 1, 2, 24, S), &[3, 5]),
        (row(80, 80, 6, 1, 1, 2, 24, S), &[3, 5]),
        (row(80, 120, 6, 1, 2, 2, 12, S), &[3, 5, 7]),
        (row(120, 120, 3, 1, 2, 2, 6, S), &[3, 5, 7, 9]),
        (row(120, 120, 3, 1, 2, 2, 6, S), &[3, 5, 7, 9]),
        (row(120, 200, 6, 2, 1, 1, 12, S), &[3, 5, 7, 9, 11]),
        (row(200, 200, 6, 1, 1, 2, 12, S), &[3, 5, 7, 9]),
        (row(200, 200, 6, 1, 1, 2, 12, S), &[3, 5, 7, 9]),
    ])
}

/// MixNet-M body with the first post-head block kept at stride 1.
fn mixfacenet_m_stages() -> Vec<StageSpec> {
    table(&[
        (row(24, 32, 6, 1, 2, 2, 0, P), &[3, 5, 7]),
        (row(32, 32, 3, 1, 2, 2, 0, P), &[3]),
        (row(32, 40, 6, 2, 1, 1, 12, S), &[3, 5, 7, 9]),
        (row(40, 40, 6, 1, 2, 2, 12, S), &[3, 5]),
        (row(40, 40, 6, 1, 2, 2, 12, S), &[3, 5]),
        (row(40, 40, 6, 1, 2, 2, 12, S), &[3, 5]),
        (row(40, 80, 6, 2, 1, 1, 24, S), &[3, 5, 7]),
        (row(80, 80, 6, 1, 2, 2, 24, S), &[3, 5, 7, 9]),
        (row(80, 80, 6, 1, 2, 2, 24, S), &[3, 5, 7, 9]),
        (row(80, 80, 6, 1, 2, 2, 24, S), &[3, 5, 7, 9]),
        (row(80, 120, 6, 1, 1, 1, 12, S), &[3]),
        (row(120, 120, 3, 1, 2, 2, 6, S), &[3, 5, 7, 9]),
        (row(120, 120, 3, 1, 2, 2, 6, S), &[3, 5, 7, 9]),
        (row(120, 120, 3, 1, 2, 2, 6, S), &[3, 5, 7, 9]),
        (row(120, 200, 6, 2, 1, 1, 12, S), &[3, 5, 7, 9]),
        (row(200, 200, 6, 1, 1, 2, 12, S), &[3, 5, 7, 9]),
        (row(200, 200, 6, 1, 1, 2, 12, S), &[3, 5, 7, 9]),
        (row(200, 200, 6, 1, 1, 2, 12, S), &[3, 5, 7, 9]),
    ])
}

fn head_block(stem: usize) -> StageSpec {
    table(&[(row(stem, stem, 1, 1, 1, 1, 0, P), &[3])]).remove(0)
}

pub const PRESET_NAMES: &[&str] = &[
    "mixfacenet-xs",
    "mixfacenet-s",
    "mixfacenet-m",
    "shufflemixfacenet-xs",
    "shufflemixfacenet-s",
    "shufflemixfacenet-m",
    "nano",
    "shufflenano",
];

impl NetworkConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (base, shuffle) = match name.strip_prefix("shuffle") {
            Some(rest) => (rest, true),
            None => (name, false),
        };
        let mut cfg = match base {
            "mixfacenet-s" => NetworkConfig::face("mixfacenet-s", 16, mixfacenet_s_stages(), 1.0),
            "mixfacenet-xs" => NetworkConfig::face("mixfacenet-xs", 16, mixfacenet_s_stages(), 0.5),
            "mixfacenet-m" => NetworkConfig::face("mixfacenet-m", 24, mixfacenet_m_stages(), 1.0),
            "nano" => NetworkConfig::nano(),
            _ => {
                return Err(Error::Invalid(format!(
                    "unknown preset {name:?}; known presets: {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        cfg.name = name.to_string();
        cfg.shuffle = shuffle;
        Ok(cfg)
    }

    fn face(name: &str, stem: usize, stages: Vec<StageSpec>, width: f64) -> Self {
        NetworkConfig {
            name: name.to_string(),
            input_size: (112, 112),
            in_channels: 3,
            stem_channels: stem,
            head_block: head_block(stem),
            stages,
            embedding_input_channels: 200,
            feature_channels: 1024,
            embed_dim: 512,
            width_multiplier: width,
            round_divisor: 8,
            shuffle: false,
            shuffle_placement: ShufflePlacement::AfterBlock,
        }
    }

    /// Small configuration for tests and toy training: 56x56 input, two
    /// MixConv blocks, 64-d embedding.
    pub fn nano() -> Self {
        NetworkConfig {
            name: "nano".into(),
            input_size: (56, 56),
            in_channels: 3,
            stem_channels: 8,
            head_block: head_block(8),
            stages: table(&[
                (row(8, 16, 3, 2, 2, 2, 6, S), &[3, 5]),
                (row(16, 16, 3, 2, 2, 2, 6, S), &[3, 5, 7]),
            ]),
            embedding_input_channels: 16,
            feature_channels: 64,
            embed_dim: 64,
            width_multiplier: 1.0,
            round_divisor: 8,
            shuffle: false,
            shuffle_placement: ShufflePlacement::AfterBlock,
        }
    }

    fn scale(&self, c: usize) -> usize {
        if self.width_multiplier == 1.0 {
            c
        } else {
            round_channels(c as f64 * self.width_multiplier, self.round_divisor)
        }
    }

    fn block_spec(&self, st: &StageSpec, in_c: usize, out_c: usize, stride: usize, shuffle: bool) -> BlockSpec {
        BlockSpec {
            in_channels: in_c,
            expansion_channels: in_c * st.expand_ratio,
            out_channels: out_c,
            kernel_sizes: st.kernel_sizes.clone(),
            stride,
            expand_groups: st.expand_groups,
            project_groups: st.project_groups,
            use_se: st.se_reduction > 0,
            se_reduction: st.se_reduction.max(1),
            activation: st.activation,
            shuffle,
            shuffle_placement: self.shuffle_placement,
            residual: stride == 1 && in_c == out_c,
        }
    }

    /// Checks the channel chain and produces concrete block specs.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Invalid(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.head_block.in_channels != self.stem_channels {
            return Err(Error::Shape(format!(
                "head block input {} != stem channels {}",
                self.head_block.in_channels, self.stem_channels
            )));
        }
        let mut prev = self.head_block.out_channels;
        for (i, st) in self.stages.iter().enumerate() {
            if st.in_channels != prev {
                return Err(Error::Shape(format!(
                    "stage {i}: input channels {} do not chain with previous output {prev}",
                    st.in_channels
                )));
            }
            if st.repeat == 0 || st.expand_ratio == 0 {
                return Err(Error::Invalid(format!("stage {i}: repeat and expand must be positive")));
            }
            prev = st.out_channels;
        }
        if prev != self.embedding_input_channels {
            return Err(Error::Shape(format!(
                "last stage output {prev} != embedding_input_channels {}",
                self.embedding_input_channels
            )));
        }

        let stem = self.scale(self.stem_channels);
        let head_out = self.scale(self.head_block.out_channels);
        let head_block = self.block_spec(&self.head_block, stem, head_out, self.head_block.stride, false);
        let (h, w) = self.input_size;
        if h != w {
            return Err(Error::Invalid(format!("input must be square, got {h}x{w}")));
        }
        let mut spatial = h.div_ceil(2);
        if self.head_block.stride != 1 {
            spatial = spatial.div_ceil(self.head_block.stride);
        }
        let mut blocks = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            let in_c = self.scale(st.in_channels);
            let out_c = self.scale(st.out_channels);
            for r in 0..st.repeat {
                let (ic, stride) = if r == 0 { (in_c, st.stride) } else { (out_c, 1) };
                let spec = self.block_spec(st, ic, out_c, stride, self.shuffle);
                spec.validate().map_err(|e| Error::Invalid(format!("stage {i}: {e}")))?;
                spatial = spatial.div_ceil(stride);
                blocks.push(spec);
            }
        }
        head_block.validate()?;
        Ok(ResolvedConfig {
            stem_channels: stem,
            head_block,
            blocks,
            feature_channels: self.scale(self.feature_channels),
            embed_dim: self.embed_dim,
            final_spatial: spatial,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "input_size = {} {}", self.input_size.0, self.input_size.1);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "stem_channels = {}", self.stem_channels);
        let _ = writeln!(s, "width_multiplier = {}", self.width_multiplier);
        let _ = writeln!(s, "round_divisor = {}", self.round_divisor);
        let _ = writeln!(s, "feature_channels = {}", self.feature_channels);
        let _ = writeln!(s, "embedding_input_channels = {}", self.embedding_input_channels);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "shuffle = {}", self.shuffle);
        let _ = writeln!(s, "shuffle_placement = {}", self.shuffle_placement.as_str());
        let _ = writeln!(s, "head_block = {}", stage_text(&self.head_block));
        for st in &self.stages {
            let _ = writeln!(s, "stage = {}", stage_text(st));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig::nano();
        cfg.stages.clear();
        let mut seen_head = false;
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Format(format!("config line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            if key != "stage" && !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key}")));
            }
            let num = |v: &str| v.parse::<usize>().map_err(|_| err(format!("{key}: bad integer {v:?}")));
            match key {
                "name" => cfg.name = value.to_string(),
                "input_size" => {
                    let parts: Vec<_> = value.split_whitespace().collect();
                    if parts.len() != 2 {
                        return Err(err("input_size needs two integers".into()));
                    }
                    cfg.input_size = (num(parts[0])?, num(parts[1])?);
                }
                "in_channels" => cfg.in_channels = num(value)?,
                "stem_channels" => cfg.stem_channels = num(value)?,
                "width_multiplier" => {
                    cfg.width_multiplier = value
                        .parse()
                        .map_err(|_| err(format!("bad width_multiplier {value:?}")))?
                }
                "round_divisor" => cfg.round_divisor = num(value)?,
                "feature_channels" => cfg.feature_channels = num(value)?,
                "embedding_input_channels" => cfg.embedding_input_channels = num(value)?,
                "embed_dim" => cfg.embed_dim = num(value)?,
                "shuffle" => {
                    cfg.shuffle = value
                        .parse()
                        .map_err(|_| err(format!("shuffle must be true or false, got {value:?}")))?
                }
                "shuffle_placement" => cfg.shuffle_placement = ShufflePlacement::parse(value).map_err(|e| err(e.to_string()))?,
                "head_block" => {
                    cfg.head_block = parse_stage(value).map_err(|e| err(e.to_string()))?;
                    seen_head = true;
                }
                "stage" => cfg.stages.push(parse_stage(value).map_err(|e| err(e.to_string()))?),
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        if !seen_head {
            return Err(Error::Format("config has no head_block line".into()));
        }
        if cfg.stages.is_empty() {
            return Err(Error::Format("config has no stage lines".into()));
        }
        Ok(cfg)
    }
}

fn stage_text(st: &StageSpec) -> String {
    let ks: Vec<String> = st.kernel_sizes.iter().map(|k| k.to_string()).collect();
    format!(
        "in={} out={} expand={} kernels={} stride={} expand_groups={} project_groups={} se_reduction={} act={} repeat={}",
        st.in_channels,
        st.out_channels,
        st.expand_ratio,
        ks.join(","),
        st.stride,
        st.expand_groups,
        st.project_groups,
        st.se_reduction,
        st.activation.as_str(),
        st.repeat
    )
}

fn parse_stage(value: &str) -> Result<StageSpec> {
    let mut st = StageSpec {
        in_channels: 0,
        out_channels: 0,
        expand_ratio: 1,
        kernel_sizes: vec![3],
        stride: 1,
        expand_groups: 1,
        project_groups: 1,
        se_reduction: 0,
        activation: ActKind::Swish,
        repeat: 1,
    };
    let (mut has_in, mut has_out) = (false, false);
    for field in value.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("stage field {field:?} is not key=value")))?;
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Format(format!("stage field {k}: bad integer {v:?}")))
        };
        match k {
            "in" => {
                st.in_channels = num(v)?;
                has_in = true;
            }
            "out" => {
                st.out_channels = num(v)?;
                has_out = true;
            }
            "expand" => st.expand_ratio = num(v)?,
            "kernels" => st.kernel_sizes = v.split(',').map(num).collect::<Result<_>>()?,
            "stride" => st.stride = num(v)?,
            "expand_groups" => st.expand_groups = num(v)?,
            "project_groups" => st.project_groups = num(v)?,
            "se_reduction" => st.se_reduction = num(v)?,
            "act" => st.activation = ActKind::parse(v)?,
            "repeat" => st.repeat = num(v)?,
            other => return Err(Error::Format(format!("unknown stage field {other:?}"))),
        }
    }
    if !has_in || !has_out {
        return Err(Error::Format("stage needs both in= and out=".into()));
    }
    Ok(st)
}

/// Spatial sizes and channels every -S layer must produce (for a 112x112 input).
pub fn mixfacenet_s_stage_outputs() -> Vec<(usize, usize)> {
    vec![
        (24, 56),
        (24, 56),
        (40, 28),
        (40, 28),
        (40, 28),
        (40, 28),
        (80, 14),
        (80, 14),
        (80, 14),
        (120, 14),
        (120, 14),
        (120, 14),
        (200, 7),
        (200, 7),
        (200, 7),
    ]
}
