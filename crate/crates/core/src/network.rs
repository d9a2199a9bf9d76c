//! Full MixFaceNet assembly: head, MixConv stages, embedding stage.

use crate::autograd::{Graph, Var};
use crate::blocks::{Ctx, EmbeddingStage, Head, MixConvBlock};
use crate::config::{NetworkConfig, ResolvedConfig};
use crate::error::{Error, Result};
use crate::ops::BnMode;
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    resolved: ResolvedConfig,
    store: ParamStore<f32>,
    pub head: Head,
    pub blocks: Vec<MixConvBlock>,
    pub embedding: EmbeddingStage,
    layer_shapes: Vec<(String, Shape)>,
}

impl Network {
    /// Builds the layer graph and initializes parameters deterministically
    /// from `seed`.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        let resolved = config.resolve()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let head = Head::new(
            &mut store,
            &mut init,
            config.in_channels,
            resolved.stem_channels,
            resolved.head_block.clone(),
        )?;
        let blocks = resolved
            .blocks
            .iter()
            .enumerate()
            .map(|(i, spec)| MixConvBlock::new(&mut store, &mut init, &format!("stages.{i}"), spec.clone()))
            .collect::<Result<Vec<_>>>()?;
        let last = blocks.last().map_or(resolved.head_block.out_channels, |b| b.spec.out_channels);
        let embedding = EmbeddingStage::new(
            &mut store,
            &mut init,
            last,
            resolved.feature_channels,
            resolved.embed_dim,
            resolved.final_spatial,
        )?;
        let mut net = Network {
            config,
            resolved,
            store,
            head,
            blocks,
            embedding,
            layer_shapes: Vec::new(),
        };
        net.layer_shapes = net.trace_shapes()?;
        Ok(net)
    }

    /// Per-block output shapes for a single input, checked against the
    /// shape formulas of every layer.
    fn trace_shapes(&self) -> Result<Vec<(String, Shape)>> {
        let (h, w) = self.config.input_size;
        let mut shapes = Vec::new();
        let stem = self.head.conv.output_shape(Shape::new(1, self.config.in_channels, h, w))?;
        let mut s = self.head.block.output_shape(stem)?;
        shapes.push(("head".to_string(), s));
        for b in &self.blocks {
            if b.spec.in_channels != s.c {
                return Err(Error::Shape(format!(
                    "{} expects {} channels, previous layer yields {}",
                    b.name, b.spec.in_channels, s.c
                )));
            }
            s = b.output_shape(s)?;
            shapes.push((b.name.clone(), s));
        }
        if s.h != self.embedding.spatial || s.w != self.embedding.spatial {
            return Err(Error::Shape(format!(
                "embedding stage kernel {} does not cover final map {}x{}",
                self.embedding.spatial, s.h, s.w
            )));
        }
        shapes.push(("embedding".to_string(), Shape::new(1, self.resolved.embed_dim, 1, 1)));
        Ok(shapes)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn resolved(&self) -> &ResolvedConfig {
        &self.resolved
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn embed_dim(&self) -> usize {
        self.resolved.embed_dim
    }

    pub fn input_shape(&self, n: usize) -> Shape {
        let (h, w) = self.config.input_size;
        Shape::new(n, self.config.in_channels, h, w)
    }

    /// `(layer name, output shape)` for a batch of one.
    pub fn layer_shapes(&self) -> &[(String, Shape)] {
        &self.layer_shapes
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        let expected = self.input_shape(s.n);
        if s != expected {
            return Err(Error::Shape(format!(
                "network {} expects input {expected}, got {s}",
                self.config.name
            )));
        }
        Ok(())
    }

    /// Forward pass over graph variables; returns `(n, embed_dim, 1, 1)`.
    pub fn forward_var<T: Element>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        self.check_input(x.shape())?;
        let mut h = self.head.forward(cx, x)?;
        for b in &self.blocks {
            h = b.forward(cx, &h)?;
        }
        self.embedding.forward(cx, &h)
    }

    /// Inference-mode forward pass; returns `(n, embed_dim, 1, 1)`.
    pub fn forward(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let graph = Graph::inference();
        let cx = Ctx::new(&graph, &self.store, BnMode::Infer);
        let x = graph.constant(batch.clone());
        Ok(self.forward_var(&cx, &x)?.into_value())
    }

    /// Inference-mode embeddings, one per batch row.
    pub fn embed(&self, batch: &Tensor<f32>) -> Result<Vec<Embedding>> {
        let out = self.forward(batch)?;
        debug_assert!(out.all_finite());
        Ok(out
            .data()
            .chunks(self.embed_dim())
            .map(|c| Embedding(c.to_vec()))
            .collect())
    }
}

/// A face embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    EuclideanNormalized,
    Cosine,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "euclidean_normalized" => Ok(Metric::EuclideanNormalized),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Invalid(format!("unknown metric {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::EuclideanNormalized => "euclidean_normalized",
            Metric::Cosine => "cosine",
        }
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Raw comparison value: a distance for the euclidean metrics (lower is
/// more similar), a similarity in `[-1, 1]` for cosine.
pub fn compare(a: &[f32], b: &[f32], metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(match metric {
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt(),
        Metric::EuclideanNormalized => {
            let (na, nb) = (norm(a), norm(b));
            let inv = |n: f64| if n > 0.0 { 1.0 / n } else { 0.0 };
            let (ia, ib) = (inv(na), inv(nb));
            a.iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = x as f64 * ia - y as f64 * ib;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        }
        Metric::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() / (na * nb)
            }
        }
    })
}

/// Comparison mapped to "higher is more similar": negated distance for the
/// euclidean metrics, cosine similarity as is.
pub fn similarity(a: &[f32], b: &[f32], metric: Metric) -> Result<f64> {
    let v = compare(a, b, metric)?;
    Ok(match metric {
        Metric::Cosine => v,
        _ => -v,
    })
}
