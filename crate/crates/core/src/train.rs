//! SGD with momentum and the toy overfitting run: a small network plus an
//! ArcFace head on a handful of synthetic identities.

use rand_distr::{Distribution, Normal};

use crate::arcface::{self, ArcFaceHead};
use crate::autograd::Graph;
use crate::blocks::{apply_bn_updates, Ctx};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::ops::BnMode;
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// `v = momentum * v + (g + weight_decay * w); w -= lr * v`
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates one tensor; `slot` identifies its velocity buffer.
    pub fn step_tensor(&mut self, slot: usize, w: &mut Tensor<f32>, g: &Tensor<f32>) {
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, None);
        }
        let v = self.velocity[slot].get_or_insert_with(|| vec![0.0; w.numel()]);
        let (lr, mu, wd) = (self.lr as f32, self.momentum as f32, self.weight_decay as f32);
        for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *v = mu * *v + (g + wd * *w);
            *w -= lr * *v;
        }
    }

    pub fn step_store(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)]) {
        for (id, g) in grads {
            self.step_tensor(id.0, store.get_mut(*id), g);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub arch: String,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub scale: f64,
    pub classes: usize,
    pub per_class: usize,
    /// Stop early once inference-mode accuracy reaches this value.
    pub stop_at: Option<f64>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            arch: "nano".into(),
            steps: 2000,
            seed: 0,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            margin: arcface::DEFAULT_MARGIN,
            scale: arcface::DEFAULT_SCALE,
            classes: 8,
            per_class: 4,
            stop_at: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f32,
    /// Accuracy of the train-mode forward pass of this step.
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ToyRun {
    pub net: Network,
    pub head: ArcFaceHead<f32>,
    pub curve: Vec<StepRecord>,
    /// Inference-mode accuracy on the training set after the last step.
    pub final_accuracy: f64,
}

impl ToyRun {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,loss,accuracy\n");
        for r in &self.curve {
            s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.accuracy));
        }
        s
    }
}

/// `classes * per_class` images: a smooth random pattern per class plus
/// per-sample Gaussian noise. Labels are `i / per_class`.
pub fn synthetic_dataset(shape: Shape, classes: usize, per_class: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut init = Initializer::new(seed ^ 0x5eed_da7a);
    let plane = shape.c * shape.h * shape.w;
    let coarse = 7usize;
    let noise = Normal::new(0.0, 0.2).unwrap();
    let mut data = Vec::with_capacity(classes * per_class * plane);
    let mut labels = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let grid: Tensor<f32> = init.uniform(Shape::new(1, shape.c, coarse, coarse), -1.0, 1.0);
        for _ in 0..per_class {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        let gy = y * coarse / shape.h;
                        let gx = x * coarse / shape.w;
                        let v = grid.at(0, c, gy, gx) + noise.sample(init.rng()) as f32;
                        data.push(v);
                    }
                }
            }
            labels.push(k);
        }
    }
    let n = classes * per_class;
    let t = Tensor::from_vec(Shape::new(n, shape.c, shape.h, shape.w), data).expect("sized above");
    (t, labels)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Inference-mode accuracy of `net` + `head` on a labelled batch.
pub fn evaluate(net: &Network, head: &ArcFaceHead<f32>, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let emb = net.forward(x)?;
    Ok(accuracy(&arcface::predict(&emb, head)?, labels))
}

/// Full-batch training on the synthetic set; deterministic per config.
pub fn train_toy(cfg: &ToyConfig) -> Result<ToyRun> {
    if cfg.classes < 2 || cfg.per_class == 0 {
        return Err(Error::Invalid("toy training needs at least 2 classes and 1 sample each".into()));
    }
    let mut net = Network::build(NetworkConfig::preset(&cfg.arch)?, cfg.seed)?;
    let mut init = Initializer::new(cfg.seed.wrapping_add(1));
    let mut head = ArcFaceHead::init(cfg.classes, net.embed_dim(), &mut init);
    head.margin = cfg.margin;
    head.scale = cfg.scale;
    let head_slot = net.params().len();
    let (x, labels) = synthetic_dataset(net.input_shape(1), cfg.classes, cfg.per_class, cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (grads, bn, out) = {
            let graph = Graph::new();
            let cx = Ctx::new(&graph, net.params(), BnMode::Train);
            let xv = graph.constant(x.clone());
            let emb = net.forward_var(&cx, &xv)?;
            let out = arcface::arcface_backward(emb.value(), &labels, &head)?;
            let g = graph.backward_with(&emb, out.embeddings.clone())?;
            let pred = arcface::predict(emb.value(), &head)?;
            (cx.param_grads(&g), cx.take_bn_stats(), (out, accuracy(&pred, &labels)))
        };
        let (out, acc) = out;
        if !out.loss.is_finite() {
            return Err(Error::Invalid(format!("loss diverged at step {step}")));
        }
        opt.step_store(net.params_mut(), &grads);
        opt.step_tensor(head_slot, &mut head.weight, &out.weight);
        apply_bn_updates(net.params_mut(), &bn);
        curve.push(StepRecord {
            step,
            loss: out.loss,
            accuracy: acc,
        });
        if let Some(target) = cfg.stop_at {
            if acc >= target && evaluate(&net, &head, &x, &labels)? >= target {
                break;
            }
        }
    }
    let final_accuracy = evaluate(&net, &head, &x, &labels)?;
    Ok(ToyRun {
        net,
        head,
        curve,
        final_accuracy,
    })
}
