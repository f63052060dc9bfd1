//! Block-structured convolutional network with cached forward passes.
//!
//! A [`Network`] is an ordered list of named [`Block`]s followed by a
//! global-average-pool and a linear classifier head. Block outputs are the
//! tap points exposed to the rest of the crate.

use ndarray::{Array1, Array3, Axis};

use super::layers::{Conv2d, Linear, ParamGrad};

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    Residual(Residual),
}

/// `branch(x) + shortcut(x)`; identity shortcut when `shortcut` is `None`.
#[derive(Debug, Clone)]
pub struct Residual {
    pub branch: Vec<Layer>,
    pub shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub blocks: Vec<Block>,
    pub head: Linear,
}

/// How rectifiers are treated in the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluMode {
    Standard,
    /// Negative upstream gradients are zeroed as well as inactive units.
    Guided,
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { input: Array3<f64>, cols: ndarray::Array2<f64>, output: Array3<f64> },
    Relu { input: Array3<f64> },
    Residual { input: Array3<f64>, branch: Vec<LayerCache>, branch_out: Array3<f64>, skip: SkipCache, output: Array3<f64> },
}

#[derive(Debug, Clone)]
pub enum SkipCache {
    Identity,
    Conv { cols: ndarray::Array2<f64>, output: Array3<f64> },
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: Array3<f64>,
    pub layers: Vec<LayerCache>,
    pub output: Array3<f64>,
}

/// Everything needed to run a backward or relevance pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Array3<f64>,
    pub blocks: Vec<BlockCache>,
    /// Present only when the forward pass reached the head.
    pub pooled: Option<Array1<f64>>,
    pub logits: Option<Array1<f64>>,
}

/// Upstream gradient injected at one block output.
pub struct TapSeed<'a> {
    pub block: usize,
    pub grad: &'a Array3<f64>,
}

/// Result of a backward pass.
pub struct Backward {
    pub input_grad: Array3<f64>,
    /// Gradient at each block output (indexed by block), when captured.
    pub tap_grads: Vec<Option<Array3<f64>>>,
}

fn param_count(layer: &Layer) -> usize {
    match layer {
        Layer::Conv(_) => 1,
        Layer::Relu => 0,
        Layer::Residual(r) => r.branch.iter().map(param_count).sum::<usize>() + usize::from(r.shortcut.is_some()),
    }
}

fn forward_layer(layer: &Layer, x: Array3<f64>) -> (Array3<f64>, LayerCache) {
    match layer {
        Layer::Conv(conv) => {
            let (out, cols) = conv.forward(x.view());
            (out.clone(), LayerCache::Conv { input: x, cols, output: out })
        }
        Layer::Relu => (x.mapv(|v| v.max(0.0)), LayerCache::Relu { input: x }),
        Layer::Residual(res) => {
            let (branch_out, branch) = forward_layers(&res.branch, x.clone());
            let skip = match &res.shortcut {
                None => SkipCache::Identity,
                Some(conv) => {
                    let (output, cols) = conv.forward(x.view());
                    SkipCache::Conv { cols, output }
                }
            };
            let output = match &skip {
                SkipCache::Identity => &branch_out + &x,
                SkipCache::Conv { output, .. } => &branch_out + output,
            };
            (output.clone(), LayerCache::Residual { input: x, branch, branch_out, skip, output })
        }
    }
}

fn forward_layers(layers: &[Layer], mut x: Array3<f64>) -> (Array3<f64>, Vec<LayerCache>) {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, cache) = forward_layer(layer, x);
        caches.push(cache);
        x = y;
    }
    (x, caches)
}

fn backward_layers(
    layers: &[Layer],
    caches: &[LayerCache],
    mut grad: Array3<f64>,
    mode: ReluMode,
    grads: &mut Option<&mut [ParamGrad]>,
    base_slot: usize,
) -> Array3<f64> {
    let mut slots = Vec::with_capacity(layers.len());
    let mut next = base_slot;
    for layer in layers {
        slots.push(next);
        next += param_count(layer);
    }
    for ((layer, cache), slot) in layers.iter().zip(caches).zip(slots).rev() {
        grad = backward_layer(layer, cache, grad, mode, grads, slot);
    }
    grad
}

fn backward_layer(
    layer: &Layer,
    cache: &LayerCache,
    grad: Array3<f64>,
    mode: ReluMode,
    grads: &mut Option<&mut [ParamGrad]>,
    slot: usize,
) -> Array3<f64> {
    match (layer, cache) {
        (Layer::Conv(conv), LayerCache::Conv { input, cols, .. }) => {
            if let Some(g) = grads.as_deref_mut() {
                conv.accumulate_param_grads(&grad, cols, &mut g[slot]);
            }
            let (_, h, w) = input.dim();
            conv.backward_input(&grad, h, w)
        }
        (Layer::Relu, LayerCache::Relu { input }) => {
            let mut out = grad;
            ndarray::Zip::from(&mut out).and(input).for_each(|g, &x| {
                let pass = x > 0.0 && (mode == ReluMode::Standard || *g > 0.0);
                if !pass {
                    *g = 0.0;
                }
            });
            out
        }
        (Layer::Residual(res), LayerCache::Residual { input, branch, skip, .. }) => {
            let branch_slots: usize = res.branch.iter().map(param_count).sum();
            let mut total = backward_layers(&res.branch, branch, grad.clone(), mode, grads, slot);
            match (&res.shortcut, skip) {
                (None, SkipCache::Identity) => total += &grad,
                (Some(conv), SkipCache::Conv { cols, .. }) => {
                    if let Some(g) = grads.as_deref_mut() {
                        conv.accumulate_param_grads(&grad, cols, &mut g[slot + branch_slots]);
                    }
                    let (_, h, w) = input.dim();
                    total += &conv.backward_input(&grad, h, w);
                }
                _ => unreachable!("residual cache does not match layer"),
            }
            total
        }
        _ => unreachable!("layer cache does not match layer"),
    }
}

impl Network {
    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn param_slots(&self) -> usize {
        self.blocks.iter().flat_map(|b| &b.layers).map(param_count).sum::<usize>() + 1
    }

    fn block_base_slot(&self, block: usize) -> usize {
        self.blocks[..block].iter().flat_map(|b| &b.layers).map(param_count).sum()
    }

    /// Runs blocks `0..=last_block`; with `last_block = None` runs the full
    /// network including pooling and head.
    pub fn forward(&self, x: Array3<f64>, last_block: Option<usize>) -> ForwardTrace {
        let stop = last_block.unwrap_or(self.blocks.len() - 1);
        let input = x.clone();
        let mut blocks = Vec::with_capacity(stop + 1);
        let mut h = x;
        for block in &self.blocks[..=stop] {
            let block_input = h.clone();
            let (out, layers) = forward_layers(&block.layers, h);
            blocks.push(BlockCache { input: block_input, layers, output: out.clone() });
            h = out;
        }
        let (pooled, logits) = if last_block.is_none() {
            let pooled = global_avg_pool(&h);
            let logits = self.head.forward(&pooled);
            (Some(pooled), Some(logits))
        } else {
            (None, None)
        };
        ForwardTrace { input, blocks, pooled, logits }
    }

    /// Backpropagates seeds at block outputs and/or the logits to the input.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        seeds: &[TapSeed<'_>],
        logit_grad: Option<&Array1<f64>>,
        mode: ReluMode,
        mut param_grads: Option<&mut [ParamGrad]>,
        capture_taps: bool,
    ) -> Backward {
        let nblocks = trace.blocks.len();
        let mut tap_grads = vec![None; nblocks];
        let mut grad: Option<Array3<f64>> = None;
        if let Some(lg) = logit_grad {
            let pooled = trace.pooled.as_ref().expect("logit gradient requires a full forward pass");
            if let Some(g) = param_grads.as_deref_mut() {
                let last = g.len() - 1;
                self.head.accumulate_param_grads(lg, pooled, &mut g[last]);
            }
            let gp = self.head.backward_input(lg);
            let last = &trace.blocks[nblocks - 1].output;
            grad = Some(global_avg_pool_backward(&gp, last.dim()));
        }
        for b in (0..nblocks).rev() {
            for seed in seeds.iter().filter(|s| s.block == b) {
                match grad.as_mut() {
                    Some(g) => *g += seed.grad,
                    None => grad = Some(seed.grad.clone()),
                }
            }
            let Some(g) = grad.take() else { continue };
            if capture_taps {
                tap_grads[b] = Some(g.clone());
            }
            let base = self.block_base_slot(b);
            grad = Some(backward_layers(
                &self.blocks[b].layers,
                &trace.blocks[b].layers,
                g,
                mode,
                &mut param_grads,
                base,
            ));
        }
        let input_grad = grad.unwrap_or_else(|| Array3::zeros(trace.input.raw_dim()));
        Backward { input_grad, tap_grads }
    }

    pub fn zero_grads(&self) -> Vec<ParamGrad> {
        let mut out = Vec::new();
        self.visit_params(|_, w, b| out.push(ParamGrad::zeros_like(w, b)));
        out
    }

    /// Visits every weight/bias pair in slot order with a stable name.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &ndarray::Array2<f64>, &Array1<f64>)) {
        fn walk(prefix: &str, layers: &[Layer], f: &mut dyn FnMut(&str, &ndarray::Array2<f64>, &Array1<f64>)) {
            for (i, layer) in layers.iter().enumerate() {
                match layer {
                    Layer::Conv(c) => f(&format!("{prefix}/{i}"), &c.weight, &c.bias),
                    Layer::Relu => {}
                    Layer::Residual(r) => {
                        walk(&format!("{prefix}/{i}/branch"), &r.branch, f);
                        if let Some(c) = &r.shortcut {
                            f(&format!("{prefix}/{i}/shortcut"), &c.weight, &c.bias);
                        }
                    }
                }
            }
        }
        for block in &self.blocks {
            walk(&block.name, &block.layers, &mut f);
        }
        f("head", &self.head.weight, &self.head.bias);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut ndarray::Array2<f64>, &mut Array1<f64>)) {
        type Visitor<'a> = dyn FnMut(&str, &mut ndarray::Array2<f64>, &mut Array1<f64>) + 'a;
        fn walk(prefix: &str, layers: &mut [Layer], f: &mut Visitor<'_>) {
            for (i, layer) in layers.iter_mut().enumerate() {
                match layer {
                    Layer::Conv(c) => f(&format!("{prefix}/{i}"), &mut c.weight, &mut c.bias),
                    Layer::Relu => {}
                    Layer::Residual(r) => {
                        walk(&format!("{prefix}/{i}/branch"), &mut r.branch, f);
                        if let Some(c) = &mut r.shortcut {
                            f(&format!("{prefix}/{i}/shortcut"), &mut c.weight, &mut c.bias);
                        }
                    }
                }
            }
        }
        for block in &mut self.blocks {
            let name = block.name.clone();
            walk(&name, &mut block.layers, &mut f);
        }
        f("head", &mut self.head.weight, &mut self.head.bias);
    }
}

pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = x.dim();
    x.view()
        .into_shape_with_order((c, h * w))
        .expect("contiguous activation")
        .mean_axis(Axis(1))
        .expect("nonempty spatial extent")
}

pub fn global_avg_pool_backward(grad: &Array1<f64>, dim: (usize, usize, usize)) -> Array3<f64> {
    let (c, h, w) = dim;
    let scale = 1.0 / (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ci, _, _)| grad[ci] * scale)
}
