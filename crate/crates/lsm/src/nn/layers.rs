//! Parameter containers for conv / linear layers and per-graph binding.
//!
//! Parameters live outside any graph as plain arrays. Each training step
//! binds them into a fresh tape as leaves; gradients are then looked up by
//! parameter path after backward.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};

/// Records (path, leaf) pairs while a model is being bound into a graph.
pub struct Binder<'g> {
    pub graph: &'g Graph,
    pub entries: Vec<(String, Var)>,
}

impl<'g> Binder<'g> {
    pub fn new(graph: &'g Graph) -> Self {
        Binder {
            graph,
            entries: Vec::new(),
        }
    }

    pub fn leaf(&mut self, path: String, value: &ArrayD<f64>) -> Var {
        let v = self.graph.leaf(value.clone());
        self.entries.push((path, v));
        v
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dParams {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dParams {
    /// He-normal initialisation.
    pub fn init(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let w = ArrayD::from_shape_fn(IxDyn(&[cout, cin, k, k]), |_| dist.sample(rng));
        let b = ArrayD::zeros(IxDyn(&[cout]));
        Conv2dParams { w, b, stride, pad }
    }

    pub fn bind(&self, binder: &mut Binder, prefix: &str) -> BoundConv {
        BoundConv {
            w: binder.leaf(format!("{prefix}.w"), &self.w),
            b: binder.leaf(format!("{prefix}.b"), &self.b),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn entries<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<f64>)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn entries_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ArrayD<f64>)>,
    ) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

#[derive(Clone, Copy)]
pub struct BoundConv {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub pad: usize,
}

impl BoundConv {
    pub fn apply(&self, g: &Graph, x: Var) -> Var {
        g.conv2d(x, self.w, self.b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
}

impl LinearParams {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let w = ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| dist.sample(rng));
        let b = ArrayD::zeros(IxDyn(&[fan_out]));
        LinearParams { w, b }
    }

    /// Independent random init with a distinct stream, used to keep the two
    /// classifier heads from starting identical.
    pub fn init_jittered(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::init(fan_in, fan_out, rng);
        let dist = Normal::new(0.0, 1e-3).unwrap();
        p.b.mapv_inplace(|_| dist.sample(rng));
        p
    }

    pub fn bind(&self, binder: &mut Binder, prefix: &str) -> BoundLinear {
        BoundLinear {
            w: binder.leaf(format!("{prefix}.w"), &self.w),
            b: binder.leaf(format!("{prefix}.b"), &self.b),
        }
    }

    pub fn entries<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<f64>)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn entries_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ArrayD<f64>)>,
    ) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn apply(&self, g: &Graph, x: Var) -> Var {
        g.linear(x, self.w, self.b)
    }
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Split a seed into an independent stream for a named component.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a over (base, tag, index); cheap and stable across platforms
    let mut h: u64 = 0xcbf29ce484222325;
    for b in base
        .to_le_bytes()
        .iter()
        .chain(tag.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
