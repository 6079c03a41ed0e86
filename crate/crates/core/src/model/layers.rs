//! Dense building blocks with explicit forward caches and backward passes.
//!
//! Activations are row-major `(rows, features)` matrices where a row is one
//! token of one image. Backward passes accumulate into a gradient structure
//! of the same type as the layer and return the input gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;

use super::params::{push_mat, push_mat_mut, push_vec, push_vec_mut, ParamMut, ParamRef, Parameterized};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(in, out)`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            w: Array2::from_shape_simple_fn((input, output), || rng.gen_range(-bound..bound)),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.w.t())
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
    }
}

impl Parameterized for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        push_mat(out, prefix, "w", &self.w);
        push_vec(out, prefix, "b", &self.b);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        push_mat_mut(out, prefix, "w", &mut self.w);
        push_vec_mut(out, prefix, "b", &mut self.b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row *= *r;
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.gamma;
        for ((mut row, xhat), r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
            let mean_g = row.sum() / d;
            let mean_gx = row.dot(&xhat) / d;
            Zip::from(&mut row).and(&xhat).for_each(|g, &xh| {
                *g = r * (*g - mean_g - xh * mean_gx);
            });
        }
        dx
    }
}

impl Parameterized for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        push_vec(out, prefix, "gamma", &self.gamma);
        push_vec(out, prefix, "beta", &self.beta);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        push_vec_mut(out, prefix, "gamma", &mut self.gamma);
        push_vec_mut(out, prefix, "beta", &mut self.beta);
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Multi-layer perceptron with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of every hidden layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `layers` linear maps: `input → hidden → … → hidden → output`.
    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, layers: usize, rng: &mut R) -> Self {
        assert!(layers >= 1, "an MLP needs at least one layer");
        let layers = (0..layers)
            .map(|i| {
                let fan_in = if i == 0 { input } else { hidden };
                let fan_out = if i + 1 == layers { output } else { hidden };
                Linear::init(fan_in, fan_out, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            if i == last {
                h = z;
            } else {
                h = z.mapv(|v| if v < 0.0 { 0.0 } else { v });
                pre.push(z);
            }
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                Zip::from(&mut d).and(&cache.pre[i]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            d = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl Parameterized for Mlp {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&super::params::join(prefix, &format!("layers.{i}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.collect_mut(&super::params::join(prefix, &format!("layers.{i}")), out);
        }
    }
}

/// Multi-head self-attention over each image's token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub qkv: Linear,
    pub proj: Linear,
}

pub struct AttentionCache {
    input: Array2<f64>,
    qkv: Array2<f64>,
    /// Softmax probabilities, one `(t, t)` matrix per (image, head), image-major.
    probs: Vec<Array2<f64>>,
    merged: Array2<f64>,
}

impl Attention {
    pub fn init<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            heads,
            qkv: Linear::init(dim, 3 * dim, rng),
            proj: Linear::init(dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, tokens: usize) -> (Array2<f64>, AttentionCache) {
        let dim = x.ncols();
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let n = x.nrows() / tokens;
        let qkv = self.qkv.forward(x);
        let mut merged = Array2::zeros((x.nrows(), dim));
        let mut probs = Vec::with_capacity(n * self.heads);
        for b in 0..n {
            let rows = b * tokens..(b + 1) * tokens;
            for h in 0..self.heads {
                let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![rows.clone(), dim + h * hd..dim + (h + 1) * hd]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
                let mut p = q.dot(&k.t());
                for mut row in p.rows_mut() {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v * scale));
                    row.mapv_inplace(|v| (v * scale - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                merged
                    .slice_mut(s![rows.clone(), h * hd..(h + 1) * hd])
                    .assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let out = self.proj.forward(&merged);
        (
            out,
            AttentionCache {
                input: x.clone(),
                qkv,
                probs,
                merged,
            },
        )
    }

    pub fn backward(&self, cache: &AttentionCache, dy: &Array2<f64>, tokens: usize, grad: &mut Attention) -> Array2<f64> {
        let dim = dy.ncols();
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let n = dy.nrows() / tokens;
        let dmerged = self.proj.backward(&cache.merged, dy, &mut grad.proj);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for b in 0..n {
            let rows = b * tokens..(b + 1) * tokens;
            for h in 0..self.heads {
                let p = &cache.probs[b * self.heads + h];
                let qc = h * hd..(h + 1) * hd;
                let kc = dim + h * hd..dim + (h + 1) * hd;
                let vc = 2 * dim + h * hd..2 * dim + (h + 1) * hd;
                let q = cache.qkv.slice(s![rows.clone(), qc.clone()]);
                let k = cache.qkv.slice(s![rows.clone(), kc.clone()]);
                let v = cache.qkv.slice(s![rows.clone(), vc.clone()]);
                let dout = dmerged.slice(s![rows.clone(), qc.clone()]);

                dqkv.slice_mut(s![rows.clone(), vc]).assign(&p.t().dot(&dout));
                let mut ds = dout.dot(&v.t());
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let inner = drow.dot(&prow);
                    Zip::from(&mut drow).and(&prow).for_each(|g, &pv| *g = pv * (*g - inner) * scale);
                }
                dqkv.slice_mut(s![rows.clone(), qc]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![rows.clone(), kc]).assign(&ds.t().dot(&q));
            }
        }
        self.qkv.backward(&cache.input, &dqkv, &mut grad.qkv)
    }
}

impl Parameterized for Attention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.qkv.collect(&super::params::join(prefix, "qkv"), out);
        self.proj.collect(&super::params::join(prefix, "proj"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.qkv.collect_mut(&super::params::join(prefix, "qkv"), out);
        self.proj.collect_mut(&super::params::join(prefix, "proj"), out);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Per-image residual-branch multipliers for stochastic depth.
#[derive(Debug, Clone)]
pub struct BranchScales {
    pub attn: Vec<f64>,
    pub mlp: Vec<f64>,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Array2<f64>,
    fc1_out: Array2<f64>,
    act: Array2<f64>,
    scales: Option<BranchScales>,
}

fn scale_rows(x: &mut Array2<f64>, scales: &[f64], tokens: usize) {
    for (b, s) in scales.iter().enumerate() {
        if *s != 1.0 {
            x.slice_mut(s![b * tokens..(b + 1) * tokens, ..]).mapv_inplace(|v| v * s);
        }
    }
}

impl Block {
    pub fn init<R: Rng>(dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::init(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::init(dim, hidden, rng),
            fc2: Linear::init(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, tokens: usize, scales: Option<BranchScales>) -> (Array2<f64>, BlockCache) {
        let (h1, ln1) = self.ln1.forward(x);
        let (mut a, attn) = self.attn.forward(&h1, tokens);
        if let Some(sc) = &scales {
            scale_rows(&mut a, &sc.attn, tokens);
        }
        let x1 = x + &a;
        let (ln2_out, ln2) = self.ln2.forward(&x1);
        let fc1_out = self.fc1.forward(&ln2_out);
        let act = fc1_out.mapv(gelu);
        let mut m = self.fc2.forward(&act);
        if let Some(sc) = &scales {
            scale_rows(&mut m, &sc.mlp, tokens);
        }
        let out = x1 + &m;
        (
            out,
            BlockCache {
                ln1,
                attn,
                ln2,
                ln2_out,
                fc1_out,
                act,
                scales,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Array2<f64>, tokens: usize, grad: &mut Block) -> Array2<f64> {
        let mut dm = dy.clone();
        if let Some(sc) = &cache.scales {
            scale_rows(&mut dm, &sc.mlp, tokens);
        }
        let mut dact = self.fc2.backward(&cache.act, &dm, &mut grad.fc2);
        Zip::from(&mut dact).and(&cache.fc1_out).for_each(|g, &z| *g *= gelu_grad(z));
        let dln2 = self.fc1.backward(&cache.ln2_out, &dact, &mut grad.fc1);
        let dx1 = dy + &self.ln2.backward(&cache.ln2, &dln2, &mut grad.ln2);

        let mut da = dx1.clone();
        if let Some(sc) = &cache.scales {
            scale_rows(&mut da, &sc.attn, tokens);
        }
        let dh1 = self.attn.backward(&cache.attn, &da, tokens, &mut grad.attn);
        dx1 + &self.ln1.backward(&cache.ln1, &dh1, &mut grad.ln1)
    }
}

impl Parameterized for Block {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        use super::params::join;
        self.ln1.collect(&join(prefix, "ln1"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.ln2.collect(&join(prefix, "ln2"), out);
        self.fc1.collect(&join(prefix, "mlp.fc1"), out);
        self.fc2.collect(&join(prefix, "mlp.fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        use super::params::join;
        self.ln1.collect_mut(&join(prefix, "ln1"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
        self.ln2.collect_mut(&join(prefix, "ln2"), out);
        self.fc1.collect_mut(&join(prefix, "mlp.fc1"), out);
        self.fc2.collect_mut(&join(prefix, "mlp.fc2"), out);
    }
}
