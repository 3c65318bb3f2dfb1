//! Elementary layers over a [`Tape`]. Each layer only stores [`ParamId`]s;
//! the tensors live in a [`ParamStore`] bound to the tape per pass.

use crate::numerics::params::{Bound, ParamId, ParamStore};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights drawn from `N(0, gain^2 / fan_in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f32, rng: &mut Rng) -> Self {
        let std = gain / (fan_in as f32).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, p.var(self.w));
        tape.add_row(h, p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.g"), Tensor::full(&[width], 1.0));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[width]));
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let n = tape.layer_norm(x);
        let n = tape.mul_row(n, p.var(self.gain));
        tape.add_row(n, p.var(self.bias))
    }
}

/// Pre-norm transformer block: attention then a 4x GELU perceptron, both residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln_mlp: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(width % heads == 0, "width {width} not divisible by {heads} heads");
        TransformerBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width),
            q: Linear::new(store, &format!("{name}.q"), width, width, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, 1.0, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, 0.5, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, 4 * width, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * width, width, 0.5, rng),
            heads,
        }
    }

    /// `x` is `[batch * seq, width]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, batch: usize) -> Var {
        let h = self.ln_attn.forward(tape, p, x);
        let q = self.q.forward(tape, p, h);
        let k = self.k.forward(tape, p, h);
        let v = self.v.forward(tape, p, h);
        let a = tape.attention(q, k, v, batch, self.heads);
        let a = self.proj.forward(tape, p, a);
        let x = tape.add(x, a);
        let h = self.ln_mlp.forward(tape, p, x);
        let h = self.fc1.forward(tape, p, h);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h);
        tape.add(x, h)
    }
}

/// Self-attention sublayer: pre-norm, multi-head, residual.
#[derive(Clone, Debug)]
struct AttentionSublayer {
    ln: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
}

impl AttentionSublayer {
    fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut Rng) -> Self {
        AttentionSublayer {
            ln: LayerNorm::new(store, &format!("{name}.ln"), width),
            q: Linear::new(store, &format!("{name}.q"), width, width, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, 1.0, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, 0.5, rng),
        }
    }

    /// Attention increment (without the residual) over `batch` sequences.
    fn delta(&self, tape: &mut Tape, p: &Bound, x: Var, batch: usize, heads: usize) -> Var {
        let h = self.ln.forward(tape, p, x);
        let q = self.q.forward(tape, p, h);
        let k = self.k.forward(tape, p, h);
        let v = self.v.forward(tape, p, h);
        let a = tape.attention(q, k, v, batch, heads);
        self.proj.forward(tape, p, a)
    }
}

/// Row layout of a batch of videos: `groups` clips of `frames` frames of
/// `sites` tokens, rows ordered `(group, frame, site)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoLayout {
    pub groups: usize,
    pub frames: usize,
    pub sites: usize,
    to_time_major: Vec<usize>,
    to_frame_major: Vec<usize>,
}

impl VideoLayout {
    pub fn new(groups: usize, frames: usize, sites: usize) -> Self {
        let n = groups * frames * sites;
        let mut to_time_major = Vec::with_capacity(n);
        for g in 0..groups {
            for s in 0..sites {
                for t in 0..frames {
                    to_time_major.push((g * frames + t) * sites + s);
                }
            }
        }
        let mut to_frame_major = vec![0; n];
        for (new, &old) in to_time_major.iter().enumerate() {
            to_frame_major[old] = new;
        }
        VideoLayout { groups, frames, sites, to_time_major, to_frame_major }
    }

    pub fn rows(&self) -> usize {
        self.groups * self.frames * self.sites
    }

    /// Row permutation from frame-major to `(group, site, frame)` order.
    pub fn to_time_major_index(&self) -> &[usize] {
        &self.to_time_major
    }

    /// For each token row, the row of its `(group, frame)` in a
    /// `[groups * frames, d]` per-frame table.
    pub fn frame_index(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| r / self.sites).collect()
    }
}

/// Factorized space-time transformer block: attention across the sites of
/// each frame, then across the frames at each site, then a 4x GELU
/// perceptron; all pre-norm and residual.
#[derive(Clone, Debug)]
pub struct SpaceTimeBlock {
    spatial: AttentionSublayer,
    temporal: AttentionSublayer,
    ln_mlp: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl SpaceTimeBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(width % heads == 0, "width {width} not divisible by {heads} heads");
        SpaceTimeBlock {
            spatial: AttentionSublayer::new(store, &format!("{name}.space"), width, rng),
            temporal: AttentionSublayer::new(store, &format!("{name}.time"), width, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, 4 * width, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * width, width, 0.5, rng),
            heads,
        }
    }

    /// `x` is `[layout.rows(), width]` in frame-major order.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, layout: &VideoLayout) -> Var {
        let a = self.spatial.delta(tape, p, x, layout.groups * layout.frames, self.heads);
        let x = tape.add(x, a);
        let xt = tape.gather_rows(x, &layout.to_time_major);
        let a = self.temporal.delta(tape, p, xt, layout.groups * layout.sites, self.heads);
        let a = tape.gather_rows(a, &layout.to_frame_major);
        let x = tape.add(x, a);
        let h = self.ln_mlp.forward(tape, p, x);
        let h = self.fc1.forward(tape, p, h);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h);
        tape.add(x, h)
    }
}

/// Sinusoidal embedding of a scalar, `dim` even.
pub fn sinusoidal_embedding(value: f32, dim: usize, max_period: f32) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f32 / half as f32).exp();
        let arg = value * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}
