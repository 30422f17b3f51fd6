//! Transformer building blocks on top of the autodiff tape.
//!
//! Layers own [`ParamId`]s into a shared [`ParamSet`]; forward passes record
//! onto a [`Tape`]. All blocks are pre-norm with GELU feed-forward interiors.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};

pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

pub fn normal_init(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Affine map `x @ W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), xavier_uniform(in_dim, out_dim, rng));
        let b = ps.add(format!("{name}.b"), Array2::zeros((1, out_dim)));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Var {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = ps.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Var {
        let gamma = tape.param(ps, self.gamma);
        let beta = tape.param(ps, self.beta);
        tape.layer_norm(x, gamma, beta)
    }
}

/// Additive attention mask: 0 where allowed, a large negative number where
/// position j may not be attended from position i.
pub fn causal_mask(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| if j <= i { 0.0 } else { -1e30 })
}

/// Fixed sinusoidal positional encoding, `len×dim`.
pub fn sinusoidal_pe(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000_f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Inverted dropout. `p == 0.0` (or eval mode upstream) should skip the call.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Var {
    debug_assert!((0.0..1.0).contains(&p));
    if p == 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let shape = tape.value(x).raw_dim();
    let mask = Array2::from_shape_fn(shape, |_| {
        if rng.random_range(0.0..1.0) < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

#[derive(Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    n_heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dim % n_heads == 0, "dim must divide by n_heads");
        MultiHeadAttention {
            wq: Linear::new(ps, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), dim, dim, rng),
            n_heads,
            head_dim: dim / n_heads,
        }
    }

    /// Attends from `q_in` (Nq×d) over `kv_in` (Nk×d); `mask` is an additive
    /// Nq×Nk score mask.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        q_in: Var,
        kv_in: Var,
        mask: Option<&Array2<f64>>,
    ) -> Var {
        let q = self.wq.forward(tape, ps, q_in);
        let k = self.wk.forward(tape, ps, kv_in);
        let v = self.wv.forward(tape, ps, kv_in);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mask_var = mask.map(|m| tape.constant(m.clone()));
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let off = h * self.head_dim;
            let qh = tape.slice_cols(q, off, self.head_dim);
            let kh = tape.slice_cols(k, off, self.head_dim);
            let vh = tape.slice_cols(v, off, self.head_dim);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let scores = match mask_var {
                Some(m) => tape.add(scores, m),
                None => scores,
            };
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let concat = tape.concat_cols(&heads);
        self.wo.forward(tape, ps, concat)
    }
}

#[derive(Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForward {
            l1: Linear::new(ps, &format!("{name}.ff1"), dim, hidden, rng),
            l2: Linear::new(ps, &format!("{name}.ff2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Var {
        let h = self.l1.forward(tape, ps, x);
        let h = tape.gelu(h);
        self.l2.forward(tape, ps, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln1(x))`, `x + ffn(ln2(x))`.
#[derive(Clone)]
pub struct SelfAttnBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl SelfAttnBlock {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        n_heads: usize,
        ff_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SelfAttnBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, n_heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, ff_hidden, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        x: Var,
        mask: Option<&Array2<f64>>,
    ) -> Var {
        let n = self.ln1.forward(tape, ps, x);
        let a = self.attn.forward(tape, ps, n, n, mask);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, ps, x);
        let f = self.ffn.forward(tape, ps, n);
        tape.add(x, f)
    }
}

/// Pre-norm decoder block with self-attention and cross-attention over an
/// external memory.
#[derive(Clone)]
pub struct CrossAttnBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

impl CrossAttnBlock {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        n_heads: usize,
        ff_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        CrossAttnBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self"), dim, n_heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross"), dim, n_heads, rng),
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), dim),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, ff_hidden, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        x: Var,
        memory: Var,
        self_mask: Option<&Array2<f64>>,
    ) -> Var {
        let n = self.ln1.forward(tape, ps, x);
        let a = self.self_attn.forward(tape, ps, n, n, self_mask);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, ps, x);
        let c = self.cross_attn.forward(tape, ps, n, memory, None);
        let x = tape.add(x, c);
        let n = self.ln3.forward(tape, ps, x);
        let f = self.ffn.forward(tape, ps, n);
        tape.add(x, f)
    }
}

/// Linear learning-rate schedule: ramp up over `warmup_steps`, then decay
/// linearly to zero at `total_steps`. Steps are 1-based.
#[derive(Debug, Clone, Copy)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        assert!(step >= 1 && step <= self.total_steps);
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay_span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let done = (step - self.warmup_steps) as f64;
        self.base_lr * (1.0 - (done - 1.0) / decay_span)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn attention_block_keeps_shape_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let block = SelfAttnBlock::new(&mut ps, "blk", 16, 4, 32, &mut rng);
        let x0 = normal_init(5, 16, 1.0, &mut rng);
        let mask = causal_mask(5);

        let mut t1 = Tape::new();
        let x = t1.input(x0.clone());
        let y1 = block.forward(&mut t1, &ps, x, Some(&mask));
        assert_eq!(t1.value(y1).shape(), &[5, 16]);

        let mut t2 = Tape::new();
        let x = t2.input(x0);
        let y2 = block.forward(&mut t2, &ps, x, Some(&mask));
        assert_eq!(t1.value(y1), t2.value(y2));
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let block = SelfAttnBlock::new(&mut ps, "blk", 8, 2, 16, &mut rng);
        let mask = causal_mask(4);

        let mut base = normal_init(4, 8, 1.0, &mut rng);
        let mut t1 = Tape::new();
        let x = t1.input(base.clone());
        let out1 = block.forward(&mut t1, &ps, x, Some(&mask));
        let y1 = t1.value(out1).clone();

        // perturb the last row; earlier outputs must not move
        base.row_mut(3).mapv_inplace(|v| v + 10.0);
        let mut t2 = Tape::new();
        let x = t2.input(base);
        let out2 = block.forward(&mut t2, &ps, x, Some(&mask));
        let y2 = t2.value(out2).clone();

        for i in 0..3 {
            for j in 0..8 {
                assert_eq!(y1[[i, j]], y2[[i, j]], "row {i} changed");
            }
        }
    }

    #[test]
    fn sinusoidal_pe_matches_reference_formula() {
        let pe = sinusoidal_pe(10, 8);
        assert!((pe[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((pe[[0, 1]] - 1.0).abs() < 1e-12);
        let angle = 3.0 / 10_000_f64.powf(2.0 / 8.0);
        assert!((pe[[3, 2]] - angle.sin()).abs() < 1e-12);
        assert!((pe[[3, 3]] - angle.cos()).abs() < 1e-12);
    }

    #[test]
    fn schedule_warms_up_then_decays_linearly() {
        let s = LinearSchedule {
            base_lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!((s.lr(1) - 0.1).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(11) - 1.0).abs() < 1e-12);
        assert!(s.lr(110) > 0.0);
        assert!(s.lr(60) < s.lr(11));
    }

    #[test]
    fn dropout_scales_surviving_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.input(Array2::ones((20, 20)));
        let y = dropout(&mut tape, x, 0.5, &mut rng);
        let v = tape.value(y);
        for &e in v.iter() {
            assert!(e == 0.0 || (e - 2.0).abs() < 1e-12);
        }
        let kept = v.iter().filter(|&&e| e != 0.0).count();
        assert!(kept > 100 && kept < 300);
    }
}
