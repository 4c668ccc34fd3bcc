//! Layers built on the autograd tape, plus the AdamW optimizer.

use rand::Rng;

use crate::tape::{ConvGeom, Mat, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    XavierUniform,
    Zeros,
    Uniform(f64),
}

pub fn init_mat<R: Rng>(rows: usize, cols: usize, init: Init, rng: &mut R) -> Mat {
    let bound = match init {
        Init::Zeros => return Mat::zeros(rows, cols),
        Init::XavierUniform => (6.0 / (rows + cols) as f64).sqrt(),
        Init::Uniform(b) => b,
    };
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), init_mat(fan_in, fan_out, init, rng)),
            bias: store.add(format!("{name}.bias"), Mat::zeros(1, fan_out)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Mat::from_vec(1, dim, vec![1.0; dim])),
            bias: store.add(format!("{name}.bias"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.layer_norm(x);
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

/// Dense multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        output_init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Attention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, Init::XavierUniform, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, Init::XavierUniform, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, Init::XavierUniform, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, output_init, rng),
            heads,
        }
    }

    /// Attends from `queries` (n x d) over `keys`/`values` (m x d).
    pub fn forward(&self, tape: &mut Tape, queries: Var, keys: Var, values: Var) -> Var {
        self.forward_biased(tape, queries, keys, values, None)
    }

    /// As [`Attention::forward`], with an `n x m` term added to every head's logits.
    pub fn forward_biased(&self, tape: &mut Tape, queries: Var, keys: Var, values: Var, bias: Option<Var>) -> Var {
        let q = self.query.forward(tape, queries);
        let k = self.key.forward(tape, keys);
        let v = self.value.forward(tape, values);
        let dim = tape.shape(q).1;
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, hd);
            let kh = tape.slice_cols(k, h * hd, hd);
            let vh = tape.slice_cols(v, h * hd, hd);
            let s = tape.matmul_bt(qh, kh);
            let mut s = tape.scale(s, scale);
            if let Some(b) = bias {
                s = tape.add(s, b);
            }
            let p = tape.softmax(s);
            outs.push(tape.matmul(p, vh));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        self.output.forward(tape, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            hidden: Linear::new(store, &format!("{name}.fc1"), dim, width, Init::XavierUniform, rng),
            out: Linear::new(store, &format!("{name}.fc2"), width, dim, Init::XavierUniform, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.forward(tape, x);
        let h = tape.relu(h);
        self.out.forward(tape, h)
    }
}

/// Two-layer MLP whose last layer is zero-initialized, used for box deltas.
#[derive(Debug, Clone)]
pub struct DeltaHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl DeltaHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        DeltaHead {
            hidden: Linear::new(store, &format!("{name}.fc1"), dim, dim, Init::XavierUniform, rng),
            out: Linear::new(store, &format!("{name}.fc2"), dim, 4, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.forward(tape, x);
        let h = tape.relu(h);
        self.out.forward(tape, h)
    }
}

/// `k x k` convolution over an `(h*w) x c` feature map.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
}

impl Conv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        // He-uniform for ReLU stacks.
        let bound = (6.0 / fan_in as f64).sqrt();
        Conv {
            weight: store.add(
                format!("{name}.weight"),
                init_mat(fan_in, out_channels, Init::Uniform(bound), rng),
            ),
            bias: store.add(format!("{name}.bias"), Mat::zeros(1, out_channels)),
            kernel,
            stride,
            in_channels,
        }
    }

    /// Returns the output map and its `(height, width)`.
    pub fn forward(&self, tape: &mut Tape, x: Var, height: usize, width: usize) -> (Var, usize, usize) {
        let geom = ConvGeom {
            height,
            width,
            channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.kernel / 2,
        };
        let cols = tape.im2col(x, geom);
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(cols, w);
        (tape.add_row(y, b), geom.out_height(), geom.out_width())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = |id| {
            let m: &Mat = store.get(id);
            Mat::zeros(m.rows, m.cols)
        };
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: store.ids().map(zeros).collect(),
            second: store.ids().map(zeros).collect(),
        }
    }

    /// Applies one update; `grads[i]` belongs to parameter `i` (missing = zero).
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Mat>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            for k in 0..p.data.len() {
                let g = grads[id.0].as_ref().map_or(0.0, |g| g.data[k]);
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * g;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * g * g;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                p.data[k] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[k]);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(Mat::norm_sq)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_attention_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "att", 8, 2, Init::Zeros, &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.constant(init_mat(3, 8, Init::Uniform(1.0), &mut rng));
        let m = tape.constant(init_mat(5, 8, Init::Uniform(1.0), &mut rng));
        let y = att.forward(&mut tape, x, m, m);
        assert!(tape.value(y).data.iter().all(|v| *v == 0.0));
        assert_eq!(tape.shape(y), (3, 8));
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Mat::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = AdamW::new(&store, 0.05, 0.0);
        for _ in 0..2000 {
            let mut tape = Tape::new(&store);
            let v = tape.param(x);
            let sq = tape.mul(v, v);
            let loss = tape.sum(sq);
            let g = tape.backward(loss).param(x).cloned();
            drop(tape);
            opt.update(&mut store, &[g]);
        }
        assert!(store.get(x).data.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut grads = vec![
            Some(Mat::from_vec(1, 2, vec![3.0, 4.0])),
            None,
            Some(Mat::from_vec(1, 1, vec![12.0])),
        ];
        let before = clip_grad_norm(&mut grads, 0.1);
        assert!((before - 13.0).abs() < 1e-12);
        let after: f64 = grads.iter().flatten().map(Mat::norm_sq).sum::<f64>().sqrt();
        assert!(after <= 0.1 + 1e-12);
    }
}
