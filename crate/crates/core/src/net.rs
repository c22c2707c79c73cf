//! The action-value network and its hand-rolled forward/backward passes.
//!
//! Architecture: per time slice, `conv_blocks` convolutional blocks (each a
//! 3x3 stride-1 convolution followed by a 3x3 stride-2 convolution, both
//! with one-pixel zero padding and rectifier activations; channel width
//! doubles per block starting at `base_channels`). The kernels span a
//! single time slice and share weights across slices. The per-slice
//! feature maps are flattened and aggregated by an LSTM over the sequence,
//! whose final hidden state feeds a rectified dense layer and a linear
//! 5-way output, one value per action.
//!
//! All parameters live in one flat buffer so the optimizer, target-network
//! sync, checkpointing, and finite-difference checks can treat the model
//! as a single vector.

use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Action;
use crate::observation::{InputSequence, CHANNELS};

/// Floating-point scalar the network is instantiated over: `f32` for
/// training, `f64` for gradient checking.
pub trait Real:
    Float + num_traits::NumAssignOps + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("FOV must be odd and >= 3, got {0}")]
    BadFov(usize),
    #[error("network needs at least one conv block, one time slice, and one unit per layer")]
    BadShape,
    #[error("input length {got} does not match the configured {want}")]
    InputLength { got: usize, want: usize },
}

/// Network shape. `fov` is the square field-of-view side, `seq_len` the
/// number of stacked frames.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct NetConfig {
    pub fov: usize,
    pub seq_len: usize,
    pub conv_blocks: usize,
    pub base_channels: usize,
    pub lstm_units: usize,
    pub dense_units: usize,
}

impl NetConfig {
    /// Reference configuration: 15x15 FOV, 4 frames, 3 blocks starting at
    /// 32 channels, 512 LSTM and dense units.
    pub fn reference() -> Self {
        NetConfig {
            fov: 15,
            seq_len: 4,
            conv_blocks: 3,
            base_channels: 32,
            lstm_units: 512,
            dense_units: 512,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.fov < 3 || self.fov % 2 == 0 {
            return Err(NetError::BadFov(self.fov));
        }
        if self.seq_len == 0
            || self.conv_blocks == 0
            || self.base_channels == 0
            || self.lstm_units == 0
            || self.dense_units == 0
        {
            return Err(NetError::BadShape);
        }
        Ok(())
    }

    /// Output channel width of block `b` (0-indexed): base doubled per block.
    pub fn block_channels(&self, b: usize) -> usize {
        self.base_channels << b
    }

    /// Spatial side lengths entering each block, plus the final one.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.fov];
        let mut s = self.fov;
        for _ in 0..self.conv_blocks {
            s = (s + 1) / 2;
            sizes.push(s);
        }
        sizes
    }

    /// Shape of the stacked feature maps entering the recurrent layer:
    /// (seq_len, side, side, channels).
    pub fn feature_shape(&self) -> (usize, usize, usize, usize) {
        let side = *self.spatial_sizes().last().unwrap();
        (
            self.seq_len,
            side,
            side,
            self.block_channels(self.conv_blocks - 1),
        )
    }

    /// Flattened per-slice feature length: the LSTM input width.
    pub fn flat_features(&self) -> usize {
        let (_, h, w, c) = self.feature_shape();
        h * w * c
    }

    /// Total input length: seq_len x 4 x fov x fov.
    pub fn input_len(&self) -> usize {
        self.seq_len * CHANNELS * self.fov * self.fov
    }

    pub fn actions(&self) -> usize {
        Action::ALL.len()
    }
}

/// A named parameter tensor inside the flat buffer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug)]
struct Span {
    offset: usize,
    len: usize,
}

impl Span {
    fn of<'a, T>(&self, buf: &'a [T]) -> &'a [T] {
        &buf[self.offset..self.offset + self.len]
    }
    fn of_mut<'a, T>(&self, buf: &'a mut [T]) -> &'a mut [T] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

#[derive(Clone, Debug)]
struct ConvSpans {
    w: Span,
    b: Span,
    in_c: usize,
    out_c: usize,
    stride: usize,
}

#[derive(Clone, Debug)]
pub struct Layout {
    blocks: Vec<ParamBlock>,
    conv: Vec<[ConvSpans; 2]>,
    lstm_w_ih: Span,
    lstm_w_hh: Span,
    lstm_b: Span,
    fc1_w: Span,
    fc1_b: Span,
    fc2_w: Span,
    fc2_b: Span,
    total: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Layout {
        let mut blocks = Vec::new();
        let mut offset = 0usize;
        let mut span = |name: String, shape: Vec<usize>| -> Span {
            let len: usize = shape.iter().product();
            blocks.push(ParamBlock {
                name,
                shape,
                offset,
                len,
            });
            let s = Span { offset, len };
            offset += len;
            s
        };

        let mut conv = Vec::new();
        let mut in_c = CHANNELS;
        for b in 0..cfg.conv_blocks {
            let out_c = cfg.block_channels(b);
            let c0 = ConvSpans {
                w: span(format!("conv{b}_0.w"), vec![out_c, in_c, 3, 3]),
                b: span(format!("conv{b}_0.b"), vec![out_c]),
                in_c,
                out_c,
                stride: 1,
            };
            let c1 = ConvSpans {
                w: span(format!("conv{b}_1.w"), vec![out_c, out_c, 3, 3]),
                b: span(format!("conv{b}_1.b"), vec![out_c]),
                in_c: out_c,
                out_c,
                stride: 2,
            };
            conv.push([c0, c1]);
            in_c = out_c;
        }

        let input = cfg.flat_features();
        let hidden = cfg.lstm_units;
        let lstm_w_ih = span("lstm.w_ih".into(), vec![4 * hidden, input]);
        let lstm_w_hh = span("lstm.w_hh".into(), vec![4 * hidden, hidden]);
        let lstm_b = span("lstm.b".into(), vec![4 * hidden]);
        let fc1_w = span("fc1.w".into(), vec![cfg.dense_units, hidden]);
        let fc1_b = span("fc1.b".into(), vec![cfg.dense_units]);
        let fc2_w = span("fc2.w".into(), vec![cfg.actions(), cfg.dense_units]);
        let fc2_b = span("fc2.b".into(), vec![cfg.actions()]);

        Layout {
            blocks,
            conv,
            lstm_w_ih,
            lstm_w_hh,
            lstm_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            total: offset,
        }
    }

    pub fn param_blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Everything the backward pass needs from a forward evaluation.
pub struct Trace<T> {
    /// Per slice: activations after every conv layer (post-rectifier),
    /// index 0 being the raw input slice.
    conv_acts: Vec<Vec<Vec<T>>>,
    lstm_steps: Vec<LstmStep<T>>,
    fc1_out: Vec<T>,
}

struct LstmStep<T> {
    gate_i: Vec<T>,
    gate_f: Vec<T>,
    gate_g: Vec<T>,
    gate_o: Vec<T>,
    cell: Vec<T>,
    tanh_cell: Vec<T>,
    hidden: Vec<T>,
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Dot product with eight independent accumulators; breaking the add
/// dependency chain lets the compiler keep the lanes packed.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    let (a_main, a_rest) = a.split_at(chunks * 8);
    let (b_main, b_rest) = b.split_at(chunks * 8);
    for (ca, cb) in a_main.chunks_exact(8).zip(b_main.chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in a_rest.iter().zip(b_rest) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// The action-value network: a flat parameter vector plus the shape
/// metadata to interpret it.
#[derive(Clone)]
pub struct QNetwork<T: Real> {
    cfg: NetConfig,
    layout: Layout,
    params: Vec<T>,
}

impl<T: Real> QNetwork<T> {
    /// Fresh network with uniform fan-in-scaled weights and zero biases,
    /// fully determined by `seed`.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |span: Span, fan_in: usize, params: &mut Vec<T>| {
            let lim = 1.0 / (fan_in as f64).sqrt();
            for p in span.of_mut(params) {
                *p = T::from_f64(rng.gen_range(-lim..lim));
            }
        };
        for pair in &layout.conv {
            for conv in pair {
                init(conv.w, conv.in_c * 9, &mut params);
            }
        }
        init(layout.lstm_w_ih, cfg.flat_features(), &mut params);
        init(layout.lstm_w_hh, cfg.lstm_units, &mut params);
        init(layout.fc1_w, cfg.lstm_units, &mut params);
        init(layout.fc2_w, cfg.dense_units, &mut params);
        Ok(QNetwork {
            cfg,
            layout,
            params,
        })
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Copy all parameters from a structurally identical network.
    pub fn sync_from(&mut self, other: &QNetwork<T>) {
        assert_eq!(self.cfg, other.cfg, "structurally different networks");
        self.params.copy_from_slice(&other.params);
    }

    pub fn input_len(&self) -> usize {
        self.cfg.input_len()
    }

    /// Convert a frame stack into the network input layout:
    /// slice-major, then channel, row, col.
    pub fn input_from_sequence(&self, seq: &InputSequence) -> Vec<T> {
        let f = self.cfg.fov;
        let mut out = vec![T::zero(); self.cfg.input_len()];
        assert_eq!(seq.n_t(), self.cfg.seq_len, "sequence length mismatch");
        for (t, frame) in seq.frames().enumerate() {
            let (h, w) = frame.dims();
            assert_eq!((h, w), (f, f), "frame does not match FOV");
            let base = t * CHANNELS * f * f;
            for r in 0..f {
                for c in 0..f {
                    for ch in 0..CHANNELS {
                        if frame.get(r, c, ch) != 0 {
                            out[base + (ch * f + r) * f + c] = T::one();
                        }
                    }
                }
            }
        }
        out
    }

    /// Action values for one input. Deterministic; panics on length
    /// mismatch in debug builds, checked in [`QNetwork::try_forward`].
    pub fn forward(&self, input: &[T]) -> Vec<T> {
        self.run_forward(input, None)
    }

    pub fn try_forward(&self, input: &[T]) -> Result<Vec<T>, NetError> {
        if input.len() != self.cfg.input_len() {
            return Err(NetError::InputLength {
                got: input.len(),
                want: self.cfg.input_len(),
            });
        }
        Ok(self.forward(input))
    }

    /// Forward pass that also captures the activations needed by
    /// [`QNetwork::backward`].
    pub fn forward_traced(&self, input: &[T]) -> (Vec<T>, Trace<T>) {
        let mut trace = Trace {
            conv_acts: Vec::with_capacity(self.cfg.seq_len),
            lstm_steps: Vec::with_capacity(self.cfg.seq_len),
            fc1_out: Vec::new(),
        };
        let q = self.run_forward(input, Some(&mut trace));
        (q, trace)
    }

    fn run_forward(&self, input: &[T], mut trace: Option<&mut Trace<T>>) -> Vec<T> {
        debug_assert_eq!(input.len(), self.cfg.input_len());
        let fov = self.cfg.fov;
        let slice_len = CHANNELS * fov * fov;
        let hidden = self.cfg.lstm_units;
        let feat_len = self.cfg.flat_features();
        let sizes = self.cfg.spatial_sizes();

        let mut h_prev = vec![T::zero(); hidden];
        let mut c_prev = vec![T::zero(); hidden];

        for t in 0..self.cfg.seq_len {
            // Conv stack on slice t.
            let mut acts: Vec<Vec<T>> = Vec::with_capacity(2 * self.cfg.conv_blocks + 1);
            acts.push(input[t * slice_len..(t + 1) * slice_len].to_vec());
            for (b, pair) in self.layout.conv.iter().enumerate() {
                let in_s = sizes[b];
                // Stride-1 conv keeps the side, stride-2 halves it (rounding up).
                let mid_s = in_s;
                let out_s = sizes[b + 1];
                let x = acts.last().unwrap();
                let mut y = vec![T::zero(); pair[0].out_c * mid_s * mid_s];
                conv2d_forward(x, &self.params, &pair[0], in_s, mid_s, &mut y);
                relu_inplace(&mut y);
                acts.push(y);
                let x = acts.last().unwrap();
                let mut y = vec![T::zero(); pair[1].out_c * out_s * out_s];
                conv2d_forward(x, &self.params, &pair[1], mid_s, out_s, &mut y);
                relu_inplace(&mut y);
                acts.push(y);
            }
            debug_assert_eq!(acts.last().unwrap().len(), feat_len);

            // LSTM step over the flattened features.
            let x = acts.last().unwrap();
            let step = self.lstm_step(x, &h_prev, &c_prev);
            h_prev.copy_from_slice(&step.hidden);
            c_prev.copy_from_slice(&step.cell);
            if let Some(tr) = trace.as_deref_mut() {
                tr.conv_acts.push(acts);
                tr.lstm_steps.push(step);
            }
        }

        // Dense head.
        let mut fc1 = vec![T::zero(); self.cfg.dense_units];
        dense_forward(
            &h_prev,
            self.layout.fc1_w.of(&self.params),
            self.layout.fc1_b.of(&self.params),
            &mut fc1,
        );
        relu_inplace(&mut fc1);
        let mut q = vec![T::zero(); self.cfg.actions()];
        dense_forward(
            &fc1,
            self.layout.fc2_w.of(&self.params),
            self.layout.fc2_b.of(&self.params),
            &mut q,
        );
        if let Some(tr) = trace {
            tr.fc1_out = fc1;
        }
        q
    }

    fn lstm_step(&self, x: &[T], h_prev: &[T], c_prev: &[T]) -> LstmStep<T> {
        let hidden = self.cfg.lstm_units;
        let input = x.len();
        let w_ih = self.layout.lstm_w_ih.of(&self.params);
        let w_hh = self.layout.lstm_w_hh.of(&self.params);
        let bias = self.layout.lstm_b.of(&self.params);

        // Pre-activations for the four gates, order [i, f, g, o].
        let mut z = vec![T::zero(); 4 * hidden];
        for (row, zr) in z.iter_mut().enumerate() {
            let wi = &w_ih[row * input..(row + 1) * input];
            let wh = &w_hh[row * hidden..(row + 1) * hidden];
            *zr = bias[row] + dot(wi, x) + dot(wh, h_prev);
        }

        let mut step = LstmStep {
            gate_i: vec![T::zero(); hidden],
            gate_f: vec![T::zero(); hidden],
            gate_g: vec![T::zero(); hidden],
            gate_o: vec![T::zero(); hidden],
            cell: vec![T::zero(); hidden],
            tanh_cell: vec![T::zero(); hidden],
            hidden: vec![T::zero(); hidden],
        };
        for h in 0..hidden {
            let i = sigmoid(z[h]);
            let f = sigmoid(z[hidden + h]);
            let g = z[2 * hidden + h].tanh();
            let o = sigmoid(z[3 * hidden + h]);
            let c = f * c_prev[h] + i * g;
            let tc = c.tanh();
            step.gate_i[h] = i;
            step.gate_f[h] = f;
            step.gate_g[h] = g;
            step.gate_o[h] = o;
            step.cell[h] = c;
            step.tanh_cell[h] = tc;
            step.hidden[h] = o * tc;
        }
        step
    }

    /// Accumulate `dLoss/dparams` into `grad` given the output gradient
    /// `dq` and the trace of the corresponding forward pass.
    pub fn backward(&self, trace: &Trace<T>, dq: &[T], grad: &mut [T]) {
        assert_eq!(dq.len(), self.cfg.actions());
        assert_eq!(grad.len(), self.layout.total);
        let hidden = self.cfg.lstm_units;
        let feat_len = self.cfg.flat_features();
        let sizes = self.cfg.spatial_sizes();

        // fc2 (linear).
        let fc1_out = &trace.fc1_out;
        let mut d_fc1 = vec![T::zero(); self.cfg.dense_units];
        dense_backward(
            fc1_out,
            self.layout.fc2_w.of(&self.params),
            dq,
            self.layout.fc2_w.of_mut(grad),
            &mut d_fc1,
        );
        for (g, &d) in self.layout.fc2_b.of_mut(grad).iter_mut().zip(dq) {
            *g += d;
        }

        // fc1 rectifier.
        for (d, &y) in d_fc1.iter_mut().zip(fc1_out.iter()) {
            if y <= T::zero() {
                *d = T::zero();
            }
        }
        let last_hidden = &trace.lstm_steps.last().unwrap().hidden;
        let mut dh = vec![T::zero(); hidden];
        dense_backward(
            last_hidden,
            self.layout.fc1_w.of(&self.params),
            &d_fc1,
            self.layout.fc1_w.of_mut(grad),
            &mut dh,
        );
        for (g, &d) in self.layout.fc1_b.of_mut(grad).iter_mut().zip(&d_fc1) {
            *g += d;
        }

        // LSTM backward through time; collect per-slice feature gradients.
        let mut dc = vec![T::zero(); hidden];
        let mut d_feats: Vec<Vec<T>> = vec![vec![T::zero(); feat_len]; self.cfg.seq_len];
        for t in (0..self.cfg.seq_len).rev() {
            let step = &trace.lstm_steps[t];
            let c_prev: &[T] = if t > 0 {
                &trace.lstm_steps[t - 1].cell
            } else {
                &[]
            };
            let h_prev: &[T] = if t > 0 {
                &trace.lstm_steps[t - 1].hidden
            } else {
                &[]
            };
            let x = trace.conv_acts[t].last().unwrap();

            // Gate pre-activation gradients, order [i, f, g, o].
            let mut dz = vec![T::zero(); 4 * hidden];
            for h in 0..hidden {
                let o = step.gate_o[h];
                let tc = step.tanh_cell[h];
                let d_o = dh[h] * tc;
                let dct = dc[h] + dh[h] * o * (T::one() - tc * tc);
                let i = step.gate_i[h];
                let f = step.gate_f[h];
                let g = step.gate_g[h];
                let cp = if t > 0 { c_prev[h] } else { T::zero() };
                let d_i = dct * g;
                let d_f = dct * cp;
                let d_g = dct * i;
                dz[h] = d_i * i * (T::one() - i);
                dz[hidden + h] = d_f * f * (T::one() - f);
                dz[2 * hidden + h] = d_g * (T::one() - g * g);
                dz[3 * hidden + h] = d_o * o * (T::one() - o);
                dc[h] = dct * f;
            }

            let input = feat_len;
            let w_ih = self.layout.lstm_w_ih.of(&self.params);
            let w_hh = self.layout.lstm_w_hh.of(&self.params);
            let g_w_ih = self.layout.lstm_w_ih.of_mut(grad);
            let dx = &mut d_feats[t];
            for (row, &dzr) in dz.iter().enumerate() {
                if dzr == T::zero() {
                    continue;
                }
                let wi = &w_ih[row * input..(row + 1) * input];
                let gi = &mut g_w_ih[row * input..(row + 1) * input];
                for j in 0..input {
                    gi[j] += dzr * x[j];
                    dx[j] += dzr * wi[j];
                }
            }
            let g_w_hh = self.layout.lstm_w_hh.of_mut(grad);
            let mut dh_prev = vec![T::zero(); hidden];
            for (row, &dzr) in dz.iter().enumerate() {
                if dzr == T::zero() {
                    continue;
                }
                let wh = &w_hh[row * hidden..(row + 1) * hidden];
                let gh = &mut g_w_hh[row * hidden..(row + 1) * hidden];
                if t > 0 {
                    for j in 0..hidden {
                        gh[j] += dzr * h_prev[j];
                        dh_prev[j] += dzr * wh[j];
                    }
                }
            }
            for (g, &d) in self.layout.lstm_b.of_mut(grad).iter_mut().zip(&dz) {
                *g += d;
            }
            dh = dh_prev;
        }

        // Conv stacks backward, slice by slice.
        for t in 0..self.cfg.seq_len {
            let acts = &trace.conv_acts[t];
            let mut dy = d_feats[t].clone();
            for b in (0..self.cfg.conv_blocks).rev() {
                let pair = &self.layout.conv[b];
                let in_s = sizes[b];
                let mid_s = in_s;
                let out_s = sizes[b + 1];
                // Activation indices inside `acts` for this block.
                let x0 = 2 * b; // block input
                let x1 = 2 * b + 1; // after stride-1 conv
                let x2 = 2 * b + 2; // after stride-2 conv

                relu_mask(&mut dy, &acts[x2]);
                let mut dx1 = vec![T::zero(); acts[x1].len()];
                conv2d_backward(
                    &acts[x1],
                    &self.params,
                    &pair[1],
                    mid_s,
                    out_s,
                    &dy,
                    &mut dx1,
                    grad,
                );
                relu_mask(&mut dx1, &acts[x1]);
                let mut dx0 = vec![T::zero(); acts[x0].len()];
                conv2d_backward(
                    &acts[x0],
                    &self.params,
                    &pair[0],
                    in_s,
                    mid_s,
                    &dx1,
                    &mut dx0,
                    grad,
                );
                dy = dx0;
            }
        }
    }
}

fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zero the gradient wherever the stored post-rectifier activation is zero.
fn relu_mask<T: Real>(d: &mut [T], y: &[T]) {
    for (di, &yi) in d.iter_mut().zip(y) {
        if yi <= T::zero() {
            *di = T::zero();
        }
    }
}

/// Output-coordinate range `[lo, hi)` for which `o * stride + k - 1` stays
/// inside `[0, in_s)`.
#[inline]
fn conv_valid_range(k: usize, stride: usize, in_s: usize, out_s: usize) -> (usize, usize) {
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    let max_num = in_s as isize - k as isize;
    let hi = if max_num < 0 {
        0
    } else {
        ((max_num as usize) / stride + 1).min(out_s)
    };
    (lo.min(hi), hi)
}

/// 3x3 convolution with one-pixel zero padding. `in_s`/`out_s` are the
/// square side lengths; `out_s = in_s` for stride 1, `(in_s + 1) / 2` for
/// stride 2. Written as shift-and-accumulate so the inner loops stay
/// branch-free.
fn conv2d_forward<T: Real>(
    x: &[T],
    params: &[T],
    conv: &ConvSpans,
    in_s: usize,
    out_s: usize,
    y: &mut [T],
) {
    let w = conv.w.of(params);
    let b = conv.b.of(params);
    let stride = conv.stride;
    for oc in 0..conv.out_c {
        let y_oc = &mut y[oc * out_s * out_s..(oc + 1) * out_s * out_s];
        y_oc.fill(b[oc]);
        for ic in 0..conv.in_c {
            let x_ic = &x[ic * in_s * in_s..(ic + 1) * in_s * in_s];
            let w_k = &w[(oc * conv.in_c + ic) * 9..(oc * conv.in_c + ic) * 9 + 9];
            for ky in 0..3usize {
                let (oy_lo, oy_hi) = conv_valid_range(ky, stride, in_s, out_s);
                for kx in 0..3usize {
                    let wv = w_k[ky * 3 + kx];
                    let (ox_lo, ox_hi) = conv_valid_range(kx, stride, in_s, out_s);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - 1;
                        let x_row = &x_ic[iy * in_s..iy * in_s + in_s];
                        let y_row = &mut y_oc[oy * out_s..oy * out_s + out_s];
                        if stride == 1 {
                            // ix = ox + kx - 1: one contiguous window.
                            let y_seg = &mut y_row[ox_lo..ox_hi];
                            let x_seg = &x_row[ox_lo + kx - 1..ox_hi + kx - 1];
                            for (yv, &xv) in y_seg.iter_mut().zip(x_seg) {
                                *yv += wv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                y_row[ox] += wv * x_row[ox * stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward pass of [`conv2d_forward`]: writes `dx` (must be zeroed) and
/// accumulates weight/bias gradients into `grad`.
#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Real>(
    x: &[T],
    params: &[T],
    conv: &ConvSpans,
    in_s: usize,
    out_s: usize,
    dy: &[T],
    dx: &mut [T],
    grad: &mut [T],
) {
    let stride = conv.stride;
    let w_all = conv.w.of(params);
    for oc in 0..conv.out_c {
        let dy_oc = &dy[oc * out_s * out_s..(oc + 1) * out_s * out_s];
        let mut db = T::zero();
        for &d in dy_oc {
            db += d;
        }
        grad[conv.b.offset + oc] += db;
        for ic in 0..conv.in_c {
            let x_ic = &x[ic * in_s * in_s..(ic + 1) * in_s * in_s];
            let dx_ic = &mut dx[ic * in_s * in_s..(ic + 1) * in_s * in_s];
            let w_base = (oc * conv.in_c + ic) * 9;
            for ky in 0..3usize {
                let (oy_lo, oy_hi) = conv_valid_range(ky, stride, in_s, out_s);
                for kx in 0..3usize {
                    let (ox_lo, ox_hi) = conv_valid_range(kx, stride, in_s, out_s);
                    let wv = w_all[w_base + ky * 3 + kx];
                    let mut dw = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - 1;
                        let x_row = &x_ic[iy * in_s..iy * in_s + in_s];
                        let dx_row = &mut dx_ic[iy * in_s..iy * in_s + in_s];
                        let dy_row = &dy_oc[oy * out_s..oy * out_s + out_s];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - 1;
                            let d = dy_row[ox];
                            dw += x_row[ix] * d;
                            dx_row[ix] += wv * d;
                        }
                    }
                    grad[conv.w.offset + w_base + ky * 3 + kx] += dw;
                }
            }
        }
    }
}

fn dense_forward<T: Real>(x: &[T], w: &[T], b: &[T], y: &mut [T]) {
    let n_in = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
    }
}

/// Accumulates `dw` and writes `dx` (must be zeroed) for a dense layer.
fn dense_backward<T: Real>(x: &[T], w: &[T], dy: &[T], dw: &mut [T], dx: &mut [T]) {
    let n_in = x.len();
    for (o, &d) in dy.iter().enumerate() {
        if d == T::zero() {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for j in 0..n_in {
            drow[j] += d * x[j];
            dx[j] += d * row[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            fov: 7,
            seq_len: 2,
            conv_blocks: 1,
            base_channels: 3,
            lstm_units: 8,
            dense_units: 6,
        }
    }

    fn random_input<T: Real>(cfg: &NetConfig, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.input_len())
            .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn reference_feature_shape() {
        let cfg = NetConfig::reference();
        assert_eq!(cfg.feature_shape(), (4, 2, 2, 128));
        assert_eq!(cfg.flat_features(), 512);
        assert_eq!(cfg.spatial_sizes(), vec![15, 8, 4, 2]);
    }

    #[test]
    fn output_has_five_actions_and_is_finite() {
        let net: QNetwork<f32> = QNetwork::new(tiny_cfg(), 1).unwrap();
        let input = random_input::<f32>(net.cfg(), 2);
        let q = net.forward(&input);
        assert_eq!(q.len(), 5);
        assert!(q.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zeroed_head_gives_zero_outputs() {
        let mut net: QNetwork<f64> = QNetwork::new(tiny_cfg(), 3).unwrap();
        let (w, b) = (net.layout.fc2_w, net.layout.fc2_b);
        for p in w.of_mut(&mut net.params) {
            *p = 0.0;
        }
        for p in b.of_mut(&mut net.params) {
            *p = 0.0;
        }
        let zeros = vec![0.0f64; net.input_len()];
        assert_eq!(net.forward(&zeros), vec![0.0; 5]);
    }

    #[test]
    fn forward_is_deterministic_and_seeded() {
        let a: QNetwork<f32> = QNetwork::new(tiny_cfg(), 7).unwrap();
        let b: QNetwork<f32> = QNetwork::new(tiny_cfg(), 7).unwrap();
        let c: QNetwork<f32> = QNetwork::new(tiny_cfg(), 8).unwrap();
        let input = random_input::<f32>(a.cfg(), 5);
        assert_eq!(a.forward(&input), b.forward(&input));
        assert_ne!(a.forward(&input), c.forward(&input));
    }

    #[test]
    fn sync_makes_forward_identical() {
        let src: QNetwork<f32> = QNetwork::new(tiny_cfg(), 11).unwrap();
        let mut dst: QNetwork<f32> = QNetwork::new(tiny_cfg(), 12).unwrap();
        dst.sync_from(&src);
        let input = random_input::<f32>(src.cfg(), 6);
        assert_eq!(src.forward(&input), dst.forward(&input));
    }

    #[test]
    fn input_length_is_checked() {
        let net: QNetwork<f32> = QNetwork::new(tiny_cfg(), 1).unwrap();
        assert!(net.try_forward(&[0.0; 3]).is_err());
    }

    /// Central finite differences on a small double-precision network; the
    /// independent oracle for the analytic backward pass.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = NetConfig {
            fov: 5,
            seq_len: 2,
            conv_blocks: 1,
            base_channels: 2,
            lstm_units: 4,
            dense_units: 4,
        };
        let mut net: QNetwork<f64> = QNetwork::new(cfg, 42).unwrap();
        let input = random_input::<f64>(&cfg, 43);
        let target = [0.3, -0.2, 0.1, 0.4, -0.5];

        let loss = |net: &QNetwork<f64>| -> f64 {
            let q = net.forward(&input);
            q.iter()
                .zip(target.iter())
                .map(|(qi, ti)| (qi - ti) * (qi - ti))
                .sum()
        };

        let (q, trace) = net.forward_traced(&input);
        let dq: Vec<f64> = q
            .iter()
            .zip(target.iter())
            .map(|(qi, ti)| 2.0 * (qi - ti))
            .collect();
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&trace, &dq, &mut grad);

        let eps = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..net.num_params() {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + eps;
            let up = loss(&net);
            net.params_mut()[i] = orig - eps;
            let down = loss(&net);
            net.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = numeric.abs().max(grad[i].abs()).max(1e-8);
            let rel = (numeric - grad[i]).abs() / denom;
            worst = worst.max(rel);
            assert!(
                rel <= 1e-4,
                "param {i}: analytic {} vs numeric {} (rel {rel})",
                grad[i],
                numeric
            );
        }
        assert!(worst < 1e-4);
    }
}
