//! Small dense numeric toolkit with hand-written backward passes.
//!
//! Everything here runs in `f64` so analytic gradients can be checked against
//! central finite differences. Checkpoints store `f32`.

use rand::Rng;

/// Row-major dense matrix. Vectors are `n x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    /// Uniform initialization in `[-scale, scale]`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        Tensor { rows, cols, data }
    }

    /// Glorot-style uniform initialization.
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let scale = (6.0 / (rows + cols) as f64).sqrt();
        Self::uniform(rows, cols, scale, rng)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self * x`
    pub fn matvec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `self * x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_add(x, &mut out);
        out
    }

    /// `out += self^T * y`
    pub fn matvec_t_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
    }

    /// `self += y * x^T`
    pub fn outer_add(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols;
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (w, &xc) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *w += yr * xc;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators let the compiler vectorize the reduction.
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Uniform access to the trainable tensors of a model. Gradients are stored
/// in a value of the same type, so optimizers and EMA can walk both in lockstep.
pub trait Params {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<P: Params>(grad: &mut P, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm && norm > 0.0 {
        grad.scale(max_norm / norm);
    }
    norm
}

/// Adam optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grad: &P) {
        let grads = grad.tensors();
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

/// Recurrent state of one LSTM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(width: usize) -> Self {
        LstmState { h: vec![0.0; width], c: vec![0.0; width] }
    }
}

/// One LSTM layer. Gate blocks are stacked in the order input, forget,
/// candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

struct LstmStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Forward record of one layer over a sequence.
pub struct LstmRun {
    steps: Vec<LstmStep>,
    /// Hidden state after every step.
    pub hs: Vec<Vec<f64>>,
    pub last: LstmState,
}

impl Lstm {
    pub fn new<R: Rng>(input: usize, width: usize, rng: &mut R) -> Self {
        let mut b = Tensor::zeros(4 * width, 1);
        for v in &mut b.data[width..2 * width] {
            *v = 1.0;
        }
        Lstm {
            w: Tensor::glorot(4 * width, input, rng),
            u: Tensor::glorot(4 * width, width, rng),
            b,
        }
    }

    pub fn width(&self) -> usize {
        self.u.cols
    }

    pub fn input_width(&self) -> usize {
        self.w.cols
    }

    pub fn zeros_like(&self) -> Self {
        Lstm { w: self.w.zeros_like(), u: self.u.zeros_like(), b: self.b.zeros_like() }
    }

    fn tensors(&self) -> [&Tensor; 3] {
        [&self.w, &self.u, &self.b]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w, &mut self.u, &mut self.b]
    }

    pub fn forward(&self, xs: &[Vec<f64>], init: &LstmState) -> LstmRun {
        let hw = self.width();
        let mut h = init.h.clone();
        let mut c = init.c.clone();
        let mut steps = Vec::with_capacity(xs.len());
        let mut hs = Vec::with_capacity(xs.len());
        for x in xs {
            let mut a = self.b.data.clone();
            self.w.matvec_add(x, &mut a);
            self.u.matvec_add(&h, &mut a);
            let i: Vec<f64> = a[..hw].iter().map(|&v| sigmoid(v)).collect();
            let f: Vec<f64> = a[hw..2 * hw].iter().map(|&v| sigmoid(v)).collect();
            let g: Vec<f64> = a[2 * hw..3 * hw].iter().map(|&v| v.tanh()).collect();
            let o: Vec<f64> = a[3 * hw..].iter().map(|&v| sigmoid(v)).collect();
            let c_new: Vec<f64> = (0..hw).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
            let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
            let h_new: Vec<f64> = (0..hw).map(|k| o[k] * tanh_c[k]).collect();
            steps.push(LstmStep {
                x: x.clone(),
                h_prev: std::mem::replace(&mut h, h_new.clone()),
                c_prev: std::mem::replace(&mut c, c_new),
                i,
                f,
                g,
                o,
                tanh_c,
            });
            hs.push(h_new);
        }
        LstmRun { steps, hs, last: LstmState { h, c } }
    }

    /// Backpropagates through a forward run. `dhs[t]` is the loss gradient
    /// with respect to the emitted hidden state at step `t`; `dlast` the
    /// gradient with respect to the final state. Returns input gradients and
    /// the gradient with respect to the initial state.
    pub fn backward(
        &self,
        run: &LstmRun,
        dhs: &[Vec<f64>],
        dlast: &LstmState,
        grad: &mut Lstm,
    ) -> (Vec<Vec<f64>>, LstmState) {
        let hw = self.width();
        let mut dh = dlast.h.clone();
        let mut dc = dlast.c.clone();
        let mut dxs = vec![Vec::new(); run.steps.len()];
        for (t, s) in run.steps.iter().enumerate().rev() {
            for k in 0..hw {
                dh[k] += dhs[t][k];
            }
            let mut da = vec![0.0; 4 * hw];
            let mut dc_prev = vec![0.0; hw];
            for k in 0..hw {
                let do_ = dh[k] * s.tanh_c[k];
                let dck = dc[k] + dh[k] * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
                let di = dck * s.g[k];
                let df = dck * s.c_prev[k];
                let dg = dck * s.i[k];
                dc_prev[k] = dck * s.f[k];
                da[k] = di * s.i[k] * (1.0 - s.i[k]);
                da[hw + k] = df * s.f[k] * (1.0 - s.f[k]);
                da[2 * hw + k] = dg * (1.0 - s.g[k] * s.g[k]);
                da[3 * hw + k] = do_ * s.o[k] * (1.0 - s.o[k]);
            }
            grad.w.outer_add(&da, &s.x);
            grad.u.outer_add(&da, &s.h_prev);
            for (gb, d) in grad.b.data.iter_mut().zip(&da) {
                *gb += d;
            }
            let mut dx = vec![0.0; self.input_width()];
            self.w.matvec_t_add(&da, &mut dx);
            let mut dh_prev = vec![0.0; hw];
            self.u.matvec_t_add(&da, &mut dh_prev);
            dxs[t] = dx;
            dh = dh_prev;
            dc = dc_prev;
        }
        (dxs, LstmState { h: dh, c: dc })
    }
}

/// Stack of LSTM layers with optional dropout on every layer's output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStack {
    pub layers: Vec<Lstm>,
}

/// Dropout masks for a stack: `masks[layer][t]` multiplies the output of
/// `layer` at step `t`.
pub type StackMasks = Vec<Vec<Vec<f64>>>;

pub struct StackRun {
    layers: Vec<LstmRun>,
    masks: Option<StackMasks>,
    /// Top-layer outputs after dropout, one per step.
    pub outputs: Vec<Vec<f64>>,
    /// Final (undropped) state of every layer.
    pub finals: Vec<LstmState>,
}

impl LstmStack {
    pub fn new<R: Rng>(input: usize, width: usize, layers: usize, rng: &mut R) -> Self {
        let layers = (0..layers)
            .map(|l| Lstm::new(if l == 0 { input } else { width }, width, rng))
            .collect();
        LstmStack { layers }
    }

    pub fn width(&self) -> usize {
        self.layers[0].width()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn zeros_like(&self) -> Self {
        LstmStack { layers: self.layers.iter().map(Lstm::zeros_like).collect() }
    }

    pub fn zero_state(&self) -> Vec<LstmState> {
        vec![LstmState::zeros(self.width()); self.depth()]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    /// Checkpoint block names, in `tensors()` order.
    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        (0..self.depth())
            .flat_map(|l| ["w", "u", "b"].map(|n| format!("{prefix}.{l}.{n}")))
            .collect()
    }

    /// Draws masks for `steps` time steps; `None` when `rate == 0`.
    pub fn sample_masks<R: Rng>(&self, steps: usize, rate: f64, rng: &mut R) -> Option<StackMasks> {
        if rate <= 0.0 {
            return None;
        }
        Some(
            (0..self.depth())
                .map(|_| (0..steps).map(|_| dropout_mask(self.width(), rate, rng)).collect())
                .collect(),
        )
    }

    pub fn forward(&self, xs: &[Vec<f64>], init: &[LstmState], masks: Option<StackMasks>) -> StackRun {
        let mut input: Vec<Vec<f64>> = xs.to_vec();
        let mut layers = Vec::with_capacity(self.depth());
        let mut finals = Vec::with_capacity(self.depth());
        for (l, layer) in self.layers.iter().enumerate() {
            let run = layer.forward(&input, &init[l]);
            input = match &masks {
                Some(m) => run
                    .hs
                    .iter()
                    .zip(&m[l])
                    .map(|(h, mk)| h.iter().zip(mk).map(|(a, b)| a * b).collect())
                    .collect(),
                None => run.hs.clone(),
            };
            finals.push(run.last.clone());
            layers.push(run);
        }
        StackRun { layers, masks, outputs: input, finals }
    }

    /// `douts[t]`: gradient w.r.t. the top (dropped) output at `t`;
    /// `dfinals[l]`: gradient w.r.t. the final state of layer `l`.
    pub fn backward(
        &self,
        run: &StackRun,
        douts: &[Vec<f64>],
        dfinals: &[LstmState],
        grad: &mut LstmStack,
    ) -> (Vec<Vec<f64>>, Vec<LstmState>) {
        let mut dinit = vec![LstmState::zeros(self.width()); self.depth()];
        let mut d: Vec<Vec<f64>> = douts.to_vec();
        for l in (0..self.depth()).rev() {
            if let Some(m) = &run.masks {
                for (dt, mk) in d.iter_mut().zip(&m[l]) {
                    for (a, b) in dt.iter_mut().zip(mk) {
                        *a *= b;
                    }
                }
            }
            let (dxs, d0) = self.layers[l].backward(&run.layers[l], &d, &dfinals[l], &mut grad.layers[l]);
            dinit[l] = d0;
            d = dxs;
        }
        (d, dinit)
    }
}

/// Per-vector layer normalization with learned gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm { gain: Tensor::vector(vec![1.0; width]), bias: Tensor::zeros(width, 1) }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm { gain: self.gain.zeros_like(), bias: self.bias.zeros_like() }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
        let y = xhat
            .iter()
            .zip(&self.gain.data)
            .zip(&self.bias.data)
            .map(|((xh, g), b)| xh * g + b)
            .collect();
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let n = dy.len() as f64;
        let mut dxhat = vec![0.0; dy.len()];
        for k in 0..dy.len() {
            grad.gain.data[k] += dy[k] * cache.xhat[k];
            grad.bias.data[k] += dy[k];
            dxhat[k] = dy[k] * self.gain.data[k];
        }
        let sum_d = dxhat.iter().sum::<f64>();
        let sum_dx = dxhat.iter().zip(&cache.xhat).map(|(a, b)| a * b).sum::<f64>();
        dxhat
            .iter()
            .zip(&cache.xhat)
            .map(|(d, xh)| cache.inv_std * (d - sum_d / n - xh * sum_dx / n))
            .collect()
    }
}

/// Relative error used by the gradient checks: `|a - n| / max(|a| + |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}
