//! Stacked LSTM: forward pass with cell clipping, a tape of every
//! intermediate needed for exact reverse mode, truncated backpropagation
//! through time counted from the end of the sequence, and global-norm
//! gradient clipping.
//!
//! Gate blocks are laid out as `[input | forget | candidate | output]`
//! along the `4 * hidden` axis of every weight matrix. Vectors are rows:
//! `z = x * W_x + h * W_h + b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{
    axpy, sigmoid, sigmoid_grad_from_output, tanh, tanh_grad_from_output, Matrix, RngState,
};
use crate::textpipe::PAD;

pub const GATES: usize = 4;
pub const INIT_SCALE: f64 = 0.08;
pub const FORGET_BIAS_INIT: f64 = 1.0;
pub const DEFAULT_CELL_CLIP: f64 = 50.0;
pub const DEFAULT_GRAD_MAX_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    /// `input_size x 4H`
    pub w_x: Matrix,
    /// `H x 4H`
    pub w_h: Matrix,
    /// `1 x 4H`
    pub b: Matrix,
}

impl LstmLayerParams {
    pub fn zeros(input_size: usize, hidden: usize) -> Self {
        LstmLayerParams {
            w_x: Matrix::zeros(input_size, GATES * hidden),
            w_h: Matrix::zeros(hidden, GATES * hidden),
            b: Matrix::zeros(1, GATES * hidden),
        }
    }

    /// Uniform `[-0.08, 0.08)` weights, zero biases except the forget gate at 1.0.
    pub fn init(input_size: usize, hidden: usize, rng: &mut RngState) -> Self {
        let mut b = Matrix::zeros(1, GATES * hidden);
        b.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS_INIT);
        LstmLayerParams {
            w_x: Matrix::uniform(input_size, GATES * hidden, INIT_SCALE, rng),
            w_h: Matrix::uniform(hidden, GATES * hidden, INIT_SCALE, rng),
            b,
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_x.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_h.rows()
    }
}

/// Embedding table plus the stacked layers. The same struct holds gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmStack {
    /// `|vocab| x embed_dim`; row 0 (PAD) stays zero. `None` for real-valued input.
    pub embedding: Option<Matrix>,
    pub layers: Vec<LstmLayerParams>,
}

impl LstmStack {
    pub fn init(vocab: Option<usize>, input_dim: usize, hidden: &[usize], rng: &mut RngState) -> Self {
        let embedding = vocab.map(|v| {
            let mut e = Matrix::uniform(v, input_dim, INIT_SCALE, rng);
            e.row_mut(PAD as usize).fill(0.0);
            e
        });
        let mut layers = Vec::with_capacity(hidden.len());
        let mut input = input_dim;
        for &h in hidden {
            layers.push(LstmLayerParams::init(input, h, rng));
            input = h;
        }
        LstmStack { embedding, layers }
    }

    pub fn zeros_like(&self) -> Self {
        LstmStack {
            embedding: self.embedding.as_ref().map(|e| Matrix::zeros(e.rows(), e.cols())),
            layers: self
                .layers
                .iter()
                .map(|l| LstmLayerParams::zeros(l.input_size(), l.hidden()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, LstmLayerParams::input_size)
    }

    pub fn top_hidden(&self) -> usize {
        self.layers.last().map_or(0, LstmLayerParams::hidden)
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(("embedding".to_string(), e));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("lstm.{i}.w_x"), &l.w_x));
            out.push((format!("lstm.{i}.w_h"), &l.w_h));
            out.push((format!("lstm.{i}.b"), &l.b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push(("embedding".to_string(), e));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("lstm.{i}.w_x"), &mut l.w_x));
            out.push((format!("lstm.{i}.w_h"), &mut l.w_h));
            out.push((format!("lstm.{i}.b"), &mut l.b));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClipTarget {
    /// Clamp the memory cell `c`.
    #[default]
    Cell,
    /// Clamp the layer output `h` instead.
    Hidden,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub cell_clip: f64,
    pub clip_target: ClipTarget,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            cell_clip: DEFAULT_CELL_CLIP,
            clip_target: ClipTarget::Cell,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(stack: &LstmStack) -> Self {
        LstmState {
            h: stack.layers.iter().map(|l| vec![0.0; l.hidden()]).collect(),
            c: stack.layers.iter().map(|l| vec![0.0; l.hidden()]).collect(),
        }
    }
}

/// Everything one layer computed at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct CellCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    /// `f*c_prev + i*g` before clamping (or `o*tanh(c)` when clamping `h`).
    pub pre_clip: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// One LSTM step. `cell_clip` bounds `c` (or `h`) elementwise.
pub fn cell_forward(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    params: &LstmLayerParams,
    config: &LstmConfig,
) -> Result<CellCache> {
    let hidden = params.hidden();
    if x.len() != params.input_size() || h_prev.len() != hidden || c_prev.len() != hidden {
        return Err(Error::Shape {
            op: "cell_forward",
            left: (x.len(), h_prev.len()),
            right: params.w_x.shape(),
        });
    }
    if !(config.cell_clip > 0.0) {
        return Err(Error::Config(format!("cell_clip must be positive, got {}", config.cell_clip)));
    }
    let mut z = params.b.data().to_vec();
    params.w_x.vec_mul_acc(x, &mut z);
    params.w_h.vec_mul_acc(h_prev, &mut z);

    let (zi, rest) = z.split_at(hidden);
    let (zf, rest) = rest.split_at(hidden);
    let (zg, zo) = rest.split_at(hidden);
    let i: Vec<f64> = zi.iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<f64> = zf.iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = zg.iter().map(|&v| tanh(v)).collect();
    let o: Vec<f64> = zo.iter().map(|&v| sigmoid(v)).collect();

    let clip = config.cell_clip;
    let raw_c: Vec<f64> = (0..hidden).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let (pre_clip, c, tanh_c, h) = match config.clip_target {
        ClipTarget::Cell => {
            let c: Vec<f64> = raw_c.iter().map(|v| v.clamp(-clip, clip)).collect();
            let tanh_c: Vec<f64> = c.iter().map(|&v| tanh(v)).collect();
            let h = (0..hidden).map(|k| o[k] * tanh_c[k]).collect();
            (raw_c, c, tanh_c, h)
        }
        ClipTarget::Hidden => {
            let tanh_c: Vec<f64> = raw_c.iter().map(|&v| tanh(v)).collect();
            let raw_h: Vec<f64> = (0..hidden).map(|k| o[k] * tanh_c[k]).collect();
            let h = raw_h.iter().map(|v| v.clamp(-clip, clip)).collect();
            (raw_h, raw_c, tanh_c, h)
        }
    };
    if !c.iter().chain(&h).all(|v: &f64| v.is_finite()) {
        return Err(Error::Numeric("LSTM cell state".into()));
    }
    Ok(CellCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        i,
        f,
        g,
        o,
        pre_clip,
        c,
        tanh_c,
        h,
    })
}

/// Input to the bottom layer.
#[derive(Clone, Debug, PartialEq)]
pub enum SeqInput {
    /// Token ids looked up in the embedding table. PAD steps pass the state through.
    Tokens(Vec<u32>),
    /// One real-valued row per timestep.
    Rows(Matrix),
}

impl SeqInput {
    pub fn len(&self) -> usize {
        match self {
            SeqInput::Tokens(t) => t.len(),
            SeqInput::Rows(r) => r.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_pad(&self, t: usize) -> bool {
        matches!(self, SeqInput::Tokens(ids) if ids[t] == PAD)
    }
}

/// Multiplicative input masks, already carrying the inverted-dropout scale.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InputMasks {
    /// One factor per input dimension, shared by every timestep.
    pub dims: Option<Vec<f64>>,
    /// One factor per timestep.
    pub words: Option<Vec<f64>>,
}

impl InputMasks {
    fn apply(&self, t: usize, x: &mut [f64]) {
        if let Some(d) = &self.dims {
            x.iter_mut().zip(d).for_each(|(v, m)| *v *= m);
        }
        if let Some(w) = &self.words {
            let m = w[t];
            x.iter_mut().for_each(|v| *v *= m);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapeStep {
    /// Empty for PAD steps, which copy the previous state.
    pub layers: Vec<CellCache>,
}

impl TapeStep {
    pub fn is_pass_through(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Per-timestep record of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TapeCache {
    pub input: SeqInput,
    pub masks: InputMasks,
    pub initial: LstmState,
    pub steps: Vec<TapeStep>,
    /// Top-layer hidden output per timestep.
    pub outputs: Vec<Vec<f64>>,
    pub final_state: LstmState,
}

impl TapeCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn input_vector(stack: &LstmStack, input: &SeqInput, t: usize) -> Result<Vec<f64>> {
    match input {
        SeqInput::Tokens(ids) => {
            let e = stack
                .embedding
                .as_ref()
                .ok_or_else(|| Error::Contract("token input needs an embedding table".into()))?;
            let id = ids[t] as usize;
            if id >= e.rows() {
                return Err(Error::Index { index: id, len: e.rows() });
            }
            Ok(e.row(id).to_vec())
        }
        SeqInput::Rows(m) => Ok(m.row(t).to_vec()),
    }
}

/// Runs the stack over `input`, starting from `initial` (zeros if `None`).
pub fn sequence_forward(
    stack: &LstmStack,
    input: &SeqInput,
    masks: &InputMasks,
    config: &LstmConfig,
    initial: Option<&LstmState>,
) -> Result<TapeCache> {
    let t_len = input.len();
    if t_len == 0 {
        return Err(Error::Contract("sequence length must be at least 1".into()));
    }
    if stack.layers.is_empty() {
        return Err(Error::Contract("LSTM needs at least one layer".into()));
    }
    if let SeqInput::Rows(m) = input {
        if m.cols() != stack.input_dim() {
            return Err(Error::Shape {
                op: "sequence_forward",
                left: m.shape(),
                right: stack.layers[0].w_x.shape(),
            });
        }
    }
    if masks.words.as_ref().is_some_and(|w| w.len() != t_len)
        || masks.dims.as_ref().is_some_and(|d| d.len() != stack.input_dim())
    {
        return Err(Error::Contract("dropout mask length does not match the input".into()));
    }
    let initial = initial.cloned().unwrap_or_else(|| LstmState::zeros(stack));
    let mut state = initial.clone();
    let mut steps = Vec::with_capacity(t_len);
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if input.is_pad(t) {
            steps.push(TapeStep { layers: Vec::new() });
            outputs.push(state.h.last().expect("non-empty stack").clone());
            continue;
        }
        let mut x = input_vector(stack, input, t)?;
        masks.apply(t, &mut x);
        let mut layers = Vec::with_capacity(stack.layers.len());
        for (l, params) in stack.layers.iter().enumerate() {
            let cache = cell_forward(&x, &state.h[l], &state.c[l], params, config).map_err(|e| match e {
                Error::Numeric(_) => Error::Numeric(format!("LSTM forward at timestep {t}, layer {l}")),
                other => other,
            })?;
            state.h[l].clone_from(&cache.h);
            state.c[l].clone_from(&cache.c);
            x = cache.h.clone();
            layers.push(cache);
        }
        outputs.push(x);
        steps.push(TapeStep { layers });
    }
    Ok(TapeCache {
        input: input.clone(),
        masks: masks.clone(),
        initial,
        steps,
        outputs,
        final_state: state,
    })
}

/// Re-runs the forward pass recorded in `tape` with its inputs and masks.
pub fn replay(stack: &LstmStack, tape: &TapeCache, config: &LstmConfig) -> Result<TapeCache> {
    sequence_forward(stack, &tape.input, &tape.masks, config, Some(&tape.initial))
}

/// Gradients that leave the stack through its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct InputGrads {
    /// dL/d(unmasked bottom-layer input) per timestep; zero outside the window.
    pub inputs: Vec<Vec<f64>>,
    /// First timestep that received gradient.
    pub window_start: usize,
}

/// First timestep inside the truncation window.
pub fn window_start(len: usize, truncate_k: usize) -> usize {
    len.saturating_sub(truncate_k)
}

/// Reverse pass. `output_grads[t]` is dL/dh of the top layer at step `t`
/// (an empty vector means zero). Only the last `truncate_k` steps are
/// differentiated; the state gradient that would flow into the step before
/// that window is dropped. Gradients are accumulated into `grads`.
pub fn sequence_backward(
    tape: &TapeCache,
    stack: &LstmStack,
    output_grads: &[Vec<f64>],
    truncate_k: usize,
    config: &LstmConfig,
    grads: &mut LstmStack,
) -> Result<InputGrads> {
    let t_len = tape.len();
    if output_grads.len() != t_len {
        return Err(Error::Contract(format!(
            "tape has {t_len} steps but {} output gradients were given",
            output_grads.len()
        )));
    }
    if truncate_k == 0 {
        return Err(Error::Config("truncate_k must be at least 1".into()));
    }
    let n_layers = stack.layers.len();
    let top = n_layers - 1;
    let in_dim = stack.input_dim();
    let start = window_start(t_len, truncate_k);
    let mut dh: Vec<Vec<f64>> = stack.layers.iter().map(|l| vec![0.0; l.hidden()]).collect();
    let mut dc = dh.clone();
    let mut input_grads = vec![Vec::new(); t_len];
    let clip = config.cell_clip;

    for t in (start..t_len).rev() {
        if let Some(g) = output_grads.get(t).filter(|g| !g.is_empty()) {
            if g.len() != dh[top].len() {
                return Err(Error::Contract(format!("output gradient at step {t} has wrong length")));
            }
            axpy(1.0, g, &mut dh[top]);
        }
        let step = &tape.steps[t];
        if step.is_pass_through() {
            input_grads[t] = vec![0.0; in_dim];
            continue;
        }
        let mut carry: Option<Vec<f64>> = None;
        for l in (0..n_layers).rev() {
            let cache = &step.layers[l];
            let params = &stack.layers[l];
            let hidden = params.hidden();
            let mut dh_l = std::mem::take(&mut dh[l]);
            if let Some(from_above) = carry.take() {
                axpy(1.0, &from_above, &mut dh_l);
            }
            let mut dz = vec![0.0; GATES * hidden];
            let mut dc_prev = vec![0.0; hidden];
            for k in 0..hidden {
                let (i, f, g, o) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k]);
                let mut dhk = dh_l[k];
                if config.clip_target == ClipTarget::Hidden && cache.pre_clip[k].abs() > clip {
                    dhk = 0.0;
                }
                let d_o = dhk * cache.tanh_c[k];
                let mut dck = dc[l][k] + dhk * o * tanh_grad_from_output(cache.tanh_c[k]);
                if config.clip_target == ClipTarget::Cell && cache.pre_clip[k].abs() > clip {
                    dck = 0.0;
                }
                dc_prev[k] = dck * f;
                dz[k] = dck * g * sigmoid_grad_from_output(i);
                dz[hidden + k] = dck * cache.c_prev[k] * sigmoid_grad_from_output(f);
                dz[2 * hidden + k] = dck * i * tanh_grad_from_output(g);
                dz[3 * hidden + k] = d_o * sigmoid_grad_from_output(o);
            }
            let gl = &mut grads.layers[l];
            gl.w_x.outer_acc(&cache.x, &dz);
            gl.w_h.outer_acc(&cache.h_prev, &dz);
            axpy(1.0, &dz, gl.b.data_mut());

            let mut dx = vec![0.0; params.input_size()];
            params.w_x.mul_vec_acc(&dz, &mut dx);
            let mut dh_prev = vec![0.0; hidden];
            params.w_h.mul_vec_acc(&dz, &mut dh_prev);
            dh[l] = dh_prev;
            dc[l] = dc_prev;
            carry = Some(dx);
        }
        // bottom-layer input: undo the masks, then route into the embedding
        let mut dx = carry.expect("at least one layer");
        tape.masks.apply(t, &mut dx);
        if let SeqInput::Tokens(ids) = &tape.input {
            let ge = grads
                .embedding
                .as_mut()
                .ok_or_else(|| Error::Contract("gradient buffer lacks an embedding table".into()))?;
            axpy(1.0, &dx, ge.row_mut(ids[t] as usize));
        }
        input_grads[t] = dx;
    }
    for g in input_grads.iter_mut().take(start) {
        *g = vec![0.0; in_dim];
    }
    Ok(InputGrads {
        inputs: input_grads,
        window_start: start,
    })
}

/// Outcome of [`clip_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipReport {
    /// Global L2 norm before clipping.
    pub norm: f64,
    /// Factor applied to every gradient (1.0 when unclipped).
    pub scale: f64,
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_gradients<'a, I>(grads: I, max_norm: f64) -> Result<ClipReport>
where
    I: IntoIterator<Item = &'a mut Matrix>,
{
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let mut grads: Vec<&mut Matrix> = grads.into_iter().collect();
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("gradient norm".into()));
    }
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale != 1.0 {
        grads.iter_mut().for_each(|g| g.scale(scale));
    }
    Ok(ClipReport { norm, scale })
}
