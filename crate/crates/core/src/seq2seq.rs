//! Attention encoder-decoder: a bidirectional GRU encoder, additive attention
//! over the encoder annotations and a GRU decoder whose output layer is one
//! affine map over `[s_t; c_t; e_{y_{t-1}}]` followed by softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::SentencePair;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeds;
use crate::textpipe::{BOS, EOS};

/// Half-width of the uniform initialization interval.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub embed_dim: usize,
    /// Per direction in the encoder; also the decoder state size.
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("src_vocab_size", self.src_vocab_size),
            ("tgt_vocab_size", self.tgt_vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Gate weights of one GRU: update `z`, reset `r` and candidate `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

const GRU_NAMES: [&str; 9] = [
    "w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h",
];

impl GruWeights {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Tensor::zeros(vec![hidden_dim, input_dim]).with_grad();
        let u = || Tensor::zeros(vec![hidden_dim, hidden_dim]).with_grad();
        let b = || Tensor::zeros(vec![hidden_dim]).with_grad();
        GruWeights {
            w_z: w(),
            w_r: w(),
            w_h: w(),
            u_z: u(),
            u_r: u(),
            u_h: u(),
            b_z: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r,
            &self.b_h,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub src_embed: Tensor,
    pub tgt_embed: Tensor,
    pub encoder_fwd: GruWeights,
    pub encoder_bwd: GruWeights,
    pub decoder: GruWeights,
    /// `W_a`, applied to the previous decoder state.
    pub attn_w: Tensor,
    /// `U_a`, applied to each annotation.
    pub attn_u: Tensor,
    /// `v_a`, reduces the attention hidden layer to a score.
    pub attn_v: Tensor,
    pub bridge: Tensor,
    pub out_proj: Tensor,
    pub out_bias: Tensor,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (e, h, a) = (cfg.embed_dim, cfg.hidden_dim, cfg.attention_dim);
        let t = |shape: Vec<usize>| Tensor::zeros(shape).with_grad();
        ModelParams {
            src_embed: t(vec![cfg.src_vocab_size, e]),
            tgt_embed: t(vec![cfg.tgt_vocab_size, e]),
            encoder_fwd: GruWeights::zeros(e, h),
            encoder_bwd: GruWeights::zeros(e, h),
            decoder: GruWeights::zeros(e + 2 * h, h),
            attn_w: t(vec![a, h]),
            attn_u: t(vec![a, 2 * h]),
            attn_v: t(vec![a]),
            bridge: t(vec![h, h]),
            out_proj: t(vec![cfg.tgt_vocab_size, h + 2 * h + e]),
            out_bias: t(vec![cfg.tgt_vocab_size]),
        }
    }

    /// Weights uniform on `[-0.08, 0.08]`, biases zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut params = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in params.named_mut() {
            if is_bias(&name) {
                continue;
            }
            for v in t.data_mut() {
                *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
            }
        }
        params
    }

    /// Tensors with their stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("src_embed".into(), &self.src_embed),
            ("tgt_embed".into(), &self.tgt_embed),
        ];
        for (prefix, gru) in [
            ("encoder_fwd", &self.encoder_fwd),
            ("encoder_bwd", &self.encoder_bwd),
            ("decoder", &self.decoder),
        ] {
            for (n, t) in GRU_NAMES.iter().zip(gru.tensors()) {
                out.push((format!("{prefix}.{n}"), t));
            }
        }
        out.extend([
            ("attn_W".into(), &self.attn_w),
            ("attn_U".into(), &self.attn_u),
            ("attn_v".into(), &self.attn_v),
            ("bridge".into(), &self.bridge),
            ("out_proj".into(), &self.out_proj),
            ("out_bias".into(), &self.out_bias),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("src_embed".into(), &mut self.src_embed),
            ("tgt_embed".into(), &mut self.tgt_embed),
        ];
        for (prefix, gru) in [
            ("encoder_fwd", &mut self.encoder_fwd),
            ("encoder_bwd", &mut self.encoder_bwd),
            ("decoder", &mut self.decoder),
        ] {
            for (n, t) in GRU_NAMES.iter().zip(gru.tensors_mut()) {
                out.push((format!("{prefix}.{n}"), t));
            }
        }
        out.extend([
            ("attn_W".into(), &mut self.attn_w),
            ("attn_U".into(), &mut self.attn_u),
            ("attn_v".into(), &mut self.attn_v),
            ("bridge".into(), &mut self.bridge),
            ("out_proj".into(), &mut self.out_proj),
            ("out_bias".into(), &mut self.out_bias),
        ]);
        out
    }

    pub fn num_tensors(&self) -> usize {
        self.named().len()
    }

    /// Adds per-tensor gradients (in [`ModelParams::named`] order).
    pub fn accumulate_grads(&mut self, grads: &[Option<Vec<f64>>]) -> Result<()> {
        let mut tensors = self.named_mut();
        if grads.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} tensors",
                grads.len(),
                tensors.len()
            )));
        }
        for ((_, t), g) in tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_mut() {
            t.zero_grad();
        }
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(cfg);
        for ((name, have), (_, want)) in self.named().into_iter().zip(expected.named()) {
            if have.shape() != want.shape() {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, config implies {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn is_bias(name: &str) -> bool {
    name.ends_with(".b_z") || name.ends_with(".b_r") || name.ends_with(".b_h") || name == "out_bias"
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn register<'a>(g: &mut Graph<'a>, w: &'a GruWeights) -> Self {
        GruVars {
            w_z: g.leaf(&w.w_z),
            w_r: g.leaf(&w.w_r),
            w_h: g.leaf(&w.w_h),
            u_z: g.leaf(&w.u_z),
            u_r: g.leaf(&w.u_r),
            u_h: g.leaf(&w.u_h),
            b_z: g.leaf(&w.b_z),
            b_r: g.leaf(&w.b_r),
            b_h: g.leaf(&w.b_h),
        }
    }

    fn in_order(&self) -> [Var; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r,
            self.b_h,
        ]
    }
}

/// Graph handles for every parameter tensor.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub src_embed: Var,
    pub tgt_embed: Var,
    pub encoder_fwd: GruVars,
    pub encoder_bwd: GruVars,
    pub decoder: GruVars,
    pub attn_w: Var,
    pub attn_u: Var,
    pub attn_v: Var,
    pub bridge: Var,
    pub out_proj: Var,
    pub out_bias: Var,
}

impl ParamVars {
    pub fn register<'a>(g: &mut Graph<'a>, p: &'a ModelParams) -> Self {
        ParamVars {
            src_embed: g.leaf(&p.src_embed),
            tgt_embed: g.leaf(&p.tgt_embed),
            encoder_fwd: GruVars::register(g, &p.encoder_fwd),
            encoder_bwd: GruVars::register(g, &p.encoder_bwd),
            decoder: GruVars::register(g, &p.decoder),
            attn_w: g.leaf(&p.attn_w),
            attn_u: g.leaf(&p.attn_u),
            attn_v: g.leaf(&p.attn_v),
            bridge: g.leaf(&p.bridge),
            out_proj: g.leaf(&p.out_proj),
            out_bias: g.leaf(&p.out_bias),
        }
    }

    /// Same order as [`ModelParams::named`].
    pub fn in_order(&self) -> Vec<Var> {
        let mut out = vec![self.src_embed, self.tgt_embed];
        out.extend(self.encoder_fwd.in_order());
        out.extend(self.encoder_bwd.in_order());
        out.extend(self.decoder.in_order());
        out.extend([
            self.attn_w,
            self.attn_u,
            self.attn_v,
            self.bridge,
            self.out_proj,
            self.out_bias,
        ]);
        out
    }
}

/// One GRU step:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 - z) ⊙ h + z ⊙ h̃`.
pub fn gru_cell(g: &mut Graph<'_>, x: Var, h_prev: Var, w: &GruVars) -> Result<Var> {
    let gate = |g: &mut Graph<'_>, wm: Var, um: Var, b: Var, h: Var| -> Result<Var> {
        let wx = g.matvec(wm, x)?;
        let uh = g.matvec(um, h)?;
        let s = g.add(wx, uh)?;
        g.add(s, b)
    };
    let z_pre = gate(g, w.w_z, w.u_z, w.b_z, h_prev)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, w.w_r, w.u_r, w.b_r, h_prev)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h_prev)?;
    let cand_pre = gate(g, w.w_h, w.u_h, w.b_h, rh)?;
    let cand = g.tanh(cand_pre);
    let ones = g.constant(vec![1.0; g.value(z).len()]);
    let keep = g.sub(ones, z)?;
    let kept = g.mul(keep, h_prev)?;
    let fresh = g.mul(z, cand)?;
    g.add(kept, fresh)
}

/// Encoder output for one source sentence.
#[derive(Debug, Clone)]
pub struct Annotations {
    pub fwd: Vec<Var>,
    pub bwd: Vec<Var>,
    /// `h_j = [fwd_j ; bwd_j]`.
    pub h: Vec<Var>,
    /// Annotations as the columns of a `[2H × l]` matrix.
    pub columns: Var,
    /// `U_a h_j` for every j, as an `[l × A]` matrix.
    pub keys: Var,
}

impl Annotations {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

// Dropout streams inside one forward pass.
const TAG_SRC_EMBED: u64 = 1;
const TAG_TGT_EMBED: u64 = 2;

pub fn encode(
    g: &mut Graph<'_>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    src_ids: &[usize],
    training: bool,
    seed: u64,
) -> Result<Annotations> {
    if src_ids.is_empty() {
        return Err(Error::InvalidArgument("empty source sentence".into()));
    }
    let emb = g.gather_rows(pv.src_embed, src_ids)?;
    let emb = g.dropout(
        emb,
        cfg.dropout_rate,
        training,
        seeds::derive(seed, TAG_SRC_EMBED),
    )?;
    let l = src_ids.len();
    let xs = (0..l).map(|j| g.row(emb, j)).collect::<Result<Vec<_>>>()?;
    let zero = g.constant(vec![0.0; cfg.hidden_dim]);

    let mut fwd = Vec::with_capacity(l);
    let mut h = zero;
    for &x in &xs {
        h = gru_cell(g, x, h, &pv.encoder_fwd)?;
        fwd.push(h);
    }
    let mut bwd = vec![zero; l];
    let mut h = zero;
    for j in (0..l).rev() {
        h = gru_cell(g, xs[j], h, &pv.encoder_bwd)?;
        bwd[j] = h;
    }
    let hs = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| g.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    let rows = g.stack_rows(&hs)?;
    let columns = g.transpose(rows)?;
    let u_t = g.transpose(pv.attn_u)?;
    let keys = g.matmul(rows, u_t)?;
    Ok(Annotations {
        fwd,
        bwd,
        h: hs,
        columns,
        keys,
    })
}

/// `s_0 = tanh(bridge · bwd_1)`.
pub fn initial_state(g: &mut Graph<'_>, ann: &Annotations, pv: &ParamVars) -> Result<Var> {
    let first = *ann
        .bwd
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty annotations".into()))?;
    let pre = g.matvec(pv.bridge, first)?;
    Ok(g.tanh(pre))
}

/// Additive attention against the pre-update decoder state. Returns the
/// context vector and the attention weights.
pub fn attention(
    g: &mut Graph<'_>,
    s_prev: Var,
    ann: &Annotations,
    pv: &ParamVars,
) -> Result<(Var, Var)> {
    let ws = g.matvec(pv.attn_w, s_prev)?;
    let tiled = g.tile_rows(ws, ann.len())?;
    let pre = g.add(tiled, ann.keys)?;
    let hidden = g.tanh(pre);
    let scores = g.matvec(hidden, pv.attn_v)?;
    let weights = g.softmax(scores)?;
    let context = g.matvec(ann.columns, weights)?;
    Ok((context, weights))
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeStep {
    pub probs: Var,
    pub state: Var,
    pub weights: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn decode_step(
    g: &mut Graph<'_>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    y_prev: usize,
    s_prev: Var,
    ann: &Annotations,
    training: bool,
    seed: u64,
) -> Result<DecodeStep> {
    if y_prev >= cfg.tgt_vocab_size {
        return Err(Error::Index(format!(
            "target id {y_prev} outside vocabulary of {}",
            cfg.tgt_vocab_size
        )));
    }
    let emb = g.gather_rows(pv.tgt_embed, &[y_prev])?;
    let emb = g.row(emb, 0)?;
    let emb = g.dropout(emb, cfg.dropout_rate, training, seed)?;
    let (context, weights) = attention(g, s_prev, ann, pv)?;
    let input = g.concat(&[emb, context])?;
    let state = gru_cell(g, input, s_prev, &pv.decoder)?;
    let features = g.concat(&[state, context, emb])?;
    let logits = g.matvec(pv.out_proj, features)?;
    let logits = g.add(logits, pv.out_bias)?;
    let probs = g.softmax(logits)?;
    Ok(DecodeStep {
        probs,
        state,
        weights,
    })
}

/// Teacher-forced mean cross-entropy over `tgt_ids` followed by `</s>`.
pub fn forward_loss(
    g: &mut Graph<'_>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    pair: &SentencePair,
    training: bool,
    seed: u64,
) -> Result<Var> {
    if pair.src_ids.is_empty() || pair.tgt_ids.is_empty() {
        return Err(Error::InvalidArgument(
            "sentence pair with an empty side".into(),
        ));
    }
    let ann = encode(g, pv, cfg, &pair.src_ids, training, seed)?;
    let mut state = initial_state(g, &ann, pv)?;
    let inputs = std::iter::once(BOS).chain(pair.tgt_ids.iter().copied());
    let targets = pair.tgt_ids.iter().copied().chain(std::iter::once(EOS));
    let mut losses = Vec::with_capacity(pair.tgt_ids.len() + 1);
    for (t, (y_prev, target)) in inputs.zip(targets).enumerate() {
        let step_seed = seeds::derive(seeds::derive(seed, TAG_TGT_EMBED), t as u64);
        let step = decode_step(g, pv, cfg, y_prev, state, &ann, training, step_seed)?;
        losses.push(g.cross_entropy(step.probs, target)?);
        state = step.state;
    }
    let total = g.add_n(&losses)?;
    Ok(g.scale(total, 1.0 / losses.len() as f64))
}

/// Loss value only.
pub fn loss_value(
    params: &ModelParams,
    cfg: &ModelConfig,
    pair: &SentencePair,
    training: bool,
    seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, params);
    let loss = forward_loss(&mut g, &pv, cfg, pair, training, seed)?;
    Ok(g.scalar(loss))
}

/// Loss and per-tensor gradients in [`ModelParams::named`] order.
pub fn loss_and_grads(
    params: &ModelParams,
    cfg: &ModelConfig,
    pair: &SentencePair,
    training: bool,
    seed: u64,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, params);
    let loss = forward_loss(&mut g, &pv, cfg, pair, training, seed)?;
    let grads = g.backward(loss)?;
    let per_tensor = pv
        .in_order()
        .into_iter()
        .map(|v| grads.get(v).map(<[f64]>::to_vec))
        .collect();
    Ok((g.scalar(loss), per_tensor))
}
