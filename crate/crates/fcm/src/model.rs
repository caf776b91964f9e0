//! PaLM-family decoder-only transformer: RoPE, multi-query attention, SwiGLU,
//! parallel layers, no biases, shared input/output embedding. The forward pass
//! takes a per-sequence attention bias so forgetful masking is a pure overlay
//! on the causal mask.

use crate::data::Batch;
use crate::masking::{
    apply_token_mask, build_attention_bias, causal_bias, sample_mask_plan, MaskConfig, MaskError,
    MaskPlan, MaskVariant,
};
use crate::tensor::{IntTensor, Tape, TensorError, TensorId};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("sequence length {got} exceeds configured maximum {max}")]
    SeqTooLong { got: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub dropout_rate: f32,
}

impl ModelConfig {
    /// Small config for tests and laptop runs.
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_head: 32,
            vocab_size: crate::data::VOCAB_SIZE,
            seq_len: 128,
            d_ff: 256,
            dropout_rate: 0.0,
        }
    }

    /// The PaLM-family scale rows (head size 256, d_ff = 4 d_model, 32K vocab).
    pub fn palm_128m() -> Self {
        Self::palm(8, 4, 1024)
    }

    pub fn palm_1b() -> Self {
        Self::palm(16, 8, 2048)
    }

    pub fn palm_8b() -> Self {
        Self::palm(32, 16, 4096)
    }

    fn palm(n_layers: usize, n_heads: usize, d_model: usize) -> Self {
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_head: 256,
            vocab_size: 32_000,
            seq_len: 1024,
            d_ff: 4 * d_model,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_ff != 4 * self.d_model {
            return Err(ModelError::BadConfig(format!(
                "d_ff must equal 4 * d_model ({} != 4 * {})",
                self.d_ff, self.d_model
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(ModelError::BadConfig(format!("d_head must be even, got {}", self.d_head)));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(ModelError::BadConfig("zero-sized dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::BadConfig(format!("dropout {} not in [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Width of the query projection; keys and values share one head.
    pub fn q_width(&self) -> usize {
        self.n_heads * self.d_head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub norm_gain: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub w_gate: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

/// All model parameters. No bias vectors anywhere; the output projection is
/// the token embedding transposed.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub token_embedding: Vec<f32>,
    pub layers: Vec<LayerParams>,
    pub final_norm_gain: Vec<f32>,
}

/// Shapes of every named parameter tensor, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, qw, dh, dff, v) = (cfg.d_model, cfg.q_width(), cfg.d_head, cfg.d_ff, cfg.vocab_size);
    let mut out = vec![("token_embedding".to_string(), vec![v, d])];
    for i in 0..cfg.n_layers {
        out.push((format!("layers.{i}.norm_gain"), vec![d]));
        out.push((format!("layers.{i}.wq"), vec![d, qw]));
        out.push((format!("layers.{i}.wk"), vec![d, dh]));
        out.push((format!("layers.{i}.wv"), vec![d, dh]));
        out.push((format!("layers.{i}.wo"), vec![qw, d]));
        out.push((format!("layers.{i}.w_gate"), vec![d, dff]));
        out.push((format!("layers.{i}.w_up"), vec![d, dff]));
        out.push((format!("layers.{i}.w_down"), vec![dff, d]));
    }
    out.push(("final_norm_gain".to_string(), vec![d]));
    out
}

impl Params {
    /// Tensors in the canonical order of [`param_shapes`].
    pub fn tensors(&self) -> Vec<&Vec<f32>> {
        let mut out = vec![&self.token_embedding];
        for l in &self.layers {
            out.extend([&l.norm_gain, &l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down]);
        }
        out.push(&self.final_norm_gain);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = vec![&mut self.token_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.norm_gain,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm_gain);
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn non_embedding_count(&self) -> usize {
        self.count() - self.token_embedding.len()
    }

    /// Closed-form parameter count for a config.
    pub fn count_formula(cfg: &ModelConfig) -> usize {
        let (d, qw, dh, dff, v) = (cfg.d_model, cfg.q_width(), cfg.d_head, cfg.d_ff, cfg.vocab_size);
        let per_layer = d + d * qw + 2 * d * dh + qw * d + 2 * d * dff + dff * d;
        v * d + cfg.n_layers * per_layer + d
    }
}

/// Fan-in normal init for every weight matrix (variance 1/fan_in), standard
/// normal embedding, unit norm gains. Deterministic given the rng.
pub fn init_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Params, ModelError> {
    cfg.validate()?;
    let (d, qw, dh, dff) = (cfg.d_model, cfg.q_width(), cfg.d_head, cfg.d_ff);
    let normal = |rng: &mut ChaCha8Rng, n: usize, std: f32| -> Vec<f32> {
        let dist = Normal::new(0.0f32, std).expect("valid std");
        (0..n).map(|_| dist.sample(rng)).collect()
    };
    let fan_in = |fi: usize| (1.0 / fi as f32).sqrt();

    let token_embedding = normal(rng, cfg.vocab_size * d, 1.0);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerParams {
            norm_gain: vec![1.0; d],
            wq: normal(rng, d * qw, fan_in(d)),
            wk: normal(rng, d * dh, fan_in(d)),
            wv: normal(rng, d * dh, fan_in(d)),
            wo: normal(rng, qw * d, fan_in(qw)),
            w_gate: normal(rng, d * dff, fan_in(d)),
            w_up: normal(rng, d * dff, fan_in(d)),
            w_down: normal(rng, dff * d, fan_in(dff)),
        });
    }
    let final_norm_gain = vec![1.0; d];
    Ok(Params { token_embedding, layers, final_norm_gain })
}

/// Rotate query/key pairs by position-dependent angles (RoPE, base 10000).
pub fn rope_rotate(tape: &mut Tape, x: TensorId, positions: &[u32]) -> Result<TensorId, ModelError> {
    Ok(tape.rope(x, positions)?)
}

/// Parameter tensors staged as tape leaves for one forward/backward pass.
pub struct LayerNodes {
    pub norm_gain: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub w_gate: TensorId,
    pub w_up: TensorId,
    pub w_down: TensorId,
}

pub struct ParamNodes {
    pub token_embedding: TensorId,
    pub layers: Vec<LayerNodes>,
    pub final_norm_gain: TensorId,
}

impl ParamNodes {
    /// Node ids in the canonical parameter order.
    pub fn ids(&self) -> Vec<TensorId> {
        let mut out = vec![self.token_embedding];
        for l in &self.layers {
            out.extend([l.norm_gain, l.wq, l.wk, l.wv, l.wo, l.w_gate, l.w_up, l.w_down]);
        }
        out.push(self.final_norm_gain);
        out
    }
}

pub fn stage_params(
    tape: &mut Tape,
    params: &Params,
    cfg: &ModelConfig,
    requires_grad: bool,
) -> ParamNodes {
    let shapes = param_shapes(cfg);
    let tensors = params.tensors();
    let mut nodes: Vec<TensorId> = shapes
        .iter()
        .zip(tensors)
        .map(|((_, shape), data)| tape.leaf(shape.clone(), data.clone(), requires_grad))
        .collect();
    let final_norm_gain = nodes.pop().unwrap();
    let token_embedding = nodes.remove(0);
    let layers = nodes
        .chunks_exact(8)
        .map(|c| LayerNodes {
            norm_gain: c[0],
            wq: c[1],
            wk: c[2],
            wv: c[3],
            wo: c[4],
            w_gate: c[5],
            w_up: c[6],
            w_down: c[7],
        })
        .collect();
    ParamNodes { token_embedding, layers, final_norm_gain }
}

/// Dropout context for finetuning; pre-training runs without one.
pub struct Dropout<'a> {
    pub rate: f32,
    pub rng: &'a mut ChaCha8Rng,
}

/// Multi-query attention over normalized activations `u` `[b, s, d_model]`:
/// n_heads query heads share a single key/value head, RoPE on q and k, the
/// additive bias `[b, s, s]` carries causality and any forgetful masking.
pub fn multi_query_attention(
    tape: &mut Tape,
    u: TensorId,
    layer: &LayerNodes,
    cfg: &ModelConfig,
    bias: TensorId,
) -> Result<TensorId, ModelError> {
    let dims = tape.shape(u).to_vec();
    let (b, s) = (dims[0], dims[1]);
    let (h, dh) = (cfg.n_heads, cfg.d_head);
    let positions: Vec<u32> = (0..s as u32).collect();

    let q = tape.matmul(u, layer.wq)?; // [b, s, h*dh]
    let q = tape.reshape(q, vec![b, s, h, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?; // [b, h, s, dh]
    let q = tape.rope(q, &positions)?;

    let k = tape.matmul(u, layer.wk)?; // [b, s, dh]
    let k = tape.rope(k, &positions)?;
    let kt = tape.transpose_last2(k); // [b, dh, s]
    let kt = tape.reshape(kt, vec![b, 1, dh, s])?;

    let v = tape.matmul(u, layer.wv)?; // [b, s, dh]
    let v = tape.reshape(v, vec![b, 1, s, dh])?;

    let scores = tape.matmul(q, kt)?; // [b, h, s, s]
    let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());
    let scores = tape.bias_add(scores, bias)?;
    let probs = tape.softmax_lastdim(scores)?;

    let ctx = tape.matmul(probs, v)?; // [b, h, s, dh]
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?; // [b, s, h, dh]
    let ctx = tape.reshape(ctx, vec![b, s, h * dh])?;
    Ok(tape.matmul(ctx, layer.wo)?) // [b, s, d_model]
}

/// One parallel transformer layer: a single normalization feeds both the
/// attention and SwiGLU branches, whose outputs add back into the residual.
pub fn parallel_block(
    tape: &mut Tape,
    h: TensorId,
    layer: &LayerNodes,
    cfg: &ModelConfig,
    bias: TensorId,
    dropout: Option<&mut Dropout>,
) -> Result<TensorId, ModelError> {
    let u = tape.rms_norm(h, layer.norm_gain)?;

    let mut attn = multi_query_attention(tape, u, layer, cfg, bias)?;

    let gate_pre = tape.matmul(u, layer.w_gate)?;
    let gate = tape.swish(gate_pre);
    let up = tape.matmul(u, layer.w_up)?;
    let gated = tape.mul(gate, up)?;
    let mut ffn = tape.matmul(gated, layer.w_down)?;

    if let Some(d) = dropout {
        if d.rate > 0.0 {
            attn = tape.dropout(attn, d.rate, d.rng);
            ffn = tape.dropout(ffn, d.rate, d.rng);
        }
    }

    let sum = tape.add(h, attn)?;
    Ok(tape.add(sum, ffn)?)
}

/// Logits `[b, s, vocab]` for a batch of token ids under a per-sequence
/// additive attention bias `[b, s, s]`. Token-variant substitution, if any,
/// happens before this call.
pub fn forward_logits(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    ids: &IntTensor,
    bias: Vec<f32>,
    mut dropout: Option<&mut Dropout>,
) -> Result<TensorId, ModelError> {
    let (b, s) = (ids.shape[0], ids.shape[1]);
    if s > cfg.seq_len {
        return Err(ModelError::SeqTooLong { got: s, max: cfg.seq_len });
    }
    assert_eq!(bias.len(), b * s * s, "bias must be [b, s, s]");
    let bias_node = tape.leaf(vec![b, s, s], bias, false);

    let mut h = tape.embedding_lookup(pn.token_embedding, ids)?;
    for layer in &pn.layers {
        h = parallel_block(tape, h, layer, cfg, bias_node, dropout.as_deref_mut())?;
    }
    let hf = tape.rms_norm(h, pn.final_norm_gain)?;
    let et = tape.transpose_last2(pn.token_embedding);
    Ok(tape.matmul(hf, et)?)
}

/// Next-token targets and loss weights for a batch: position t predicts
/// ids[t+1]; the final position (which would predict past the window) and all
/// PAD targets carry weight zero.
fn shift_targets(batch: &Batch) -> (IntTensor, Vec<f32>) {
    let (b, s) = (batch.batch_size(), batch.seq_len());
    let mut targets = vec![0u32; b * s];
    let mut weights = vec![0.0f32; b * s];
    for bi in 0..b {
        for t in 0..s - 1 {
            targets[bi * s + t] = batch.ids.data[bi * s + t + 1];
            weights[bi * s + t] = batch.loss_weights[bi * (s - 1) + t];
        }
    }
    (IntTensor::new(vec![b, s], targets), weights)
}

pub struct LossOutput {
    pub loss: TensorId,
    pub plans: Vec<MaskPlan>,
}

/// The forgetful-masking training objective: per sequence, draw one mask plan,
/// hide the selected past tokens, and take the mean next-token cross-entropy
/// over all loss positions. With a (0, 0) ratio range this reduces exactly to
/// the plain causal objective.
pub fn fcm_loss(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    batch: &Batch,
    mask_cfg: &MaskConfig,
    mask_rng: &mut ChaCha8Rng,
    dropout: Option<&mut Dropout>,
) -> Result<LossOutput, ModelError> {
    mask_cfg.validate()?;
    let (b, s) = (batch.batch_size(), batch.seq_len());
    let mut plans = Vec::with_capacity(b);
    for _ in 0..b {
        let plan = match mask_cfg.variant {
            MaskVariant::None => MaskPlan::keep_all(s, MaskVariant::None),
            _ => sample_mask_plan(s, mask_cfg, mask_rng)?,
        };
        plans.push(plan);
    }
    let loss = fcm_loss_with_plans(tape, pn, cfg, batch, &plans, mask_cfg.mask_token_id, dropout)?;
    Ok(LossOutput { loss, plans })
}

/// [`fcm_loss`] with the per-sequence plans already drawn; the loss is then a
/// pure function of the parameters, which is what gradient oracles need.
pub fn fcm_loss_with_plans(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    batch: &Batch,
    plans: &[MaskPlan],
    mask_token_id: u32,
    dropout: Option<&mut Dropout>,
) -> Result<TensorId, ModelError> {
    let (b, s) = (batch.batch_size(), batch.seq_len());
    assert_eq!(plans.len(), b, "one plan per sequence");
    if s > cfg.seq_len {
        return Err(ModelError::SeqTooLong { got: s, max: cfg.seq_len });
    }

    let causal = causal_bias(s);
    let mut bias = Vec::with_capacity(b * s * s);
    let mut embed_ids = batch.ids.clone();
    for (bi, plan) in plans.iter().enumerate() {
        assert_eq!(plan.keep.len(), s, "plan length matches sequence");
        match plan.variant {
            MaskVariant::Attention => bias.extend_from_slice(&build_attention_bias(plan)),
            MaskVariant::Token => {
                let row = &batch.ids.data[bi * s..(bi + 1) * s];
                let substituted = apply_token_mask(row, plan, mask_token_id);
                embed_ids.data[bi * s..(bi + 1) * s].copy_from_slice(&substituted);
                bias.extend_from_slice(&causal);
            }
            MaskVariant::None => bias.extend_from_slice(&causal),
        }
    }

    let logits = forward_logits(tape, pn, cfg, &embed_ids, bias, dropout)?;
    let (targets, weights) = shift_targets(batch);
    Ok(tape.cross_entropy_with_logits(logits, &targets, &weights)?)
}

/// Plain causal language-model loss, built directly from the lower-triangular
/// bias with no plan sampling. Kept as an independent route so the (0, 0)
/// equivalence of [`fcm_loss`] can be checked against it bit for bit.
pub fn causal_lm_loss(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    batch: &Batch,
    dropout: Option<&mut Dropout>,
) -> Result<TensorId, ModelError> {
    let (b, s) = (batch.batch_size(), batch.seq_len());
    let causal = causal_bias(s);
    let mut bias = Vec::with_capacity(b * s * s);
    for _ in 0..b {
        bias.extend_from_slice(&causal);
    }
    let logits = forward_logits(tape, pn, cfg, &batch.ids, bias, dropout)?;
    let (targets, weights) = shift_targets(batch);
    Ok(tape.cross_entropy_with_logits(logits, &targets, &weights)?)
}

/// Forward a single sequence under the plain causal mask with gradients off;
/// returns the logits node. This is the evaluation path: no forgetful masking
/// is ever applied at inference.
pub fn eval_logits(
    tape: &mut Tape,
    params: &Params,
    cfg: &ModelConfig,
    ids: &[u32],
) -> Result<TensorId, ModelError> {
    let pn = stage_params(tape, params, cfg, false);
    let s = ids.len();
    let id_tensor = IntTensor::new(vec![1, s], ids.to_vec());
    forward_logits(tape, &pn, cfg, &id_tensor, causal_bias(s), None)
}
