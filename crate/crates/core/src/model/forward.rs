//! Forward computation of the encoder, the decoder and the fusion paths.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::batch::{pad_batch, PaddedBatch};
use crate::corpus::{ExamplePair, TokenId, PAD};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, ParamSet};
use crate::numerics::{AttentionSpec, Graph, NodeId, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Evaluation is deterministic; training applies dropout drawn from the
/// given generator.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

/// Encoder states for one source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[n, d_model]`
    pub h: Tensor,
    /// `true` at real positions. Padding is always a suffix.
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    fn valid_len(&self) -> Result<usize> {
        let len = self.mask.iter().take_while(|&&m| m).count();
        if len == 0 || self.mask[len..].iter().any(|&m| m) || self.mask.len() != self.h.rows() {
            return Err(Error::Contract(
                "encoder mask must be a non-empty prefix of real positions matching h".into(),
            ));
        }
        Ok(len)
    }
}

/// Gate weights α, one row per decoder step.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    pub alphas: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[T, vocab]`
    pub logits: Tensor,
    pub gate: Option<GateTrace>,
    /// Decoder state z after the final block.
    pub hidden: Tensor,
    /// State fed to the output projection: z′ when gated, else z.
    pub fused: Tensor,
    /// Attention-pooled encoder context c used by the gate.
    pub context: Option<Tensor>,
}

pub struct EncoderNodes {
    pub h: NodeId,
    pub batch: usize,
    pub len: usize,
    pub lens: Vec<usize>,
}

pub struct DecoderNodes {
    pub logits: NodeId,
    pub hidden: NodeId,
    pub fused: NodeId,
    pub context: Option<NodeId>,
    pub alpha: Option<NodeId>,
}

/// One forward computation over a checkpoint. Parameters are bound into
/// the graph on first use.
pub struct ModelGraph<'a, 'r> {
    graph: Graph,
    ckpt: &'a Checkpoint,
    bound: HashMap<String, NodeId>,
    mode: Mode<'r>,
    pinned_alpha: Option<f64>,
}

impl<'a, 'r> ModelGraph<'a, 'r> {
    pub fn new(ckpt: &'a Checkpoint, mode: Mode<'r>) -> Self {
        ModelGraph {
            graph: Graph::new(),
            ckpt,
            bound: HashMap::new(),
            mode,
            pinned_alpha: None,
        }
    }

    /// Replaces σ(W·z + b) by a constant α in every gate evaluation.
    pub fn pin_alpha(&mut self, alpha: f64) {
        self.pinned_alpha = Some(alpha);
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn config(&self) -> &'a ModelConfig {
        self.ckpt.config()
    }

    pub fn param_node(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self
            .ckpt
            .param(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint has no parameter {name}")))?;
        let id = self.graph.param(t.clone());
        self.bound.insert(name.to_owned(), id);
        Ok(id)
    }

    /// Gradients of every checkpoint parameter after `backward`; zeros for
    /// parameters the graph never touched.
    pub fn param_grads(&mut self) -> ParamSet {
        self.ckpt
            .params()
            .iter()
            .map(|(name, t)| {
                let g = match self.bound.get(name) {
                    Some(&id) => self.graph.take_grad(id),
                    None => Tensor::zeros(t.shape()),
                };
                (name.clone(), g)
            })
            .collect()
    }

    fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        let rate = self.ckpt.config().dropout_rate;
        let Mode::Train(rng) = &mut self.mode else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.graph.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.graph.mask_mul(x, mask)
    }

    fn affine(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let w = self.param_node(w)?;
        let b = self.param_node(b)?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_row(y, b)
    }

    fn norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gain = self.param_node(&format!("{prefix}.gain"))?;
        let bias = self.param_node(&format!("{prefix}.bias"))?;
        self.graph.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    /// Multi-head attention sublayer; returns the projected output and
    /// the raw attention node.
    fn attend(&mut self, xq: NodeId, xkv: NodeId, prefix: &str, spec: AttentionSpec) -> Result<(NodeId, NodeId)> {
        let q = self.affine(xq, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.affine(xkv, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.affine(xkv, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let att = self.graph.attention(q, k, v, spec)?;
        let out = self.affine(att, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
        Ok((out, att))
    }

    fn ffn(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.affine(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.graph.gelu(h);
        self.affine(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn embed(&mut self, ids: &[TokenId], len: usize, pos_table: &str) -> Result<NodeId> {
        let max = self.config().max_len;
        if len > max {
            return Err(Error::Length { len, max });
        }
        let tok = self.param_node("tok_emb")?;
        let pos = self.param_node(pos_table)?;
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % len).collect();
        let te = self.graph.gather(tok, &ids)?;
        let pe = self.graph.gather(pos, &positions)?;
        let x = self.graph.add(te, pe)?;
        self.dropout(x)
    }

    fn residual(&mut self, x: NodeId, branch: NodeId) -> Result<NodeId> {
        let branch = self.dropout(branch)?;
        self.graph.add(x, branch)
    }

    /// Bidirectional encoder over `[batch, len]` right-padded ids.
    pub fn encode_batch(&mut self, ids: &[TokenId], batch: usize, len: usize, lens: &[usize]) -> Result<EncoderNodes> {
        let config = self.config();
        if !config.fusion_mode.uses_encoder() {
            return Err(Error::Contract("fusion_mode=none has no encoder".into()));
        }
        check_layout(ids, batch, len, lens)?;
        let mut x = self.embed(ids, len, "enc.pos_emb")?;
        let spec = AttentionSpec {
            batch,
            q_len: len,
            k_len: len,
            heads: config.n_heads,
            key_lens: lens.to_vec(),
            causal: false,
        };
        for l in 0..config.n_encoder_layers {
            let p = format!("enc.l{l}");
            let a = self.norm(x, &format!("{p}.ln1"))?;
            let (o, _) = self.attend(a, a, &format!("{p}.attn"), spec.clone())?;
            x = self.residual(x, o)?;
            let f = self.norm(x, &format!("{p}.ln2"))?;
            let f = self.ffn(f, &format!("{p}.ffn"))?;
            x = self.residual(x, f)?;
        }
        let h = self.norm(x, "enc.ln_f")?;
        Ok(EncoderNodes {
            h,
            batch,
            len,
            lens: lens.to_vec(),
        })
    }

    /// Places precomputed encoder states on the graph as a constant.
    pub fn encoder_from_output(&mut self, enc: &EncoderOutput) -> Result<EncoderNodes> {
        let valid = enc.valid_len()?;
        if enc.h.rank() != 2 || enc.h.cols() != self.config().d_model {
            return Err(Error::Dimension(format!(
                "encoder states {:?} do not match d_model {}",
                enc.h.shape(),
                self.config().d_model
            )));
        }
        let h = self.graph.constant(enc.h.clone());
        Ok(EncoderNodes {
            h,
            batch: 1,
            len: enc.mask.len(),
            lens: vec![valid],
        })
    }

    fn context_spec(&self, enc: &EncoderNodes, q_len: usize) -> AttentionSpec {
        AttentionSpec {
            batch: enc.batch,
            q_len,
            k_len: enc.len,
            heads: self.config().n_heads,
            key_lens: enc.lens.clone(),
            causal: false,
        }
    }

    /// Attention-pooled encoder context for each row of `z` through the
    /// attention module `module`; returns the context and attention nodes.
    pub fn cross_attend(&mut self, z: NodeId, enc: &EncoderNodes, module: &str) -> Result<(NodeId, NodeId)> {
        let rows = self.graph.value(z).rows();
        if !rows.is_multiple_of(enc.batch) {
            return Err(Error::Dimension(format!(
                "{rows} query rows do not split into {} batch elements",
                enc.batch
            )));
        }
        let spec = self.context_spec(enc, rows / enc.batch);
        self.attend(z, enc.h, module, spec)
    }

    /// α = σ(z·W + b), z′ = α·c + (1 − α)·z.
    pub fn gate(&mut self, z: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
        let pre = self.affine(z, "gate.w", "gate.b")?;
        let alpha = match self.pinned_alpha {
            Some(a) => {
                let shape = self.graph.value(pre).shape().to_vec();
                self.graph.constant(Tensor::full(&shape, a))
            }
            None => self.graph.sigmoid(pre),
        };
        let fused = self.graph.lerp(alpha, c, z)?;
        Ok((alpha, fused))
    }

    /// Causal decoder over `[batch, len]` right-padded ids, conditioned on
    /// `enc` according to the fusion mode.
    pub fn decode_batch(
        &mut self,
        enc: Option<&EncoderNodes>,
        ids: &[TokenId],
        batch: usize,
        len: usize,
        lens: &[usize],
    ) -> Result<DecoderNodes> {
        let config = self.config();
        let mode = config.fusion_mode;
        check_layout(ids, batch, len, lens)?;
        let enc = match (mode.uses_encoder(), enc) {
            (false, _) => None,
            (true, Some(e)) if e.batch == batch => Some(e),
            (true, Some(e)) => {
                return Err(Error::Dimension(format!(
                    "encoder batch {} does not match decoder batch {batch}",
                    e.batch
                )))
            }
            (true, None) => {
                return Err(Error::Contract(format!(
                    "fusion_mode={mode} needs encoder states"
                )))
            }
        };
        let mut x = self.embed(ids, len, "dec.pos_emb")?;
        let self_spec = AttentionSpec {
            batch,
            q_len: len,
            k_len: len,
            heads: config.n_heads,
            key_lens: lens.to_vec(),
            causal: true,
        };
        for l in 0..config.n_decoder_layers {
            let p = format!("dec.l{l}");
            let a = self.norm(x, &format!("{p}.ln1"))?;
            let (o, _) = self.attend(a, a, &format!("{p}.self_attn"), self_spec.clone())?;
            x = self.residual(x, o)?;
            if let (true, Some(enc)) = (mode.has_cross_attention(), enc) {
                let a = self.norm(x, &format!("{p}.ln_cross"))?;
                let (o, _) = self.cross_attend(a, enc, &format!("{p}.cross_attn"))?;
                x = self.residual(x, o)?;
            }
            let f = self.norm(x, &format!("{p}.ln2"))?;
            let f = self.ffn(f, &format!("{p}.ffn"))?;
            x = self.residual(x, f)?;
        }
        let hidden = self.norm(x, "dec.ln_f")?;
        let (fused, context, alpha) = match (mode.has_gate(), enc) {
            (true, Some(enc)) => {
                let (c, _) = self.cross_attend(hidden, enc, "gate.attn")?;
                let (alpha, fused) = self.gate(hidden, c)?;
                (fused, Some(c), Some(alpha))
            }
            _ => (hidden, None, None),
        };
        let emb = self.param_node("tok_emb")?;
        let logits = self.graph.matmul_bt(fused, emb)?;
        Ok(DecoderNodes {
            logits,
            hidden,
            fused,
            context,
            alpha,
        })
    }

    /// Token-mean negative log-likelihood of a teacher-forced batch.
    pub fn batch_loss(&mut self, b: &PaddedBatch) -> Result<NodeId> {
        let enc = if self.config().fusion_mode.uses_encoder() {
            Some(self.encode_batch(&b.src_ids, b.batch, b.src_len, &b.src_lens)?)
        } else {
            None
        };
        let dec = self.decode_batch(enc.as_ref(), &b.dec_input, b.batch, b.tgt_len, &b.dec_lens)?;
        let targets: Vec<usize> = b.targets.iter().map(|&t| t as usize).collect();
        self.graph.cross_entropy_mean(dec.logits, &targets, Some(PAD as usize))
    }
}

fn check_layout(ids: &[TokenId], batch: usize, len: usize, lens: &[usize]) -> Result<()> {
    if batch == 0 || len == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    if ids.len() != batch * len || lens.len() != batch || lens.iter().any(|&l| l == 0 || l > len) {
        return Err(Error::Dimension(format!(
            "{} ids with lengths {lens:?} do not form a [{batch}, {len}] batch",
            ids.len()
        )));
    }
    Ok(())
}

pub fn encode(source: &[TokenId], ckpt: &Checkpoint, mode: Mode<'_>) -> Result<EncoderOutput> {
    if source.is_empty() {
        return Err(Error::Contract("source must be non-empty".into()));
    }
    let mut mg = ModelGraph::new(ckpt, mode);
    let enc = mg.encode_batch(source, 1, source.len(), &[source.len()])?;
    Ok(EncoderOutput {
        h: mg.graph().value(enc.h).clone(),
        mask: vec![true; source.len()],
    })
}

fn run_decoder(
    prefix: &[TokenId],
    enc: Option<&EncoderOutput>,
    ckpt: &Checkpoint,
    mode: Mode<'_>,
    pinned_alpha: Option<f64>,
) -> Result<DecoderOutput> {
    if prefix.is_empty() {
        return Err(Error::Contract("decoder prefix must be non-empty".into()));
    }
    let mut mg = ModelGraph::new(ckpt, mode);
    if let Some(a) = pinned_alpha {
        mg.pin_alpha(a);
    }
    let enc_nodes = match enc {
        Some(e) if ckpt.config().fusion_mode.uses_encoder() => Some(mg.encoder_from_output(e)?),
        _ => None,
    };
    let dec = mg.decode_batch(enc_nodes.as_ref(), prefix, 1, prefix.len(), &[prefix.len()])?;
    let g = mg.graph();
    let gate = dec.alpha.map(|a| {
        let v = g.value(a);
        GateTrace {
            alphas: (0..v.rows()).map(|r| v.row(r).to_vec()).collect(),
        }
    });
    Ok(DecoderOutput {
        logits: g.value(dec.logits).clone(),
        gate,
        hidden: g.value(dec.hidden).clone(),
        fused: g.value(dec.fused).clone(),
        context: dec.context.map(|c| g.value(c).clone()),
    })
}

/// Logits for every position of a decoder prefix. `enc` is required
/// unless the model is decoder-only.
pub fn decode_forward(
    prefix: &[TokenId],
    enc: Option<&EncoderOutput>,
    ckpt: &Checkpoint,
    mode: Mode<'_>,
) -> Result<DecoderOutput> {
    run_decoder(prefix, enc, ckpt, mode, None)
}

/// [`decode_forward`] with the gate weight held at `alpha`.
pub fn decode_forward_pinned(
    prefix: &[TokenId],
    enc: Option<&EncoderOutput>,
    ckpt: &Checkpoint,
    alpha: f64,
) -> Result<DecoderOutput> {
    run_decoder(prefix, enc, ckpt, Mode::Eval, Some(alpha))
}

pub struct CrossAttention {
    /// `[rows of z, d_model]`
    pub context: Tensor,
    /// `[heads, rows of z, n]` attention weights over source positions.
    pub weights: Vec<f64>,
}

/// Attends from each row of `z` over `enc.h` through the attention module
/// named `module` (e.g. `gate.attn` or `dec.l0.cross_attn`).
pub fn cross_attend(z: &Tensor, enc: &EncoderOutput, ckpt: &Checkpoint, module: &str) -> Result<CrossAttention> {
    let mut mg = ModelGraph::new(ckpt, Mode::Eval);
    let enc_nodes = mg.encoder_from_output(enc)?;
    let zn = mg.graph_mut().constant(z.clone());
    let (c, att) = mg.cross_attend(zn, &enc_nodes, module)?;
    let g = mg.graph();
    Ok(CrossAttention {
        context: g.value(c).clone(),
        weights: g.attention_weights(att).expect("attention node").to_vec(),
    })
}

/// Applies the gate to rows of `z` and `c`: returns (α, z′). `w` is
/// `[d, 1]` for a scalar gate or `[d, d]` per dimension.
pub fn gate(z: &Tensor, c: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (zn, cn, wn, bn) = (
        g.constant(z.clone()),
        g.constant(c.clone()),
        g.constant(w.clone()),
        g.constant(b.clone()),
    );
    let pre = g.matmul(zn, wn)?;
    let pre = g.add_row(pre, bn)?;
    let alpha = g.sigmoid(pre);
    let fused = g.lerp(alpha, cn, zn)?;
    Ok((g.value(alpha).clone(), g.value(fused).clone()))
}

/// Teacher-forced mean NLL of one pair.
pub fn forward_loss(pair: &ExamplePair, ckpt: &Checkpoint, mode: Mode<'_>) -> Result<f64> {
    batch_loss(std::slice::from_ref(pair), ckpt, mode)
}

/// Token-weighted mean NLL over a padded batch of pairs.
pub fn batch_loss(pairs: &[ExamplePair], ckpt: &Checkpoint, mode: Mode<'_>) -> Result<f64> {
    let b = pad_batch(pairs, PAD)?;
    let mut mg = ModelGraph::new(ckpt, mode);
    let loss = mg.batch_loss(&b)?;
    mg.graph().value(loss).item()
}
