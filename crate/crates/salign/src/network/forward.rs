//! Forward passes over the tape: encoders, decoder, CTC head, discriminator.
//!
//! Masking policy: masked rows are overwritten with zeros at every stage
//! entry (select, not multiply, so poisoned padding cannot leak), attention
//! scores to masked keys are replaced with -inf before softmax, and pooling
//! reads valid rows only. Valid outputs are therefore bit-identical under
//! appended padding.

use super::{Bound, ModelConfig, CONV_KERNEL, CONV_STRIDE, LN_EPS, N_CONV_LAYERS};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::vocab::BOS;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Time-major representation plus validity mask: the currency between
/// encoders, decoder, discriminator, and diagnostics.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub reps: NodeId,
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Fixed sinusoidal position table for `len` positions.
pub fn sinusoidal_pe(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(t, j)| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10_000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn linear(g: &mut Graph, b: &Bound, prefix: &str, x: NodeId) -> NodeId {
    let w = b.id(&format!("{prefix}.w"));
    let bias = b.id(&format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_bias(y, bias)
}

fn layer_norm(g: &mut Graph, b: &Bound, prefix: &str, x: NodeId) -> NodeId {
    let gain = b.id(&format!("{prefix}.g"));
    let bias = b.id(&format!("{prefix}.b"));
    g.layer_norm(x, gain, bias, LN_EPS)
}

fn dropout(g: &mut Graph, x: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
    if rate <= 0.0 {
        x
    } else {
        g.dropout(x, 1.0 - rate, rng)
    }
}

/// Multi-head attention. `key_mask[j] == false` keys are unreachable; with
/// `causal`, position i attends to keys <= i only.
#[allow(clippy::too_many_arguments)]
fn attention(
    g: &mut Graph,
    b: &Bound,
    prefix: &str,
    queries: NodeId,
    keys: NodeId,
    key_mask: &[bool],
    causal: bool,
    cfg: &ModelConfig,
    drop: f64,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    let n_heads = cfg.n_heads;
    let dk = cfg.d_model / n_heads;
    let q = linear(g, b, &format!("{prefix}.wq"), queries);
    let k = linear(g, b, &format!("{prefix}.wk"), keys);
    let v = linear(g, b, &format!("{prefix}.wv"), keys);

    let tq = g.value(q).nrows();
    let tk = key_mask.len();
    let mut blocked = Array2::from_elem((tq, tk), false);
    for (j, &keep) in key_mask.iter().enumerate() {
        if !keep {
            for i in 0..tq {
                blocked[[i, j]] = true;
            }
        }
    }
    if causal {
        for i in 0..tq {
            for j in (i + 1)..tk {
                blocked[[i, j]] = true;
            }
        }
    }

    let scale = 1.0 / (dk as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dk, dk);
        let kh = g.slice_cols(k, h * dk, dk);
        let vh = g.slice_cols(v, h * dk, dk);
        let scores = g.matmul_nt(qh, kh);
        let scaled = g.mul_scalar(scores, scale);
        let masked = g.mask_fill(scaled, &blocked, f64::NEG_INFINITY);
        let attn = g.row_softmax(masked);
        let attn = dropout(g, attn, drop, rng);
        head_outputs.push(g.matmul(attn, vh));
    }
    let ctx = g.concat_cols(&head_outputs);
    linear(g, b, &format!("{prefix}.wo"), ctx)
}

/// Pre-norm encoder block: x + Attn(LN(x)), then x + FFN(LN(x)).
fn encoder_block(
    g: &mut Graph,
    b: &Bound,
    prefix: &str,
    x: NodeId,
    mask: &[bool],
    cfg: &ModelConfig,
    drop: f64,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    let normed = layer_norm(g, b, &format!("{prefix}.ln1"), x);
    let attn = attention(
        g,
        b,
        &format!("{prefix}.attn"),
        normed,
        normed,
        mask,
        false,
        cfg,
        drop,
        rng,
    );
    let attn = dropout(g, attn, drop, rng);
    let x = g.add(x, attn);
    feed_forward(g, b, prefix, x, drop, rng)
}

fn feed_forward(
    g: &mut Graph,
    b: &Bound,
    prefix: &str,
    x: NodeId,
    drop: f64,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    let normed = layer_norm(g, b, &format!("{prefix}.ln2"), x);
    let h = linear(g, b, &format!("{prefix}.ffn.w1"), normed);
    let h = g.gelu(h);
    let h = linear(g, b, &format!("{prefix}.ffn.w2"), h);
    let h = dropout(g, h, drop, rng);
    g.add(x, h)
}

fn check_mask(len: usize, mask: &[bool], what: &str) -> Result<()> {
    if len == 0 {
        return Err(Error::EmptyInput(format!("{what}: zero-length input")));
    }
    if mask.len() != len {
        return Err(Error::Shape(format!(
            "{what}: mask length {} != input length {len}",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyInput(format!("{what}: every position is masked")));
    }
    Ok(())
}

/// Speech frames -> token-level representations; length shrinks by the
/// subsampling factor (T' = ceil(T / 4)). `frames` is a [T x d_feat] tape
/// node (a constant in training, a leaf under gradient checks).
#[allow(clippy::too_many_arguments)]
pub fn acoustic_encode(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    frames: NodeId,
    frame_mask: &[bool],
    drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EncoderOutput> {
    check_mask(g.value(frames).nrows(), frame_mask, "acoustic_encode")?;
    if g.value(frames).ncols() != cfg.d_feat {
        return Err(Error::Shape(format!(
            "acoustic_encode: {} feature dims, config says {}",
            g.value(frames).ncols(),
            cfg.d_feat
        )));
    }
    let x = g.zero_masked_rows(frames, frame_mask);
    let mut x = linear(g, b, "aenc.in_proj", x);
    let mut mask = frame_mask.to_vec();
    for c in 0..N_CONV_LAYERS {
        // masked rows are zero-filled so strided windows straddling the
        // boundary read exact zeros regardless of padded length
        let x_zeroed = g.zero_masked_rows(x, &mask);
        let unfolded = g.unfold_rows(x_zeroed, CONV_KERNEL, CONV_STRIDE, (CONV_KERNEL - 1) / 2);
        let conv = linear(g, b, &format!("aenc.conv{c}"), unfolded);
        x = g.gelu(conv);
        let valid = mask.iter().filter(|m| **m).count();
        let new_len = g.value(x).nrows();
        let new_valid = valid.div_ceil(CONV_STRIDE);
        mask = (0..new_len).map(|i| i < new_valid).collect();
    }
    let x = g.zero_masked_rows(x, &mask);
    let pe = g.constant(sinusoidal_pe(g.value(x).nrows(), cfg.d_model));
    let x = g.add(x, pe);
    let mut x = dropout(g, x, drop, rng);
    for l in 0..cfg.n_acoustic_layers {
        x = encoder_block(g, b, &format!("aenc.l{l}"), x, &mask, cfg, drop, rng);
    }
    let reps = layer_norm(g, b, "aenc.ln_out", x);
    Ok(EncoderOutput { reps, mask })
}

/// Embeds token ids, scaled by sqrt(d); optionally adds position encodings
/// (the MT path adds them, pooled low-level views do not).
pub fn embed_tokens(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    tokens: &[u32],
    with_positions: bool,
) -> NodeId {
    let table = b.id("embed.table");
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let emb = g.gather_rows(table, &idx);
    let emb = g.mul_scalar(emb, (cfg.d_model as f64).sqrt());
    if with_positions {
        let pe = g.constant(sinusoidal_pe(tokens.len(), cfg.d_model));
        g.add(emb, pe)
    } else {
        emb
    }
}

/// Shared semantic encoder; consumes either embedded source text (MT path)
/// or acoustic-encoder output (ST path). One parameter set serves both.
pub fn textual_encode(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    input: &EncoderOutput,
    drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EncoderOutput> {
    let len = g.value(input.reps).nrows();
    check_mask(len, &input.mask, "textual_encode")?;
    if g.value(input.reps).ncols() != cfg.d_model {
        return Err(Error::Shape(format!(
            "textual_encode: input width {} != d_model {}",
            g.value(input.reps).ncols(),
            cfg.d_model
        )));
    }
    let mut x = g.zero_masked_rows(input.reps, &input.mask);
    for l in 0..cfg.n_textual_layers {
        x = encoder_block(g, b, &format!("tenc.l{l}"), x, &input.mask, cfg, drop, rng);
    }
    let reps = layer_norm(g, b, "tenc.ln_out", x);
    Ok(EncoderOutput {
        reps,
        mask: input.mask.clone(),
    })
}

/// Autoregressive decoder: causal self-attention, cross-attention over the
/// encoder output, and a weight-tied output projection. Returns logits
/// [len(prev_tokens) x vocab].
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    encoder_out: &EncoderOutput,
    prev_tokens: &[u32],
    drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    if prev_tokens.is_empty() {
        return Err(Error::Shape("decoder_forward: empty prefix".into()));
    }
    if prev_tokens[0] != BOS {
        return Err(Error::Shape(format!(
            "decoder_forward: prefix must start with <bos>, got id {}",
            prev_tokens[0]
        )));
    }
    check_mask(g.value(encoder_out.reps).nrows(), &encoder_out.mask, "decoder_forward")?;
    let self_mask = vec![true; prev_tokens.len()];
    let emb = embed_tokens(g, b, cfg, prev_tokens, true);
    let mut x = dropout(g, emb, drop, rng);
    for l in 0..cfg.n_decoder_layers {
        let prefix = format!("dec.l{l}");
        let normed = layer_norm(g, b, &format!("{prefix}.ln1"), x);
        let self_attn = attention(
            g,
            b,
            &format!("{prefix}.attn"),
            normed,
            normed,
            &self_mask,
            true,
            cfg,
            drop,
            rng,
        );
        let self_attn = dropout(g, self_attn, drop, rng);
        x = g.add(x, self_attn);

        let normed = layer_norm(g, b, &format!("{prefix}.ln_cross"), x);
        let cross = attention(
            g,
            b,
            &format!("{prefix}.cross"),
            normed,
            encoder_out.reps,
            &encoder_out.mask,
            false,
            cfg,
            drop,
            rng,
        );
        let cross = dropout(g, cross, drop, rng);
        x = g.add(x, cross);

        x = feed_forward(g, b, &prefix, x, drop, rng);
    }
    let x = layer_norm(g, b, "dec.ln_out", x);
    let table = b.id("embed.table");
    Ok(g.matmul_nt(x, table)) // logits share the embedding weights
}

/// Per-frame log-distributions from the CTC head on acoustic output.
pub fn ctc_head_log_probs(g: &mut Graph, b: &Bound, acoustic_out: &EncoderOutput) -> NodeId {
    let logits = linear(g, b, "ctc", acoustic_out.reps);
    g.row_log_softmax(logits)
}

/// Modality probability for one sequence: masked mean-pool, hidden stack,
/// single sigmoid unit. Output is strictly inside (0, 1).
pub fn discriminate(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    h: &EncoderOutput,
) -> Result<NodeId> {
    check_mask(g.value(h.reps).nrows(), &h.mask, "discriminate")?;
    let mut x = g.masked_mean_rows(h.reps, &h.mask);
    for l in 0..cfg.disc_layers {
        x = linear(g, b, &format!("disc.l{l}"), x);
        x = g.gelu(x);
    }
    let out = linear(g, b, "disc.out", x);
    Ok(g.sigmoid(out))
}
