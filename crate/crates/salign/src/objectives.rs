//! Training objectives: CTC over the blank-augmented lattice, label
//! cross-entropy, the adversarial BCE pair, the contrastive hard-alignment
//! baseline, and the weighted total.
//!
//! Conventions: CE and CTC are summed over time per sequence and averaged
//! over the batch by the trainer; adversarial and contrastive terms are
//! batch means. Probabilities are clamped to [EPS, 1 - EPS] before logs.

use crate::error::{Error, Result};
use crate::graph::{log_add_exp, Graph, NodeId};
use crate::vocab::BLANK;
use ndarray::Array2;

/// Probability clamp keeping every BCE term finite.
pub const EPS: f64 = 1e-7;

// ── CTC ─────────────────────────────────────────────────────────────────

/// Loss value plus the gradient w.r.t. the per-frame log-probabilities,
/// computed by the forward-backward recursion in log space.
#[derive(Debug)]
pub struct CtcOutcome {
    pub loss: f64,
    pub grad: Array2<f64>,
}

fn extended_labels(target: &[u32]) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &t in target {
        ext.push(t);
        ext.push(BLANK);
    }
    ext
}

/// Minimum frames a target needs: its length plus one separator blank per
/// adjacent repeat.
pub fn ctc_min_frames(target: &[u32]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn validate_ctc_inputs(log_probs: &Array2<f64>, target: &[u32], input_len: usize) -> Result<()> {
    if input_len == 0 || input_len > log_probs.nrows() {
        return Err(Error::Shape(format!(
            "ctc: input_len {input_len} outside [1, {}]",
            log_probs.nrows()
        )));
    }
    if target.iter().any(|&t| t == BLANK) {
        return Err(Error::Shape("ctc: target contains the blank id".into()));
    }
    if target.iter().any(|&t| t as usize >= log_probs.ncols()) {
        return Err(Error::Shape("ctc: target id outside vocabulary".into()));
    }
    let required = ctc_min_frames(target);
    if required > input_len {
        return Err(Error::CtcInfeasible {
            required,
            available: input_len,
        });
    }
    for t in 0..input_len {
        let row = log_probs.row(t);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        if lse.abs() > 1e-6 {
            return Err(Error::Shape(format!(
                "ctc: log-prob row {t} sums to exp({lse:.2e}) != 1"
            )));
        }
    }
    Ok(())
}

/// -log P_CTC(target | input) with its input gradient. An empty target is
/// the all-blank path.
pub fn ctc_forward(
    log_probs: &Array2<f64>,
    target: &[u32],
    input_len: usize,
) -> Result<CtcOutcome> {
    validate_ctc_inputs(log_probs, target, input_len)?;
    let ext = extended_labels(target);
    let s_len = ext.len();
    let t_len = input_len;
    let lp = |t: usize, k: u32| log_probs[[t, k as usize]];

    // alpha[t][s]: prefix paths ending in state s, including emission at t
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add_exp(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = log_add_exp(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + lp(t, ext[s]);
        }
    }
    let log_p = if s_len > 1 {
        log_add_exp(alpha[t_len - 1][s_len - 1], alpha[t_len - 1][s_len - 2])
    } else {
        alpha[t_len - 1][0]
    };

    // beta[t][s]: suffix paths from state s after time t (emission at t excluded)
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = lp(t + 1, ext[s]) + beta[t + 1][s];
            if s + 1 < s_len {
                acc = log_add_exp(acc, lp(t + 1, ext[s + 1]) + beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = log_add_exp(acc, lp(t + 1, ext[s + 2]) + beta[t + 1][s + 2]);
            }
            beta[t][s] = acc;
        }
    }

    // d(-log P)/d(log p[t, k]) = -sum_{s: ext[s]=k} exp(alpha + beta - log P)
    let mut grad = Array2::zeros(log_probs.dim());
    for t in 0..t_len {
        let mut acc: Vec<(usize, f64)> = Vec::with_capacity(s_len);
        for s in 0..s_len {
            let g = alpha[t][s] + beta[t][s];
            if g != f64::NEG_INFINITY {
                acc.push((ext[s] as usize, g));
            }
        }
        for (k, g) in acc {
            let cur = grad[[t, k]];
            let add = -((g - log_p).exp());
            grad[[t, k]] = if cur == 0.0 { add } else { cur + add };
        }
    }

    Ok(CtcOutcome {
        loss: -log_p,
        grad,
    })
}

/// Tape node for the CTC loss.
pub fn ctc_loss(
    g: &mut Graph,
    log_probs: NodeId,
    target: &[u32],
    input_len: usize,
) -> Result<NodeId> {
    let out = ctc_forward(g.value(log_probs), target, input_len)?;
    Ok(g.fused_loss(log_probs, out.loss, out.grad))
}

/// log P_CTC as a plain value (decode-side diagnostics and oracles).
pub fn ctc_log_prob(log_probs: &Array2<f64>, target: &[u32], input_len: usize) -> Result<f64> {
    Ok(-ctc_forward(log_probs, target, input_len)?.loss)
}

// ── cross entropy ───────────────────────────────────────────────────────

pub struct CeOutcome {
    pub node: NodeId,
    /// number of unmasked target positions; zero means the loss is a
    /// constant 0 and the caller should warn
    pub n_active: usize,
}

/// Sum over unmasked positions of -log softmax(logits)[target].
pub fn ce_loss(g: &mut Graph, logits: NodeId, targets: &[u32], mask: &[bool]) -> Result<CeOutcome> {
    let dim = g.value(logits).dim();
    if dim.0 != targets.len() || targets.len() != mask.len() {
        return Err(Error::Shape(format!(
            "ce: logits rows {}, targets {}, mask {}",
            dim.0,
            targets.len(),
            mask.len()
        )));
    }
    if targets.iter().any(|&t| (t as usize) >= dim.1) {
        return Err(Error::Shape("ce: target id outside vocabulary".into()));
    }
    let n_active = mask.iter().filter(|m| **m).count();
    let log_probs = g.row_log_softmax(logits);
    let tgt: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let node = g.gather_nll(log_probs, &tgt, mask);
    Ok(CeOutcome { node, n_active })
}

// ── adversarial BCE pair ────────────────────────────────────────────────

/// Binary cross entropy of a probability node against a fixed target.
pub fn bce(g: &mut Graph, prob: NodeId, target: f64) -> NodeId {
    let p = g.clamp(prob, EPS, 1.0 - EPS);
    let log_p = g.ln(p);
    let q = g.one_minus(p);
    let log_q = g.ln(q);
    let a = g.mul_scalar(log_p, -target);
    let b = g.mul_scalar(log_q, -(1.0 - target));
    g.add(a, b)
}

/// Eq.-style discriminator objective: speech label 0, text label 1, so the
/// loss is -log(1 - d_st) - log(d_mt).
pub fn discriminator_loss(g: &mut Graph, d_st: NodeId, d_mt: NodeId) -> NodeId {
    let st_term = bce(g, d_st, 0.0);
    let mt_term = bce(g, d_mt, 1.0);
    g.add(st_term, mt_term)
}

/// Generator objective: soft-target BCE toward the unified label (0.5 by
/// default, or the sampled mix rate under enhanced adversarial training).
pub fn generator_loss(g: &mut Graph, d_out: NodeId, target: f64) -> NodeId {
    bce(g, d_out, target)
}

pub fn discriminator_loss_value(d_st: f64, d_mt: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.scalar(d_st);
    let b = g.scalar(d_mt);
    let l = discriminator_loss(&mut g, a, b);
    g.scalar_value(l)
}

pub fn generator_loss_value(d_out: f64, target: f64) -> f64 {
    let mut g = Graph::new();
    let d = g.scalar(d_out);
    let l = generator_loss(&mut g, d, target);
    g.scalar_value(l)
}

/// Binary entropy: the minimum of the soft-target BCE, attained at d = t.
pub fn binary_entropy(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    -(t * t.ln() + (1.0 - t) * (1.0 - t).ln())
}

// ── contrastive hard alignment ──────────────────────────────────────────

/// Symmetric InfoNCE over in-batch negatives with cosine similarity.
/// Inputs are pooled sentence representations, [B x d] each, row i of both
/// sides belonging to the same sentence.
pub fn contrastive_loss(
    g: &mut Graph,
    h_st_pool: NodeId,
    h_mt_pool: NodeId,
    temperature: f64,
) -> Result<NodeId> {
    let b = g.value(h_st_pool).nrows();
    if b < 2 {
        return Err(Error::DegenerateBatch(format!(
            "contrastive loss needs >= 2 sequences, got {b}"
        )));
    }
    if g.value(h_st_pool).dim() != g.value(h_mt_pool).dim() {
        return Err(Error::Shape("contrastive: pooled shapes differ".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::config("contrastive temperature must be positive"));
    }
    let a_n = g.row_l2_normalize(h_st_pool);
    let b_n = g.row_l2_normalize(h_mt_pool);
    let diag: Vec<usize> = (0..b).collect();
    let all = vec![true; b];

    let sim_ab = g.matmul_nt(a_n, b_n); // rows: st -> mt direction
    let scaled_ab = g.mul_scalar(sim_ab, 1.0 / temperature);
    let lsm_ab = g.row_log_softmax(scaled_ab);
    let nll_ab = g.gather_nll(lsm_ab, &diag, &all);

    let sim_ba = g.matmul_nt(b_n, a_n); // rows: mt -> st direction
    let scaled_ba = g.mul_scalar(sim_ba, 1.0 / temperature);
    let lsm_ba = g.row_log_softmax(scaled_ba);
    let nll_ba = g.gather_nll(lsm_ba, &diag, &all);

    let sum = g.add(nll_ab, nll_ba);
    Ok(g.mul_scalar(sum, 0.5 / b as f64))
}

// ── total objective ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_asr: f64,
    pub w_mt: f64,
    pub w_st: f64,
    pub lambda: f64,
    pub w_contrastive: f64,
}

/// Scalar values of every component of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub asr: f64,
    pub mt: f64,
    pub st: f64,
    pub disc: f64,
    pub gen_st: f64,
    pub gen_mt: f64,
    pub contrastive: f64,
}

/// Weighted total. Terms with zero weight are skipped (not multiplied by
/// zero) so the arithmetic matches the tape-side combination bit for bit;
/// `asr_active` is false once the ASR step cap has passed.
pub fn total_loss(parts: &LossParts, w: &LossWeights, asr_active: bool) -> f64 {
    let mut total = 0.0;
    if asr_active && w.w_asr != 0.0 {
        total += w.w_asr * parts.asr;
    }
    if w.w_mt != 0.0 {
        total += w.w_mt * parts.mt;
    }
    if w.w_st != 0.0 {
        total += w.w_st * parts.st;
    }
    if w.lambda != 0.0 {
        let adv = parts.disc + parts.gen_st + parts.gen_mt;
        total += w.lambda * adv;
    }
    if w.w_contrastive != 0.0 {
        total += w.w_contrastive * parts.contrastive;
    }
    total
}

/// Tape-side total mirroring [`total_loss`] term by term. Optional nodes
/// follow the same skip rules; present nodes with zero weight are skipped
/// too, so no zero-gradient edges are created.
pub struct TotalInputs {
    pub asr: Option<NodeId>,
    pub mt: Option<NodeId>,
    pub st: Option<NodeId>,
    pub disc: Option<NodeId>,
    pub gen_st: Option<NodeId>,
    pub gen_mt: Option<NodeId>,
    pub contrastive: Option<NodeId>,
}

pub fn total_loss_node(
    g: &mut Graph,
    inputs: &TotalInputs,
    w: &LossWeights,
    asr_active: bool,
) -> NodeId {
    let mut acc = g.scalar(0.0);
    if asr_active && w.w_asr != 0.0 {
        if let Some(asr) = inputs.asr {
            let term = g.mul_scalar(asr, w.w_asr);
            acc = g.add(acc, term);
        }
    }
    if w.w_mt != 0.0 {
        if let Some(mt) = inputs.mt {
            let term = g.mul_scalar(mt, w.w_mt);
            acc = g.add(acc, term);
        }
    }
    if w.w_st != 0.0 {
        if let Some(st) = inputs.st {
            let term = g.mul_scalar(st, w.w_st);
            acc = g.add(acc, term);
        }
    }
    if w.lambda != 0.0 {
        if let (Some(d), Some(gs), Some(gm)) = (inputs.disc, inputs.gen_st, inputs.gen_mt) {
            let adv = g.add(d, gs);
            let adv = g.add(adv, gm);
            let term = g.mul_scalar(adv, w.lambda);
            acc = g.add(acc, term);
        }
    }
    if w.w_contrastive != 0.0 {
        if let Some(c) = inputs.contrastive {
            let term = g.mul_scalar(c, w.w_contrastive);
            acc = g.add(acc, term);
        }
    }
    acc
}
