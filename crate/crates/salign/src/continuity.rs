//! Enhanced adversarial training: widening the discriminator's target space
//! from {0, 1} to [0, 1] by mixing modality representations.
//!
//! Per batch a rate p ~ U(0,1) is drawn. Below the threshold tau the speech
//! sequence is mixed: positions whose per-frame CTC argmax is non-blank are
//! replaced by that token's embedding with probability p. At or above tau
//! the text sequence is noised: blank or repeated-token embeddings are
//! inserted with probability 1-p per slot. Either way the discriminator
//! target for the resulting sequence is exactly p, and the mixed sequence
//! never reaches the decoder.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, RowSource};
use crate::network::EncoderOutput;
use crate::vocab::BLANK;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixBranch {
    StMix,
    MtNoise,
}

/// Where replacement token identities come from during ST mix-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementSource {
    CtcArgmax,
    Gold,
}

#[derive(Debug, Clone, Copy)]
pub struct MixDecision {
    pub p: f64,
    pub branch: MixBranch,
}

/// Draws the mix-up rate and decides the branch against tau.
pub fn sample_mix_rate(r: &mut impl Rng, tau: f64) -> MixDecision {
    let p: f64 = r.gen();
    let branch = if p < tau {
        MixBranch::StMix
    } else {
        MixBranch::MtNoise
    };
    MixDecision { p, branch }
}

/// A mixed or noised sequence, destined for the discriminator path only.
#[derive(Debug)]
pub struct MixOutcome {
    pub sequence: EncoderOutput,
    /// the sampled p; becomes the discriminator target
    pub label: f64,
    pub branch: MixBranch,
    /// st_mix: input positions whose feature was replaced;
    /// mt_noise: output positions holding an inserted element
    pub changed_positions: Vec<usize>,
}

/// Per-frame argmax token of each valid row of the CTC distribution.
pub fn ctc_argmax(ctc_log_probs: &Array2<f64>, mask: &[bool]) -> Vec<u32> {
    ctc_log_probs
        .rows()
        .into_iter()
        .zip(mask)
        .map(|(row, &valid)| {
            if !valid {
                return BLANK;
            }
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

/// ST mix-up: replaces eligible acoustic positions with the embedding of the
/// token the CTC head predicts there. Blank-argmax and masked positions are
/// never replaced. Replaced rows carry the same sqrt(d) scale as textual
/// encoder input embeddings.
pub fn mix_st_sequence(
    g: &mut Graph,
    h_aenc: &EncoderOutput,
    predicted_tokens: &[u32],
    embed_table: NodeId,
    d_model: usize,
    p: f64,
    r: &mut impl Rng,
) -> Result<MixOutcome> {
    let t_len = g.value(h_aenc.reps).nrows();
    if predicted_tokens.len() != t_len {
        return Err(Error::Shape(format!(
            "mix_st: {} predictions for {} acoustic rows",
            predicted_tokens.len(),
            t_len
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config("mix rate p must lie in [0, 1]"));
    }
    let mut plan = Vec::with_capacity(t_len);
    let mut changed = Vec::new();
    for (t, (&tok, &valid)) in predicted_tokens.iter().zip(&h_aenc.mask).enumerate() {
        let eligible = valid && tok != BLANK;
        if eligible && r.gen::<f64>() < p {
            plan.push((RowSource::B, t));
            changed.push(t);
        } else {
            plan.push((RowSource::A, t));
        }
    }
    let idx: Vec<usize> = predicted_tokens.iter().map(|&t| t as usize).collect();
    let emb = g.gather_rows(embed_table, &idx);
    let emb = g.mul_scalar(emb, (d_model as f64).sqrt());
    let mixed = g.select_gather(h_aenc.reps, emb, &plan);
    Ok(MixOutcome {
        sequence: EncoderOutput {
            reps: mixed,
            mask: h_aenc.mask.clone(),
        },
        label: p,
        branch: MixBranch::StMix,
        changed_positions: changed,
    })
}

/// MT noising: after each token, with probability 1-p, inserts one audio-like
/// element: the blank embedding or a copy of the token just emitted (50/50).
/// `emb_seq` holds the unpadded scaled token embeddings, `blank_row` the
/// scaled blank embedding (1 x d).
pub fn noise_mt_sequence(
    g: &mut Graph,
    emb_seq: NodeId,
    blank_row: NodeId,
    p: f64,
    r: &mut impl Rng,
) -> Result<MixOutcome> {
    let l = g.value(emb_seq).nrows();
    if l == 0 {
        return Err(Error::EmptyInput("noise_mt: empty token sequence".into()));
    }
    if g.value(blank_row).nrows() != 1 {
        return Err(Error::Shape("noise_mt: blank_row must be 1 x d".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config("mix rate p must lie in [0, 1]"));
    }
    let mut plan = Vec::with_capacity(2 * l);
    let mut inserted = Vec::new();
    for i in 0..l {
        plan.push((RowSource::A, i));
        if r.gen::<f64>() < 1.0 - p {
            inserted.push(plan.len());
            if r.gen::<f64>() < 0.5 {
                plan.push((RowSource::B, 0)); // blank token
            } else {
                plan.push((RowSource::A, i)); // repeat the adjacent token
            }
        }
    }
    let noised = g.select_gather(emb_seq, blank_row, &plan);
    let out_len = plan.len();
    Ok(MixOutcome {
        sequence: EncoderOutput {
            reps: noised,
            mask: vec![true; out_len],
        },
        label: p,
        branch: MixBranch::MtNoise,
        changed_positions: inserted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::stats::{binomial_ci99_halfwidth, ks_critical_001, ks_statistic_uniform};
    use ndarray::array;

    #[test]
    fn mix_rate_is_uniform_and_branches_at_tau() {
        let mut r = rng::stream(12, "mix", 0);
        let n = 100_000;
        let mut ps = Vec::with_capacity(n);
        let mut st_count = 0usize;
        for _ in 0..n {
            let d = sample_mix_rate(&mut r, 0.1);
            assert_eq!(d.branch == MixBranch::StMix, d.p < 0.1);
            if d.branch == MixBranch::StMix {
                st_count += 1;
            }
            ps.push(d.p);
        }
        let mean = ps.iter().sum::<f64>() / n as f64;
        assert!((0.497..=0.503).contains(&mean), "mean {mean}");
        assert!(ks_statistic_uniform(&ps) < ks_critical_001(n));
        let frac = st_count as f64 / n as f64;
        assert!((frac - 0.1).abs() < binomial_ci99_halfwidth(0.1, n), "st_mix fraction {frac}");
    }

    #[test]
    fn tau_zero_never_mixes_speech() {
        let mut r = rng::stream(10, "mix", 0);
        for _ in 0..10_000 {
            assert_eq!(sample_mix_rate(&mut r, 0.0).branch, MixBranch::MtNoise);
        }
    }

    fn small_h(g: &mut Graph, t: usize, d: usize, mask: Vec<bool>) -> EncoderOutput {
        let mut r = rng::stream(1, "h", 0);
        let reps = g.constant(Array2::from_shape_fn((t, d), |_| r.gen_range(-1.0f64..1.0)));
        EncoderOutput { reps, mask }
    }

    #[test]
    fn mix_st_boundaries() {
        let mut g = Graph::new();
        let h = small_h(&mut g, 5, 4, vec![true, true, true, true, false]);
        let table = g.constant(Array2::from_shape_fn((8, 4), |(i, j)| (i * 4 + j) as f64));
        let preds = vec![2u32, BLANK, 3, 5, 4];
        let mut r = rng::stream(2, "mix", 0);

        // p = 0: identity
        let out = mix_st_sequence(&mut g, &h, &preds, table, 4, 0.0, &mut r).unwrap();
        assert!(out.changed_positions.is_empty());
        assert_eq!(g.value(out.sequence.reps), g.value(h.reps));
        assert_eq!(out.label, 0.0);

        // p = 1: every eligible position replaced; blank-argmax (1) and
        // masked (4) positions untouched
        let out = mix_st_sequence(&mut g, &h, &preds, table, 4, 1.0, &mut r).unwrap();
        assert_eq!(out.changed_positions, vec![0, 2, 3]);
        let scale = 2.0; // sqrt(4)
        let v = g.value(out.sequence.reps).clone();
        for &t in &[0usize, 2, 3] {
            for j in 0..4 {
                let expect = (preds[t] as usize * 4 + j) as f64 * scale;
                assert_eq!(v[[t, j]], expect);
            }
        }
        assert_eq!(v.row(1), g.value(h.reps).row(1));
        assert_eq!(v.row(4), g.value(h.reps).row(4));
    }

    #[test]
    fn mix_st_replacement_rate_within_ci() {
        let t = 10_000;
        let mut g = Graph::new();
        let h = small_h(&mut g, t, 2, vec![true; t]);
        let table = g.constant(Array2::zeros((6, 2)));
        let preds = vec![4u32; t]; // every position eligible
        let mut r = rng::stream(3, "mix", 0);
        let p = 0.4;
        let out = mix_st_sequence(&mut g, &h, &preds, table, 2, p, &mut r).unwrap();
        let frac = out.changed_positions.len() as f64 / t as f64;
        assert!((frac - p).abs() < binomial_ci99_halfwidth(p, t), "fraction {frac}");
    }

    #[test]
    fn noise_mt_boundaries() {
        let mut g = Graph::new();
        let emb = g.constant(array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]);
        let blank = g.constant(array![[9.0, 9.0]]);
        let mut r = rng::stream(4, "mix", 0);

        // p = 1: zero insertion probability -> identity
        let out = noise_mt_sequence(&mut g, emb, blank, 1.0, &mut r).unwrap();
        assert_eq!(g.value(out.sequence.reps).nrows(), 3);
        assert!(out.changed_positions.is_empty());
        assert_eq!(out.label, 1.0);

        // p = 0: one insertion after every token -> length 2L
        let out = noise_mt_sequence(&mut g, emb, blank, 0.0, &mut r).unwrap();
        let v = g.value(out.sequence.reps).clone();
        assert_eq!(v.nrows(), 6);
        assert_eq!(out.changed_positions, vec![1, 3, 5]);
        // original tokens sit at even slots
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[2, 0]], 2.0);
        assert_eq!(v[[4, 0]], 3.0);
        // inserted slots are blank (9) or the adjacent token value
        for (slot, left) in [(1usize, 1.0f64), (3, 2.0), (5, 3.0)] {
            let x = v[[slot, 0]];
            assert!(x == 9.0 || x == left, "slot {slot} holds {x}");
        }
    }

    #[test]
    fn noise_mt_insertion_and_split_rates() {
        let l = 10_000;
        let mut g = Graph::new();
        let emb = g.constant(Array2::from_elem((l, 2), 1.0));
        let blank = g.constant(array![[9.0, 9.0]]);
        let mut r = rng::stream(5, "mix", 0);
        let p = 0.5;
        let out = noise_mt_sequence(&mut g, emb, blank, p, &mut r).unwrap();
        let inserted = out.changed_positions.len();
        let frac = inserted as f64 / l as f64;
        assert!((frac - 0.5).abs() < binomial_ci99_halfwidth(0.5, l), "insertion {frac}");
        let v = g.value(out.sequence.reps);
        let blanks = out
            .changed_positions
            .iter()
            .filter(|&&i| v[[i, 0]] == 9.0)
            .count();
        let split = blanks as f64 / inserted as f64;
        assert!(
            (split - 0.5).abs() < binomial_ci99_halfwidth(0.5, inserted),
            "blank/repeat split {split}"
        );
    }

    #[test]
    fn ctc_argmax_respects_mask() {
        let lp = array![
            [-0.1, -3.0, -3.0],
            [-3.0, -0.1, -3.0],
            [-3.0, -3.0, -0.1]
        ];
        let am = ctc_argmax(&lp, &[true, true, false]);
        assert_eq!(am, vec![0, 1, BLANK]);
    }
}
