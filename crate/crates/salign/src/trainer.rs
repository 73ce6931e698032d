//! Progressive training: MT pre-training of the textual encoder and decoder,
//! then multi-task fine-tuning with ASR, MT, ST, adversarial, and optional
//! contrastive objectives.
//!
//! The adversarial gradient partition is structural: the discriminator loss
//! sees detached representations (so it can only move discriminator
//! weights), and the generator losses run the discriminator with frozen
//! constant parameters (so they can only move encoder-side weights). An
//! optional audit re-runs backward on each sub-objective and verifies the
//! partition numerically at the configured cadence.

use crate::checkpoint;
use crate::continuity::{
    ctc_argmax, mix_st_sequence, noise_mt_sequence, sample_mix_rate, MixBranch, ReplacementSource,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::network::{
    acoustic_encode, bind_params, ctc_head_log_probs, decoder_forward, discriminate, embed_tokens,
    sinusoidal_pe, textual_encode, BindMode, Bound, EncoderOutput, ModelConfig, ParamGroup,
    ParamSet,
};
use crate::objectives::{
    bce, ce_loss, ctc_loss, total_loss, total_loss_node, LossParts, LossWeights, TotalInputs,
};
use crate::rng;
use crate::synthdata::{make_batches, Batch, Triple};
use crate::vocab::{BLANK, BOS, EOS};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const UNIFIED_TARGET: f64 = 0.5; // c_u, midway between speech 0 and text 1

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignLevel {
    /// lexical embeddings vs acoustic-encoder output
    Low,
    /// textual-encoder outputs of both paths
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixGranularity {
    Batch,
    Example,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuityConfig {
    pub enabled: bool,
    pub tau: f64,
    pub replacement_source: ReplacementSource,
    pub per: MixGranularity,
    /// whether mixed sequences also contribute a generator loss
    pub mix_generator_loss: bool,
}

impl Default for ContinuityConfig {
    fn default() -> Self {
        ContinuityConfig {
            enabled: true,
            tau: 0.1,
            replacement_source: ReplacementSource::CtcArgmax,
            per: MixGranularity::Batch,
            mix_generator_loss: false,
        }
    }
}

impl ContinuityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("continuity.tau must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_steps: u64,
    pub max_steps: u64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub w_asr: f64,
    pub w_mt: f64,
    pub w_st: f64,
    pub lambda: f64,
    pub asr_step_cap: u64,
    pub checkpoint_every: u64,
    pub keep_best_k: usize,
    pub seed: u64,
    /// padded-frame budget per batch (both data streams)
    pub max_frames: usize,
    /// alternate discriminator/generator phases instead of one combined step
    pub alternating: bool,
    pub grad_audit_every: Option<u64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_asr", self.w_asr),
            ("w_mt", self.w_mt),
            ("w_st", self.w_st),
            ("lambda", self.lambda),
        ] {
            if v < 0.0 {
                return Err(Error::config(format!("train.{name} must be nonnegative")));
            }
        }
        if self.asr_step_cap > self.max_steps {
            return Err(Error::config("train.asr_step_cap exceeds max_steps"));
        }
        if self.warmup_steps == 0 || self.checkpoint_every == 0 || self.keep_best_k == 0 {
            return Err(Error::config(
                "train.warmup_steps, checkpoint_every and keep_best_k must be positive",
            ));
        }
        if self.max_frames == 0 {
            return Err(Error::config("train.max_frames must be positive"));
        }
        Ok(())
    }
}

/// Contrastive settings (the hard-alignment baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectivesConfig {
    pub contrastive_weight: f64,
    pub contrastive_level: AlignLevel,
    pub contrastive_temperature: f64,
}

impl Default for ObjectivesConfig {
    fn default() -> Self {
        ObjectivesConfig {
            contrastive_weight: 0.0,
            contrastive_level: AlignLevel::High,
            contrastive_temperature: 0.05,
        }
    }
}

impl ObjectivesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.contrastive_weight < 0.0 {
            return Err(Error::config("objectives.contrastive_weight must be nonnegative"));
        }
        if self.contrastive_temperature <= 0.0 {
            return Err(Error::config("objectives.contrastive_temperature must be positive"));
        }
        Ok(())
    }
}

// ── schedule and optimizer ──────────────────────────────────────────────

/// Inverse-sqrt schedule with linear warmup; continuous at the boundary.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Adam with per-parameter step counters so alternating phases keep their
/// bias correction consistent.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
            t: vec![0; n_params],
        }
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &[(usize, Array2<f64>)], lr: f64) {
        for (idx, g) in grads {
            let i = *idx;
            if self.m[i].is_none() {
                self.m[i] = Some(Array2::zeros(g.dim()));
                self.v[i] = Some(Array2::zeros(g.dim()));
            }
            self.t[i] += 1;
            let t = self.t[i];
            let m = self.m[i].as_mut().unwrap();
            let v = self.v[i].as_mut().unwrap();
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mc = 1.0 - self.beta1.powi(t as i32);
            let vc = 1.0 - self.beta2.powi(t as i32);
            let value = &mut params.entry_mut(i).value;
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / mc) / ((v / vc).sqrt() + self.eps);
                });
        }
    }
}

// ── training log ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    #[serde(flatten)]
    pub parts: LossParts,
    pub total: f64,
    pub disc_acc: f64,
    pub lr: f64,
}

/// Append-only JSON-lines writer for the per-step log.
pub struct TrainLogWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl TrainLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(TrainLogWriter {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, rec: &TrainRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io(self.path.display().to_string(), e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.file
            .flush()
            .map_err(|e| Error::io(self.path.display().to_string(), e))
    }
}

pub fn read_train_log(path: &Path) -> Result<Vec<TrainRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Ingest {
            location: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

// ── data streams ────────────────────────────────────────────────────────

/// Endless deterministic batch stream: each epoch reshuffles under a seed
/// derived from (seed, purpose, epoch).
pub struct BatchStream<'d> {
    data: &'d [Triple],
    max_frames: usize,
    seed: u64,
    purpose: &'static str,
    epoch: u64,
    queue: Vec<Batch>,
    next: usize,
}

impl<'d> BatchStream<'d> {
    pub fn new(data: &'d [Triple], max_frames: usize, seed: u64, purpose: &'static str) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput(format!("{purpose}: empty dataset")));
        }
        let mut s = BatchStream {
            data,
            max_frames,
            seed,
            purpose,
            epoch: 0,
            queue: Vec::new(),
            next: 0,
        };
        s.refill()?;
        Ok(s)
    }

    fn refill(&mut self) -> Result<()> {
        let shuffle = rng::derive_seed(self.seed, self.purpose, self.epoch);
        self.queue = make_batches(self.data, self.max_frames, Some(shuffle))?;
        self.next = 0;
        self.epoch += 1;
        Ok(())
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.next >= self.queue.len() {
            self.refill()?;
        }
        let b = self.queue[self.next].clone();
        self.next += 1;
        Ok(b)
    }
}

// ── step construction ───────────────────────────────────────────────────

/// How one optimizer step combines the sub-objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// single combined objective with stop-gradient boundaries
    Simultaneous,
    /// discriminator loss only (alternating mode, odd steps)
    DiscOnly,
    /// task + generator losses only (alternating mode, even steps)
    GenOnly,
}

pub struct StepSettings<'a> {
    pub model: &'a ModelConfig,
    pub weights: LossWeights,
    pub objectives: &'a ObjectivesConfig,
    pub continuity: &'a ContinuityConfig,
    pub asr_active: bool,
    pub dropout: f64,
    pub seed: u64,
    pub step: u64,
    pub phase: Phase,
}

/// The assembled tape for one fine-tuning step, exposing the pieces the
/// audit, the optimizer, and the tests need.
pub struct StepGraph {
    pub graph: Graph,
    pub trainable: Vec<(usize, NodeId)>,
    pub parts: LossParts,
    pub total: NodeId,
    pub disc_loss_node: Option<NodeId>,
    pub gen_loss_node: Option<NodeId>,
    pub h_st: Vec<NodeId>,
    pub h_mt: Vec<NodeId>,
    pub disc_acc: f64,
    pub asr_infeasible: usize,
    pub mix: Option<(MixBranch, f64)>,
}

fn valid_tokens(tokens: &[u32], mask: &[bool]) -> Vec<u32> {
    tokens
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&t, _)| t)
        .collect()
}

fn teacher_forcing(tgt: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut prev = Vec::with_capacity(tgt.len() + 1);
    prev.push(BOS);
    prev.extend_from_slice(tgt);
    let mut out = tgt.to_vec();
    out.push(EOS);
    (prev, out)
}

/// Uniform alignment for the gold replacement-source variant: frame t of T'
/// maps to token floor(t * L / T').
fn gold_frame_tokens(src: &[u32], t_out: usize, mask: &[bool]) -> Vec<u32> {
    let valid = mask.iter().filter(|m| **m).count().max(1);
    (0..t_out)
        .map(|t| {
            if t < valid && !src.is_empty() {
                src[(t * src.len()) / valid]
            } else {
                BLANK
            }
        })
        .collect()
}

/// Builds the full multi-task tape for one step over one ST and one MT batch.
pub fn build_finetune_step(
    s: &StepSettings,
    params: &ParamSet,
    st_batch: &Batch,
    mt_batch: &Batch,
) -> Result<StepGraph> {
    let cfg = s.model;
    let mut g = Graph::new();
    let live = crate::network::bind_all(&mut g, params);
    let disc_frozen = bind_params(&mut g, params, |grp| {
        if grp == ParamGroup::Discriminator {
            BindMode::Freeze
        } else {
            BindMode::Skip
        }
    });

    let mut asr_nodes = Vec::new();
    let mut st_nodes = Vec::new();
    let mut asr_infeasible = 0usize;
    let mut aenc_outputs: Vec<EncoderOutput> = Vec::with_capacity(st_batch.len());
    let mut ctc_lp_nodes: Vec<NodeId> = Vec::with_capacity(st_batch.len());
    let mut h_st: Vec<EncoderOutput> = Vec::with_capacity(st_batch.len());

    for i in 0..st_batch.len() {
        let mut r = rng::stream(s.seed, "st-dropout", s.step);
        r.set_stream(i as u64);
        let frames = g.constant(st_batch.frames[i].clone());
        let aenc = acoustic_encode(
            &mut g,
            &live,
            cfg,
            frames,
            &st_batch.frame_mask[i],
            s.dropout,
            &mut r,
        )?;
        let ctc_lp = ctc_head_log_probs(&mut g, &live, &aenc);
        let src = valid_tokens(&st_batch.src[i], &st_batch.src_mask[i]);
        match ctc_loss(&mut g, ctc_lp, &src, aenc.valid_len()) {
            Ok(node) => asr_nodes.push(node),
            Err(Error::CtcInfeasible { .. }) => asr_infeasible += 1,
            Err(e) => return Err(e),
        }
        let h = textual_encode(&mut g, &live, cfg, &aenc, s.dropout, &mut r)?;
        let tgt = valid_tokens(&st_batch.tgt[i], &st_batch.tgt_mask[i]);
        let (prev, out) = teacher_forcing(&tgt);
        let logits = decoder_forward(&mut g, &live, cfg, &h, &prev, s.dropout, &mut r)?;
        let ce = ce_loss(&mut g, logits, &out, &vec![true; out.len()])?;
        st_nodes.push(ce.node);
        aenc_outputs.push(aenc);
        ctc_lp_nodes.push(ctc_lp);
        h_st.push(h);
    }

    let mut mt_nodes = Vec::new();
    let mut h_mt: Vec<EncoderOutput> = Vec::with_capacity(mt_batch.len());
    for j in 0..mt_batch.len() {
        let mut r = rng::stream(s.seed, "mt-dropout", s.step);
        r.set_stream(j as u64);
        let src = valid_tokens(&mt_batch.src[j], &mt_batch.src_mask[j]);
        let emb = embed_tokens(&mut g, &live, cfg, &src, true);
        let emb = if s.dropout > 0.0 {
            g.dropout(emb, 1.0 - s.dropout, &mut r)
        } else {
            emb
        };
        let input = EncoderOutput {
            reps: emb,
            mask: vec![true; src.len()],
        };
        let h = textual_encode(&mut g, &live, cfg, &input, s.dropout, &mut r)?;
        let tgt = valid_tokens(&mt_batch.tgt[j], &mt_batch.tgt_mask[j]);
        let (prev, out) = teacher_forcing(&tgt);
        let logits = decoder_forward(&mut g, &live, cfg, &h, &prev, s.dropout, &mut r)?;
        let ce = ce_loss(&mut g, logits, &out, &vec![true; out.len()])?;
        mt_nodes.push(ce.node);
        h_mt.push(h);
    }

    let asr_node = if asr_nodes.is_empty() {
        None
    } else {
        Some(g.mean_of(&asr_nodes))
    };
    let st_node = g.mean_of(&st_nodes);
    let mt_node = g.mean_of(&mt_nodes);

    // adversarial terms: always evaluated so curves stay comparable, wired
    // into the objective only when lambda > 0
    let mut disc_correct = 0usize;
    let mut disc_total = 0usize;
    let mut d_bce_st = Vec::new();
    let mut d_bce_mt = Vec::new();
    let mut g_bce_st = Vec::new();
    let mut g_bce_mt = Vec::new();
    for h in &h_st {
        let det = g.detach(h.reps);
        let d = discriminate(
            &mut g,
            &live,
            cfg,
            &EncoderOutput { reps: det, mask: h.mask.clone() },
        )?;
        if g.scalar_value(d) < 0.5 {
            disc_correct += 1;
        }
        disc_total += 1;
        d_bce_st.push(bce(&mut g, d, 0.0));
        let d_live = discriminate(&mut g, &disc_frozen, cfg, h)?;
        g_bce_st.push(bce(&mut g, d_live, UNIFIED_TARGET));
    }
    for h in &h_mt {
        let det = g.detach(h.reps);
        let d = discriminate(
            &mut g,
            &live,
            cfg,
            &EncoderOutput { reps: det, mask: h.mask.clone() },
        )?;
        if g.scalar_value(d) >= 0.5 {
            disc_correct += 1;
        }
        disc_total += 1;
        d_bce_mt.push(bce(&mut g, d, 1.0));
        let d_live = discriminate(&mut g, &disc_frozen, cfg, h)?;
        g_bce_mt.push(bce(&mut g, d_live, UNIFIED_TARGET));
    }
    let disc_acc = disc_correct as f64 / disc_total.max(1) as f64;

    let d_st_mean = g.mean_of(&d_bce_st);
    let d_mt_mean = g.mean_of(&d_bce_mt);
    let mut disc_node = g.add(d_st_mean, d_mt_mean);
    let mut gen_st_node = g.mean_of(&g_bce_st);
    let mut gen_mt_node = g.mean_of(&g_bce_mt);

    // enhanced adversarial training: mixed sequences with target p
    let mut mix_info = None;
    if s.continuity.enabled && s.weights.lambda != 0.0 {
        let mut mix_rng = rng::stream(s.seed, "mix", s.step);
        let decisions: Vec<(usize, crate::continuity::MixDecision)> = match s.continuity.per {
            MixGranularity::Batch => {
                let d = sample_mix_rate(&mut mix_rng, s.continuity.tau);
                let idx = match d.branch {
                    MixBranch::StMix => mix_rng.gen_range(0..st_batch.len()),
                    MixBranch::MtNoise => mix_rng.gen_range(0..mt_batch.len()),
                };
                vec![(idx, d)]
            }
            MixGranularity::Example => {
                let mut all = Vec::new();
                for i in 0..st_batch.len() {
                    let d = sample_mix_rate(&mut mix_rng, s.continuity.tau);
                    if d.branch == MixBranch::StMix {
                        all.push((i, d));
                    }
                }
                for j in 0..mt_batch.len() {
                    let d = sample_mix_rate(&mut mix_rng, s.continuity.tau);
                    if d.branch == MixBranch::MtNoise {
                        all.push((j, d));
                    }
                }
                all
            }
        };
        for (idx, decision) in decisions {
            let mixed = match decision.branch {
                MixBranch::StMix => {
                    let aenc = &aenc_outputs[idx];
                    let preds = match s.continuity.replacement_source {
                        ReplacementSource::CtcArgmax => {
                            ctc_argmax(g.value(ctc_lp_nodes[idx]), &aenc.mask)
                        }
                        ReplacementSource::Gold => {
                            let src = valid_tokens(&st_batch.src[idx], &st_batch.src_mask[idx]);
                            gold_frame_tokens(&src, g.value(aenc.reps).nrows(), &aenc.mask)
                        }
                    };
                    let table = live.id("embed.table");
                    mix_st_sequence(
                        &mut g,
                        aenc,
                        &preds,
                        table,
                        cfg.d_model,
                        decision.p,
                        &mut mix_rng,
                    )?
                }
                MixBranch::MtNoise => {
                    let src = valid_tokens(&mt_batch.src[idx], &mt_batch.src_mask[idx]);
                    let emb = embed_tokens(&mut g, &live, cfg, &src, false);
                    let table = live.id("embed.table");
                    let blank = g.gather_rows(table, &[BLANK as usize]);
                    let blank = g.mul_scalar(blank, (cfg.d_model as f64).sqrt());
                    noise_mt_sequence(&mut g, emb, blank, decision.p, &mut mix_rng)?
                }
            };
            // position information over the (possibly longer) mixed sequence
            let len = g.value(mixed.sequence.reps).nrows();
            let pe = g.constant(sinusoidal_pe(len, cfg.d_model));
            let with_pe = g.add(mixed.sequence.reps, pe);
            let mut r = rng::stream(s.seed, "mix-dropout", s.step);
            let dropped = if s.dropout > 0.0 {
                g.dropout(with_pe, 1.0 - s.dropout, &mut r)
            } else {
                with_pe
            };
            let tenc_in = EncoderOutput {
                reps: dropped,
                mask: mixed.sequence.mask.clone(),
            };
            let h_mixed = textual_encode(&mut g, &live, cfg, &tenc_in, s.dropout, &mut r)?;
            let det = g.detach(h_mixed.reps);
            let d_mix = discriminate(
                &mut g,
                &live,
                cfg,
                &EncoderOutput { reps: det, mask: h_mixed.mask.clone() },
            )?;
            let mix_bce = bce(&mut g, d_mix, mixed.label);
            disc_node = g.add(disc_node, mix_bce);
            if s.continuity.mix_generator_loss {
                let d_live = discriminate(&mut g, &disc_frozen, cfg, &h_mixed)?;
                let gterm = bce(&mut g, d_live, UNIFIED_TARGET);
                match decision.branch {
                    MixBranch::StMix => gen_st_node = g.add(gen_st_node, gterm),
                    MixBranch::MtNoise => gen_mt_node = g.add(gen_mt_node, gterm),
                }
            }
            mix_info = Some((decision.branch, decision.p));
        }
    }

    // hard-alignment contrastive term over the ST batch's paired text
    let mut contrastive_node = None;
    if s.weights.w_contrastive != 0.0 && st_batch.len() >= 2 {
        let mut pooled_speech = Vec::with_capacity(st_batch.len());
        let mut pooled_text = Vec::with_capacity(st_batch.len());
        for i in 0..st_batch.len() {
            let mut r = rng::stream(s.seed, "con-dropout", s.step);
            r.set_stream(i as u64);
            let src = valid_tokens(&st_batch.src[i], &st_batch.src_mask[i]);
            match s.objectives.contrastive_level {
                AlignLevel::Low => {
                    let a = &aenc_outputs[i];
                    pooled_speech.push(g.masked_mean_rows(a.reps, &a.mask));
                    let emb = embed_tokens(&mut g, &live, cfg, &src, false);
                    pooled_text.push(g.masked_mean_rows(emb, &vec![true; src.len()]));
                }
                AlignLevel::High => {
                    let h = &h_st[i];
                    pooled_speech.push(g.masked_mean_rows(h.reps, &h.mask));
                    let emb = embed_tokens(&mut g, &live, cfg, &src, true);
                    let emb = if s.dropout > 0.0 {
                        g.dropout(emb, 1.0 - s.dropout, &mut r)
                    } else {
                        emb
                    };
                    let input = EncoderOutput {
                        reps: emb,
                        mask: vec![true; src.len()],
                    };
                    let ht = textual_encode(&mut g, &live, cfg, &input, s.dropout, &mut r)?;
                    pooled_text.push(g.masked_mean_rows(ht.reps, &ht.mask));
                }
            }
        }
        let speech = g.concat_rows(&pooled_speech);
        let text = g.concat_rows(&pooled_text);
        contrastive_node = Some(crate::objectives::contrastive_loss(
            &mut g,
            speech,
            text,
            s.objectives.contrastive_temperature,
        )?);
    }

    let gen_sum = g.add(gen_st_node, gen_mt_node);
    let parts = LossParts {
        asr: asr_node.map(|n| g.scalar_value(n)).unwrap_or(0.0),
        mt: g.scalar_value(mt_node),
        st: g.scalar_value(st_node),
        disc: g.scalar_value(disc_node),
        gen_st: g.scalar_value(gen_st_node),
        gen_mt: g.scalar_value(gen_mt_node),
        contrastive: contrastive_node.map(|n| g.scalar_value(n)).unwrap_or(0.0),
    };
    for (name, v) in [
        ("asr", parts.asr),
        ("mt", parts.mt),
        ("st", parts.st),
        ("disc", parts.disc),
        ("gen_st", parts.gen_st),
        ("gen_mt", parts.gen_mt),
        ("contrastive", parts.contrastive),
    ] {
        if !v.is_finite() {
            return Err(Error::Diverged {
                step: s.step,
                component: name.into(),
            });
        }
    }

    let total = match s.phase {
        Phase::Simultaneous => total_loss_node(
            &mut g,
            &TotalInputs {
                asr: asr_node,
                mt: Some(mt_node),
                st: Some(st_node),
                disc: Some(disc_node),
                gen_st: Some(gen_st_node),
                gen_mt: Some(gen_mt_node),
                contrastive: contrastive_node,
            },
            &s.weights,
            s.asr_active,
        ),
        Phase::DiscOnly => g.mul_scalar(disc_node, s.weights.lambda),
        Phase::GenOnly => {
            let task = total_loss_node(
                &mut g,
                &TotalInputs {
                    asr: asr_node,
                    mt: Some(mt_node),
                    st: Some(st_node),
                    disc: None,
                    gen_st: None,
                    gen_mt: None,
                    contrastive: contrastive_node,
                },
                &LossWeights {
                    lambda: 0.0,
                    ..s.weights
                },
                s.asr_active,
            );
            if s.weights.lambda != 0.0 {
                gen_phase_total(&mut g, task, gen_st_node, gen_mt_node, s.weights.lambda)
            } else {
                task
            }
        }
    };

    Ok(StepGraph {
        trainable: live.trainable().to_vec(),
        parts,
        total,
        disc_loss_node: Some(disc_node),
        gen_loss_node: Some(gen_sum),
        h_st: h_st.iter().map(|h| h.reps).collect(),
        h_mt: h_mt.iter().map(|h| h.reps).collect(),
        disc_acc,
        asr_infeasible,
        mix: mix_info,
        graph: g,
    })
}

/// GenOnly total needs the lambda-weighted generator pair without the
/// discriminator term; `total_loss_node` skips the whole adversarial block
/// when any of the three is absent, so wire it explicitly.
fn gen_phase_total(
    g: &mut Graph,
    task: NodeId,
    gen_st: NodeId,
    gen_mt: NodeId,
    lambda: f64,
) -> NodeId {
    let gsum = g.add(gen_st, gen_mt);
    let scaled = g.mul_scalar(gsum, lambda);
    g.add(task, scaled)
}

// ── the MT pre-training step ────────────────────────────────────────────

fn build_mt_step(
    model: &ModelConfig,
    params: &ParamSet,
    batch: &Batch,
    dropout: f64,
    seed: u64,
    step: u64,
) -> Result<(Graph, Vec<(usize, NodeId)>, NodeId, f64)> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, |grp| match grp {
        ParamGroup::Embedding | ParamGroup::Textual | ParamGroup::Decoder => BindMode::Train,
        _ => BindMode::Skip,
    });
    let mut ce_nodes = Vec::new();
    for j in 0..batch.len() {
        let mut r = rng::stream(seed, "pretrain-dropout", step);
        r.set_stream(j as u64);
        let src = valid_tokens(&batch.src[j], &batch.src_mask[j]);
        let emb = embed_tokens(&mut g, &bound, model, &src, true);
        let emb = if dropout > 0.0 {
            g.dropout(emb, 1.0 - dropout, &mut r)
        } else {
            emb
        };
        let input = EncoderOutput {
            reps: emb,
            mask: vec![true; src.len()],
        };
        let h = textual_encode(&mut g, &bound, model, &input, dropout, &mut r)?;
        let tgt = valid_tokens(&batch.tgt[j], &batch.tgt_mask[j]);
        let (prev, out) = teacher_forcing(&tgt);
        let logits = decoder_forward(&mut g, &bound, model, &h, &prev, dropout, &mut r)?;
        let ce = ce_loss(&mut g, logits, &out, &vec![true; out.len()])?;
        ce_nodes.push(ce.node);
    }
    let total = g.mean_of(&ce_nodes);
    let value = g.scalar_value(total);
    Ok((g, bound.trainable().to_vec(), total, value))
}

// ── validation ──────────────────────────────────────────────────────────

/// Mean per-token ST cross entropy over a dataset, evaluation mode.
pub fn validation_st_loss(model: &ModelConfig, params: &ParamSet, data: &[Triple]) -> Result<f64> {
    validation_loss(model, params, data, true)
}

/// Mean per-token MT cross entropy over a dataset, evaluation mode.
pub fn validation_mt_loss(model: &ModelConfig, params: &ParamSet, data: &[Triple]) -> Result<f64> {
    validation_loss(model, params, data, false)
}

fn validation_loss(
    model: &ModelConfig,
    params: &ParamSet,
    data: &[Triple],
    speech_side: bool,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("validation set is empty".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for t in data {
        let mut g = Graph::new();
        let bound = crate::network::bind_frozen(&mut g, params);
        let mut r = rng::stream(0, "eval", 0);
        let h = if speech_side {
            let frames = g.constant(t.frames.clone());
            let mask = vec![true; t.frames.nrows()];
            let aenc = acoustic_encode(&mut g, &bound, model, frames, &mask, 0.0, &mut r)?;
            textual_encode(&mut g, &bound, model, &aenc, 0.0, &mut r)?
        } else {
            let emb = embed_tokens(&mut g, &bound, model, &t.src_tokens, true);
            let input = EncoderOutput {
                reps: emb,
                mask: vec![true; t.src_tokens.len()],
            };
            textual_encode(&mut g, &bound, model, &input, 0.0, &mut r)?
        };
        let (prev, out) = teacher_forcing(&t.tgt_tokens);
        let logits = decoder_forward(&mut g, &bound, model, &h, &prev, 0.0, &mut r)?;
        let ce = ce_loss(&mut g, logits, &out, &vec![true; out.len()])?;
        total += g.scalar_value(ce.node);
        tokens += out.len();
    }
    Ok(total / tokens.max(1) as f64)
}

// ── audits ──────────────────────────────────────────────────────────────

fn grads_all_zero(g: &Graph, nodes: &[(usize, NodeId)], params: &ParamSet, pred: impl Fn(ParamGroup) -> bool) -> Option<String> {
    for (idx, node) in nodes {
        let group = params.entry(*idx).group;
        if !pred(group) {
            continue;
        }
        if let Some(grad) = g.grad(*node) {
            if grad.iter().any(|v| *v != 0.0) {
                return Some(params.entry(*idx).name.clone());
            }
        }
    }
    None
}

/// Verifies the adversarial contract on an assembled step: the discriminator
/// loss must not reach encoder-side (or any non-discriminator) parameters,
/// and the generator losses must not reach discriminator parameters.
pub fn audit_partition(sg: &mut StepGraph, params: &ParamSet, step: u64) -> Result<()> {
    if let Some(d) = sg.disc_loss_node {
        sg.graph.backward(d);
        if let Some(name) = grads_all_zero(&sg.graph, &sg.trainable, params, |grp| {
            grp != ParamGroup::Discriminator
        }) {
            return Err(Error::PartitionViolated {
                step,
                detail: format!("discriminator loss leaked into {name}"),
            });
        }
    }
    if let Some(gn) = sg.gen_loss_node {
        sg.graph.backward(gn);
        if let Some(name) = grads_all_zero(&sg.graph, &sg.trainable, params, |grp| {
            grp == ParamGroup::Discriminator
        }) {
            return Err(Error::PartitionViolated {
                step,
                detail: format!("generator loss leaked into {name}"),
            });
        }
    }
    Ok(())
}

// ── training loops ──────────────────────────────────────────────────────

pub struct TrainOutput {
    pub params: ParamSet,
    /// best-k average when checkpoints were written, else None
    pub averaged: Option<ParamSet>,
    pub log: Vec<TrainRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub asr_infeasible_total: usize,
}

fn collect_grads(g: &Graph, trainable: &[(usize, NodeId)]) -> Vec<(usize, Array2<f64>)> {
    trainable
        .iter()
        .filter_map(|(idx, node)| g.grad(*node).map(|gr| (*idx, gr.clone())))
        .collect()
}

/// Pre-trains embedding, textual encoder, and decoder on the MT task.
/// Acoustic encoder, CTC head, and discriminator stay untouched.
pub fn pretrain_mt(
    model: &ModelConfig,
    train: &TrainConfig,
    init: &ParamSet,
    mt_data: &[Triple],
    valid: &[Triple],
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutput> {
    train.validate()?;
    let mut params = init.clone();
    let mut adam = Adam::new(params.len());
    let mut stream = BatchStream::new(mt_data, train.max_frames, train.seed, "pretrain-order")?;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();

    for step in 1..=train.pretrain_steps {
        let batch = stream.next_batch()?;
        let (mut g, trainable, total, value) =
            build_mt_step(model, &params, &batch, model.dropout, train.seed, step)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                component: "mt".into(),
            });
        }
        g.backward(total);
        let grads = collect_grads(&g, &trainable);
        let lr = lr_at(step, train.learning_rate, train.warmup_steps);
        adam.apply(&mut params, &grads, lr);
        log.push(TrainRecord {
            step,
            parts: LossParts {
                mt: value,
                ..Default::default()
            },
            total: value,
            disc_acc: 0.5,
            lr,
        });
        if step % train.checkpoint_every == 0 {
            if let Some(dir) = ckpt_dir {
                let metric = validation_mt_loss(model, &params, valid)?;
                let path = dir.join(format!("pretrain_{step:06}.ckpt"));
                checkpoint::save(&path, &params, step, metric)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutput {
        params,
        averaged: None,
        log,
        checkpoints,
        asr_infeasible_total: 0,
    })
}

/// Multi-task fine-tuning with the adversarial objective, ASR step cap,
/// periodic validation checkpoints, and best-k averaging.
pub fn finetune_multitask(
    model: &ModelConfig,
    train: &TrainConfig,
    objectives: &ObjectivesConfig,
    continuity: &ContinuityConfig,
    init: &ParamSet,
    st_data: &[Triple],
    mt_data: &[Triple],
    valid: &[Triple],
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutput> {
    train.validate()?;
    objectives.validate()?;
    continuity.validate()?;
    let weights = LossWeights {
        w_asr: train.w_asr,
        w_mt: train.w_mt,
        w_st: train.w_st,
        lambda: train.lambda,
        w_contrastive: objectives.contrastive_weight,
    };
    let mut params = init.clone();
    let mut adam = Adam::new(params.len());
    let mut st_stream = BatchStream::new(st_data, train.max_frames, train.seed, "st-order")?;
    let mut mt_stream = BatchStream::new(mt_data, train.max_frames, train.seed, "mt-order")?;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut asr_infeasible_total = 0usize;

    for step in 1..=train.max_steps {
        let st_batch = st_stream.next_batch()?;
        let mt_batch = mt_stream.next_batch()?;
        let phase = if !train.alternating {
            Phase::Simultaneous
        } else if step % 2 == 1 {
            Phase::GenOnly
        } else {
            Phase::DiscOnly
        };
        let settings = StepSettings {
            model,
            weights,
            objectives,
            continuity,
            asr_active: step <= train.asr_step_cap,
            dropout: model.dropout,
            seed: train.seed,
            step,
            phase,
        };
        let mut sg = build_finetune_step(&settings, &params, &st_batch, &mt_batch)?;
        asr_infeasible_total += sg.asr_infeasible;
        if let Some(every) = train.grad_audit_every {
            if every > 0 && step % every == 0 && weights.lambda != 0.0 {
                audit_partition(&mut sg, &params, step)?;
            }
        }
        sg.graph.backward(sg.total);
        let grads = collect_grads(&sg.graph, &sg.trainable);
        if grads
            .iter()
            .any(|(_, g)| g.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged {
                step,
                component: "gradient".into(),
            });
        }
        let lr = lr_at(step, train.learning_rate, train.warmup_steps);
        adam.apply(&mut params, &grads, lr);
        log.push(TrainRecord {
            step,
            parts: sg.parts,
            total: sg.graph.scalar_value(sg.total),
            disc_acc: sg.disc_acc,
            lr,
        });
        if step % train.checkpoint_every == 0 {
            if let Some(dir) = ckpt_dir {
                let metric = validation_st_loss(model, &params, valid)?;
                let path = dir.join(format!("step_{step:06}.ckpt"));
                checkpoint::save(&path, &params, step, metric)?;
                checkpoints.push(path);
            }
        }
    }

    let averaged = if !checkpoints.is_empty() {
        let k = train.keep_best_k.min(checkpoints.len());
        Some(checkpoint::average_best(&checkpoints, k, &params)?)
    } else {
        None
    };
    Ok(TrainOutput {
        params,
        averaged,
        log,
        checkpoints,
        asr_infeasible_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;
    use crate::synthdata::{generate_corpus, SynthSpec, TranslationRule};

    fn tiny_model(vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: 32,
            d_feat: 16,
            vocab_size: vocab,
            n_acoustic_layers: 1,
            n_textual_layers: 1,
            n_decoder_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            disc_hidden: 16,
            disc_layers: 3,
            dropout: 0.1,
        }
    }

    fn tiny_spec(vocab: u32, seed: u64) -> SynthSpec {
        SynthSpec {
            vocab_size: vocab,
            min_len: 2,
            max_len: 5,
            frames_per_token: (5, 8),
            blank_insert_rate: 0.2,
            noise_std: 0.1,
            d_feat: 16,
            translation_rule: TranslationRule::Identity,
            seed,
        }
    }

    fn tiny_train(seed: u64) -> TrainConfig {
        TrainConfig {
            pretrain_steps: 20,
            max_steps: 6,
            learning_rate: 1e-3,
            warmup_steps: 10,
            w_asr: 1.0,
            w_mt: 0.5,
            w_st: 1.0,
            lambda: 3.5,
            asr_step_cap: 4,
            checkpoint_every: 3,
            keep_best_k: 2,
            seed,
            max_frames: 120,
            alternating: false,
            grad_audit_every: Some(1),
        }
    }

    #[test]
    fn lr_schedule_warmup_and_decay() {
        let peak = 2e-4;
        assert!((lr_at(100, peak, 100) - peak).abs() < 1e-18);
        assert!((lr_at(50, peak, 100) - peak * 0.5).abs() < 1e-18);
        assert!((lr_at(400, peak, 100) - peak * 0.5).abs() < 1e-18);
        assert!(lr_at(1, peak, 100) > 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = tiny_model(10);
        let mut params = init_params(&cfg, 1).unwrap();
        let idx = params.index_of("ctc.w").unwrap();
        let mut adam = Adam::new(params.len());
        for _ in 0..400 {
            let gr = params.entry(idx).value.clone(); // grad of 0.5 x^2
            adam.apply(&mut params, &[(idx, gr)], 0.05);
        }
        let norm: f64 = params.entry(idx).value.iter().map(|v| v * v).sum();
        assert!(norm < 1e-4, "Adam failed to shrink the quadratic: {norm}");
    }

    #[test]
    fn pretrain_reduces_mt_loss_and_freezes_other_groups() {
        let spec = tiny_spec(20, 5);
        let data = generate_corpus(&spec, 120).unwrap();
        let model = tiny_model(20);
        let mut train = tiny_train(11);
        train.pretrain_steps = 120;
        let init = init_params(&model, train.seed).unwrap();
        let out = pretrain_mt(&model, &train, &init, &data, &data[..10], None).unwrap();
        let early = out.log[4].parts.mt;
        let late = out.log.last().unwrap().parts.mt;
        assert!(
            late < 0.5 * early,
            "MT CE failed to drop: early {early}, late {late}"
        );
        // untouched groups are bit-identical
        for (a, b) in init.entries().iter().zip(out.params.entries()) {
            match a.group {
                ParamGroup::Acoustic | ParamGroup::CtcHead | ParamGroup::Discriminator => {
                    assert_eq!(a.value, b.value, "{} changed during MT pretraining", a.name);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn finetune_step_runs_with_audit_and_all_losses() {
        let spec = tiny_spec(16, 6);
        let data = generate_corpus(&spec, 30).unwrap();
        let model = tiny_model(16);
        let mut train = tiny_train(3);
        train.max_steps = 4;
        let objectives = ObjectivesConfig {
            contrastive_weight: 0.5,
            ..Default::default()
        };
        let continuity = ContinuityConfig::default();
        let init = init_params(&model, train.seed).unwrap();
        let out = finetune_multitask(
            &model,
            &train,
            &objectives,
            &continuity,
            &init,
            &data,
            &data,
            &data[..5],
            None,
        )
        .unwrap();
        assert_eq!(out.log.len(), 4);
        for rec in &out.log {
            assert!(rec.parts.st > 0.0);
            assert!(rec.parts.mt > 0.0);
            assert!(rec.parts.disc > 0.0);
            assert!(rec.total.is_finite());
        }
        // discriminator parameters moved (lambda > 0)
        let idx = init.index_of("disc.out.w").unwrap();
        assert_ne!(init.entry(idx).value, out.params.entry(idx).value);
    }

    #[test]
    fn lambda_zero_leaves_discriminator_untouched() {
        let spec = tiny_spec(16, 7);
        let data = generate_corpus(&spec, 30).unwrap();
        let model = tiny_model(16);
        let mut train = tiny_train(4);
        train.max_steps = 3;
        train.lambda = 0.0;
        let init = init_params(&model, train.seed).unwrap();
        let out = finetune_multitask(
            &model,
            &train,
            &ObjectivesConfig::default(),
            &ContinuityConfig::default(),
            &init,
            &data,
            &data,
            &data[..5],
            None,
        )
        .unwrap();
        for (a, b) in init.entries().iter().zip(out.params.entries()) {
            if a.group == ParamGroup::Discriminator {
                assert_eq!(a.value, b.value);
            }
        }
        // losses still logged for curves
        assert!(out.log[0].parts.disc > 0.0);
        // total excludes the adversarial terms
        let w = LossWeights {
            w_asr: train.w_asr,
            w_mt: train.w_mt,
            w_st: train.w_st,
            lambda: 0.0,
            w_contrastive: 0.0,
        };
        for rec in &out.log {
            assert_eq!(rec.total, total_loss(&rec.parts, &w, rec.step <= train.asr_step_cap));
        }
    }

    #[test]
    fn asr_cap_removes_asr_from_update_but_not_log() {
        let spec = tiny_spec(16, 8);
        let data = generate_corpus(&spec, 30).unwrap();
        let model = tiny_model(16);
        let mut train = tiny_train(5);
        train.max_steps = 4;
        train.asr_step_cap = 2;
        let init = init_params(&model, train.seed).unwrap();
        let out = finetune_multitask(
            &model,
            &train,
            &ObjectivesConfig::default(),
            &ContinuityConfig::default(),
            &init,
            &data,
            &data,
            &data[..5],
            None,
        )
        .unwrap();
        let w = LossWeights {
            w_asr: train.w_asr,
            w_mt: train.w_mt,
            w_st: train.w_st,
            lambda: train.lambda,
            w_contrastive: 0.0,
        };
        for rec in &out.log {
            assert!(rec.parts.asr > 0.0, "ASR still logged after the cap");
            let active = rec.step <= 2;
            assert_eq!(rec.total, total_loss(&rec.parts, &w, active));
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let spec = tiny_spec(16, 9);
        let data = generate_corpus(&spec, 30).unwrap();
        let model = tiny_model(16);
        let mut train = tiny_train(6);
        train.max_steps = 3;
        train.pretrain_steps = 5;
        let init = init_params(&model, train.seed).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let pre = pretrain_mt(&model, &train, &init, &data, &data[..5], Some(dir.path())).unwrap();
        let ckpt = pre.checkpoints.last().unwrap();

        let run = || {
            let mut p = init.clone();
            checkpoint::load_into(ckpt, &mut p).unwrap();
            finetune_multitask(
                &model,
                &train,
                &ObjectivesConfig::default(),
                &ContinuityConfig::default(),
                &p,
                &data,
                &data,
                &data[..5],
                None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log, "resumed runs must produce identical logs");
        for (x, y) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn continuity_does_not_touch_decoder_inputs() {
        let spec = tiny_spec(16, 10);
        let data = generate_corpus(&spec, 20).unwrap();
        let model = tiny_model(16);
        let train = tiny_train(7);
        let init = init_params(&model, train.seed).unwrap();
        let st = make_batches(&data, train.max_frames, Some(1)).unwrap();
        let mt = make_batches(&data, train.max_frames, Some(2)).unwrap();
        let objectives = ObjectivesConfig::default();
        let weights = LossWeights {
            w_asr: 1.0,
            w_mt: 0.5,
            w_st: 1.0,
            lambda: 3.5,
            w_contrastive: 0.0,
        };
        let build = |enabled: bool| {
            let continuity = ContinuityConfig {
                enabled,
                ..Default::default()
            };
            let settings = StepSettings {
                model: &model,
                weights,
                objectives: &objectives,
                continuity: &continuity,
                asr_active: true,
                dropout: model.dropout,
                seed: train.seed,
                step: 1,
                phase: Phase::Simultaneous,
            };
            build_finetune_step(&settings, &init, &st[0], &mt[0]).unwrap()
        };
        let on = build(true);
        let off = build(false);
        assert!(on.mix.is_some());
        assert!(off.mix.is_none());
        // decoder-side inputs and task losses are bit-identical
        assert_eq!(on.parts.st, off.parts.st);
        assert_eq!(on.parts.mt, off.parts.mt);
        assert_eq!(on.parts.asr, off.parts.asr);
        assert_eq!(on.parts.gen_st, off.parts.gen_st);
        assert_eq!(on.parts.gen_mt, off.parts.gen_mt);
        assert_ne!(on.parts.disc, off.parts.disc, "mixed BCE must change L_D");
        for (a, b) in on.h_st.iter().zip(&off.h_st) {
            assert_eq!(on.graph.value(*a), off.graph.value(*b));
        }
        for (a, b) in on.h_mt.iter().zip(&off.h_mt) {
            assert_eq!(on.graph.value(*a), off.graph.value(*b));
        }
    }

    #[test]
    fn alternating_phases_update_disjoint_parameter_sets() {
        let spec = tiny_spec(16, 12);
        let data = generate_corpus(&spec, 20).unwrap();
        let model = tiny_model(16);
        let mut train = tiny_train(8);
        train.max_steps = 2;
        train.alternating = true;
        let init = init_params(&model, train.seed).unwrap();
        let out = finetune_multitask(
            &model,
            &train,
            &ObjectivesConfig::default(),
            &ContinuityConfig::default(),
            &init,
            &data,
            &data,
            &data[..5],
            None,
        )
        .unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.log.iter().all(|r| r.total.is_finite()));
    }
}
