//! Seeded synthetic (speech, transcription, translation) corpora and the
//! manifest format for external datasets.
//!
//! The renderer deliberately reproduces the speech/text modality gap: frame
//! sequences are several times longer than the token sequences, carry
//! Gaussian noise, and contain interspersed blank (silence) frames.

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{Vocab, N_RESERVED, PAD};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// One training example: the paper-style (s, x, y) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub id: String,
    /// [T_frames x d_feat]
    pub frames: Array2<f64>,
    /// transcription token ids
    pub src_tokens: Vec<u32>,
    /// translation token ids
    pub tgt_tokens: Vec<u32>,
}

impl Triple {
    pub fn validate(&self, vocab_size: u32) -> Result<()> {
        if self.frames.nrows() < self.src_tokens.len() {
            return Err(Error::Shape(format!(
                "triple {}: {} frames for {} source tokens",
                self.id,
                self.frames.nrows(),
                self.src_tokens.len()
            )));
        }
        for &t in self.src_tokens.iter().chain(&self.tgt_tokens) {
            if t < N_RESERVED || t >= vocab_size {
                return Err(Error::Shape(format!(
                    "triple {}: token id {t} outside content range [{N_RESERVED}, {vocab_size})",
                    self.id
                )));
            }
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("triple {}: non-finite frame value", self.id)));
        }
        Ok(())
    }
}

/// Deterministic token-level translation mapping over content ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranslationRule {
    Identity,
    /// Content ids are permuted (Fisher-Yates under `perm_seed`) and then
    /// rotated by `offset` within the content range.
    PermuteOffset { perm_seed: u64, offset: u32 },
}

impl TranslationRule {
    /// Precomputed content-id map: index c (0-based content index) -> target
    /// content index.
    fn build_map(&self, n_content: u32) -> Vec<u32> {
        match self {
            TranslationRule::Identity => (0..n_content).collect(),
            TranslationRule::PermuteOffset { perm_seed, offset } => {
                let mut perm: Vec<u32> = (0..n_content).collect();
                let mut r = rng::stream(*perm_seed, "translation-perm", 0);
                for i in (1..perm.len()).rev() {
                    let j = r.gen_range(0..=i);
                    perm.swap(i, j);
                }
                perm.iter().map(|&p| (p + offset) % n_content).collect()
            }
        }
    }
}

/// Generator settings. Identical specs (including seed) produce
/// bit-identical corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub vocab_size: u32,
    pub min_len: usize,
    pub max_len: usize,
    /// inclusive range of frames rendered per token
    pub frames_per_token: (usize, usize),
    /// probability of inserting a blank frame after each content frame
    pub blank_insert_rate: f64,
    pub noise_std: f64,
    pub d_feat: usize,
    pub translation_rule: TranslationRule,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= N_RESERVED {
            return Err(Error::config(format!(
                "vocab_size {} leaves no content tokens",
                self.vocab_size
            )));
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return Err(Error::config(format!(
                "sentence length range [{}, {}] is invalid",
                self.min_len, self.max_len
            )));
        }
        let (lo, hi) = self.frames_per_token;
        if lo < 1 || hi < lo {
            return Err(Error::config(format!(
                "frames_per_token range [{lo}, {hi}] is invalid"
            )));
        }
        if !(0.0..=1.0).contains(&self.blank_insert_rate) {
            return Err(Error::config("blank_insert_rate must be in [0, 1]"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be nonnegative"));
        }
        if self.d_feat == 0 {
            return Err(Error::config("d_feat must be positive"));
        }
        Ok(())
    }

    /// Deterministic prototype vector for a content token; the blank
    /// prototype is the zero vector (silence energy floor).
    pub fn prototype(&self, token: u32) -> Vec<f64> {
        let mut r = rng::stream(self.seed, "prototype", token as u64);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..self.d_feat).map(|_| normal.sample(&mut r)).collect()
    }
}

/// Expands tokens into prototype frames plus noise, inserting blank frames.
/// Frame values are quantized through f32 so on-disk storage round-trips
/// exactly.
pub fn render_speech(src_tokens: &[u32], spec: &SynthSpec, r: &mut impl Rng) -> Array2<f64> {
    render_speech_labeled(src_tokens, spec, r).0
}

/// As [`render_speech`] but also returns the per-frame gold label
/// (the owning token id, or the blank id for inserted silence frames).
pub fn render_speech_labeled(
    src_tokens: &[u32],
    spec: &SynthSpec,
    r: &mut impl Rng,
) -> (Array2<f64>, Vec<u32>) {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (lo, hi) = spec.frames_per_token;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let noisy_row = |proto: &[f64], r: &mut dyn rand::RngCore| -> Vec<f64> {
        proto
            .iter()
            .map(|&p| {
                let v = p + spec.noise_std * normal.sample(r);
                v as f32 as f64
            })
            .collect()
    };
    let blank_proto = vec![0.0; spec.d_feat];
    for &tok in src_tokens {
        let proto = spec.prototype(tok);
        let k = r.gen_range(lo..=hi);
        for _ in 0..k {
            rows.push(noisy_row(&proto, r));
            labels.push(tok);
            if r.gen::<f64>() < spec.blank_insert_rate {
                rows.push(noisy_row(&blank_proto, r));
                labels.push(crate::vocab::BLANK);
            }
        }
    }
    let t = rows.len();
    let frames = Array2::from_shape_vec((t, spec.d_feat), rows.into_iter().flatten().collect())
        .expect("render_speech shape");
    (frames, labels)
}

/// Generates `n` triples. Pure function of (spec, n): each example uses an
/// RNG stream derived from (spec.seed, index).
pub fn generate_corpus(spec: &SynthSpec, n: usize) -> Result<Vec<Triple>> {
    spec.validate()?;
    if n < 1 {
        return Err(Error::config("corpus size must be >= 1"));
    }
    let n_content = spec.vocab_size - N_RESERVED;
    let map = spec.translation_rule.build_map(n_content);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(spec.seed, "triple", i as u64);
        let len = r.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<u32> = (0..len)
            .map(|_| N_RESERVED + r.gen_range(0..n_content))
            .collect();
        let tgt: Vec<u32> = src.iter().map(|&t| N_RESERVED + map[(t - N_RESERVED) as usize]).collect();
        let frames = render_speech(&src, spec, &mut r);
        out.push(Triple {
            id: format!("t{i:06}"),
            frames,
            src_tokens: src,
            tgt_tokens: tgt,
        });
    }
    Ok(out)
}

// ── manifest + frame storage ────────────────────────────────────────────

const MANIFEST_HEADER: &str = "id\tframes\tn_frames\tsrc_text\ttgt_text";

fn write_frames_file(path: &Path, frames: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + frames.len() * 4);
    buf.extend_from_slice(&(frames.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.ncols() as u32).to_le_bytes());
    for v in frames.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_frames_file(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 8 {
        return Err(Error::Ingest {
            location: path.display().to_string(),
            message: "frame file shorter than 8-byte header".into(),
        });
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expect = 8 + t * d * 4;
    if bytes.len() != expect {
        return Err(Error::Ingest {
            location: path.display().to_string(),
            message: format!("expected {expect} bytes for {t}x{d} frames, found {}", bytes.len()),
        });
    }
    let mut data = Vec::with_capacity(t * d);
    for chunk in bytes[8..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Array2::from_shape_vec((t, d), data).map_err(|e| Error::Ingest {
        location: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Writes manifest.tsv, vocab.txt and frames/*.bin under `dir`.
pub fn write_corpus(dir: &Path, triples: &[Triple], vocab: &Vocab) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(frames_dir.display().to_string(), e))?;
    vocab.save(&dir.join("vocab.txt"))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for t in triples {
        let rel = format!("frames/{}.bin", t.id);
        write_frames_file(&dir.join(&rel), &t.frames)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            t.id,
            rel,
            t.frames.nrows(),
            vocab.decode(&t.src_tokens),
            vocab.decode(&t.tgt_tokens)
        ));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads a corpus from its manifest; frame paths are resolved relative to
/// the manifest location.
pub fn load_manifest(manifest_path: &Path, vocab: &Vocab) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Ingest {
                location: format!("{}:1", manifest_path.display()),
                message: format!(
                    "bad header {:?}, expected {MANIFEST_HEADER:?}",
                    other.map(|(_, h)| h).unwrap_or("")
                ),
            })
        }
    }
    let mut triples = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let loc = format!("{}:{}", manifest_path.display(), lineno + 1);
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Ingest {
                location: loc,
                message: format!("expected 5 tab-separated fields, found {}", cols.len()),
            });
        }
        let id = cols[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Ingest {
                location: loc,
                message: format!("duplicate id '{id}'"),
            });
        }
        let n_frames: usize = cols[2].parse().map_err(|_| Error::Ingest {
            location: loc.clone(),
            message: format!("bad n_frames '{}'", cols[2]),
        })?;
        let frames = read_frames_file(&base.join(cols[1]))?;
        if frames.nrows() != n_frames {
            return Err(Error::Ingest {
                location: loc,
                message: format!(
                    "manifest says {n_frames} frames but file stores {}",
                    frames.nrows()
                ),
            });
        }
        let src_tokens = vocab.encode(cols[3], &loc)?;
        let tgt_tokens = vocab.encode(cols[4], &loc)?;
        triples.push(Triple {
            id,
            frames,
            src_tokens,
            tgt_tokens,
        });
    }
    Ok(triples)
}

// ── batching ────────────────────────────────────────────────────────────

/// A right-padded, masked batch. `frames[i]` is padded to the batch frame
/// length; masks mark real positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub frames: Vec<Array2<f64>>,
    pub frame_mask: Vec<Vec<bool>>,
    pub src: Vec<Vec<u32>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt: Vec<Vec<u32>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn from_triples(triples: &[&Triple]) -> Batch {
        let t_max = triples.iter().map(|t| t.frames.nrows()).max().unwrap();
        let ls_max = triples.iter().map(|t| t.src_tokens.len()).max().unwrap();
        let lt_max = triples.iter().map(|t| t.tgt_tokens.len()).max().unwrap();
        let d = triples[0].frames.ncols();
        let mut b = Batch {
            ids: Vec::new(),
            frames: Vec::new(),
            frame_mask: Vec::new(),
            src: Vec::new(),
            src_mask: Vec::new(),
            tgt: Vec::new(),
            tgt_mask: Vec::new(),
        };
        for t in triples {
            let mut f = Array2::zeros((t_max, d));
            f.slice_mut(ndarray::s![..t.frames.nrows(), ..]).assign(&t.frames);
            let mut fm = vec![false; t_max];
            fm[..t.frames.nrows()].fill(true);
            let pad_tokens = |toks: &[u32], to: usize| {
                let mut v = toks.to_vec();
                let mut m = vec![true; toks.len()];
                v.resize(to, PAD);
                m.resize(to, false);
                (v, m)
            };
            let (src, src_mask) = pad_tokens(&t.src_tokens, ls_max);
            let (tgt, tgt_mask) = pad_tokens(&t.tgt_tokens, lt_max);
            b.ids.push(t.id.clone());
            b.frames.push(f);
            b.frame_mask.push(fm);
            b.src.push(src);
            b.src_mask.push(src_mask);
            b.tgt.push(tgt);
            b.tgt_mask.push(tgt_mask);
        }
        b
    }
}

/// Packs the dataset into frame-count-bounded batches: for every batch,
/// padded frame total (batch max length x batch size) stays <= max_frames.
pub fn make_batches(
    dataset: &[Triple],
    max_frames: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if dataset.is_empty() {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut r = rng::stream(seed, "batch-shuffle", 0);
        for i in (1..order.len()).rev() {
            let j = r.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    let mut batches = Vec::new();
    let mut current: Vec<&Triple> = Vec::new();
    let mut cur_max_t = 0usize;
    for &i in &order {
        let t = &dataset[i];
        let nf = t.frames.nrows();
        if nf > max_frames {
            return Err(Error::config(format!(
                "example {} has {nf} frames, exceeding max_frames {max_frames}",
                t.id
            )));
        }
        let new_max = cur_max_t.max(nf);
        if !current.is_empty() && new_max * (current.len() + 1) > max_frames {
            batches.push(Batch::from_triples(&current));
            current.clear();
            cur_max_t = 0;
        }
        cur_max_t = cur_max_t.max(nf);
        current.push(t);
    }
    if !current.is_empty() {
        batches.push(Batch::from_triples(&current));
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> SynthSpec {
        SynthSpec {
            vocab_size: 24,
            min_len: 3,
            max_len: 8,
            frames_per_token: (2, 4),
            blank_insert_rate: 0.2,
            noise_std: 0.1,
            d_feat: 16,
            translation_rule: TranslationRule::PermuteOffset {
                perm_seed: 11,
                offset: 3,
            },
            seed: 7,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = toy_spec();
        let a = generate_corpus(&spec, 100).unwrap();
        let b = generate_corpus(&spec, 100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_rule_copies_source() {
        let mut spec = toy_spec();
        spec.translation_rule = TranslationRule::Identity;
        for t in generate_corpus(&spec, 50).unwrap() {
            assert_eq!(t.src_tokens, t.tgt_tokens);
        }
    }

    #[test]
    fn translation_rule_is_bijective_content_map() {
        let spec = toy_spec();
        let map = spec.translation_rule.build_map(20);
        let mut seen: Vec<bool> = vec![false; 20];
        for &m in &map {
            assert!(!seen[m as usize]);
            seen[m as usize] = true;
        }
    }

    #[test]
    fn frame_token_ratio_matches_expectation() {
        // mean(frames_per_token)=3, blank rate 0.2 -> expected ratio 3.6
        let mut spec = toy_spec();
        spec.min_len = 4;
        spec.max_len = 10;
        let corpus = generate_corpus(&spec, 10_000).unwrap();
        let mean_ratio: f64 = corpus
            .iter()
            .map(|t| t.frames.nrows() as f64 / t.src_tokens.len() as f64)
            .sum::<f64>()
            / corpus.len() as f64;
        assert!(
            (3.4..=3.8).contains(&mean_ratio),
            "mean frame/token ratio {mean_ratio} outside [3.4, 3.8]"
        );
    }

    #[test]
    fn degenerate_rendering_hits_prototypes_exactly() {
        let mut spec = toy_spec();
        spec.noise_std = 0.0;
        spec.blank_insert_rate = 0.0;
        spec.frames_per_token = (1, 1);
        let mut r = rng::stream(1, "test", 0);
        let tokens = vec![5, 9, 5];
        let frames = render_speech(&tokens, &spec, &mut r);
        assert_eq!(frames.nrows(), 3);
        for (i, &tok) in tokens.iter().enumerate() {
            let proto = spec.prototype(tok);
            for (j, &p) in proto.iter().enumerate() {
                assert_eq!(frames[[i, j]], p as f32 as f64);
            }
        }
    }

    #[test]
    fn repeated_prototypes_with_fixed_frame_count() {
        let mut spec = toy_spec();
        spec.noise_std = 0.0;
        spec.blank_insert_rate = 0.0;
        spec.frames_per_token = (3, 3);
        let mut r = rng::stream(2, "test", 0);
        let frames = render_speech(&[6, 7], &spec, &mut r);
        assert_eq!(frames.nrows(), 6);
        for rep in 1..3 {
            assert_eq!(frames.row(0), frames.row(rep));
            assert_eq!(frames.row(3), frames.row(3 + rep));
        }
    }

    #[test]
    fn nearest_prototype_recovers_tokens() {
        // frame-level nearest-prototype classification (the rendering oracle)
        // should recover >= 95% of non-blank frames at noise_std 0.1.
        let spec = toy_spec();
        let mut protos: Vec<(u32, Vec<f64>)> = (N_RESERVED..spec.vocab_size)
            .map(|t| (t, spec.prototype(t)))
            .collect();
        protos.push((crate::vocab::BLANK, vec![0.0; spec.d_feat]));
        let mut total = 0usize;
        let mut correct = 0usize;
        for i in 0..200u64 {
            let mut r = rng::stream(spec.seed, "oracle-triple", i);
            let len = r.gen_range(spec.min_len..=spec.max_len);
            let tokens: Vec<u32> = (0..len)
                .map(|_| N_RESERVED + r.gen_range(0..spec.vocab_size - N_RESERVED))
                .collect();
            let (frames, labels) = render_speech_labeled(&tokens, &spec, &mut r);
            for (row, &gold) in frames.rows().into_iter().zip(&labels) {
                if gold == crate::vocab::BLANK {
                    continue;
                }
                total += 1;
                let best = protos
                    .iter()
                    .map(|(tok, p)| {
                        let d: f64 = row.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                        (*tok, d)
                    })
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap()
                    .0;
                if best == gold {
                    correct += 1;
                }
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "nearest-prototype accuracy {acc} < 0.95");
    }

    #[test]
    fn corpus_manifest_roundtrip() {
        let spec = toy_spec();
        let vocab = Vocab::synthetic(spec.vocab_size).unwrap();
        let corpus = generate_corpus(&spec, 25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus, &vocab).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.tsv"), &vocab).unwrap();
        assert_eq!(corpus, loaded);
    }

    #[test]
    fn manifest_frame_count_mismatch_is_error() {
        let spec = toy_spec();
        let vocab = Vocab::synthetic(spec.vocab_size).unwrap();
        let corpus = generate_corpus(&spec, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus, &vocab).unwrap();
        let manifest = dir.path().join("manifest.tsv");
        let text = fs::read_to_string(&manifest).unwrap();
        // corrupt n_frames on the second data row
        let mut lines: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let cols: Vec<&str> = lines[2].split('\t').collect();
        lines[2] = format!("{}\t{}\t9999\t{}\t{}", cols[0], cols[1], cols[3], cols[4]);
        fs::write(&manifest, lines.join("\n")).unwrap();
        let err = load_manifest(&manifest, &vocab).unwrap_err();
        assert!(err.to_string().contains("9999"), "{err}");
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        fs::write(&path, format!("{MANIFEST_HEADER}\n")).unwrap();
        let vocab = Vocab::synthetic(10).unwrap();
        assert!(load_manifest(&path, &vocab).unwrap().is_empty());
    }

    #[test]
    fn batches_partition_and_respect_budget() {
        let spec = toy_spec();
        let corpus = generate_corpus(&spec, 60).unwrap();
        let max_frames = 160;
        let batches = make_batches(&corpus, max_frames, Some(3)).unwrap();
        let total: usize = batches.iter().map(|b| b.len()).sum();
        assert_eq!(total, corpus.len());
        for b in &batches {
            let t_max = b.frames[0].nrows();
            assert!(t_max * b.len() <= max_frames);
            for (f, m) in b.frames.iter().zip(&b.frame_mask) {
                assert_eq!(f.nrows(), t_max);
                assert_eq!(m.len(), t_max);
            }
        }
    }

    #[test]
    fn single_example_batch_mask_all_true() {
        let spec = toy_spec();
        let corpus = generate_corpus(&spec, 1).unwrap();
        let batches = make_batches(&corpus, 10_000, None).unwrap();
        assert_eq!(batches.len(), 1);
        assert!(batches[0].frame_mask[0].iter().all(|&m| m));
        assert!(batches[0].src_mask[0].iter().all(|&m| m));
    }

    #[test]
    fn oversized_example_is_config_error() {
        let spec = toy_spec();
        let corpus = generate_corpus(&spec, 5).unwrap();
        assert!(make_batches(&corpus, 3, None).is_err());
    }

    #[test]
    fn every_speech_matrix_gets_blanks_eventually() {
        // gap property: with rate 0.2 and len >= 3x4 frames the chance of a
        // blank-free matrix is tiny; check the median ratio > 3 too.
        let spec = toy_spec();
        let corpus = generate_corpus(&spec, 300).unwrap();
        let mut ratios: Vec<f64> = corpus
            .iter()
            .map(|t| t.frames.nrows() as f64 / t.src_tokens.len() as f64)
            .collect();
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(ratios[ratios.len() / 2] > 3.0);
        let with_blank = corpus
            .iter()
            .filter(|t| t.frames.rows().into_iter().any(|r| r.iter().map(|v| v.abs()).sum::<f64>() < 2.0))
            .count();
        assert!(with_blank as f64 / corpus.len() as f64 > 0.9);
    }
}
