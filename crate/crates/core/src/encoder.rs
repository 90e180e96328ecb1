//! Frozen sentence encoder: a small bidirectional masked-token model whose
//! penultimate-layer states are mean-pooled into one vector per sentence.

use std::path::Path;

use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Paragraph, BLANK, SPECIALS};
use crate::error::{Error, Result};
use crate::params::{put_u32, read_artifact, write_atomic, ParamSet, Reader};
use crate::tape::AttentionMask;
use crate::train::{run_training, LossLog, Schedule};
use crate::transformer::{embed_packed, stack_forward, token_logits, Graph, TokenTransformer, TransformerConfig};

pub const VECTOR_MAGIC: &[u8; 8] = b"SSRVEC01";
pub const DEFAULT_MLM_RATE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub transformer: TransformerConfig,
    pub mask_rate: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub net: TokenTransformer,
    params: ParamSet<f32>,
    frozen: bool,
}

impl EncoderModel {
    /// Randomly initialized, not yet frozen.
    pub fn new(config: &TransformerConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        if config.n_blocks < 2 {
            return Err(Error::Config("the encoder needs at least 2 blocks".into()));
        }
        if vocab_size < SPECIALS.len() {
            return Err(Error::Corpus(format!("vocabulary of {vocab_size} is smaller than the special tokens")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = TokenTransformer::new(&mut params, "enc", config, vocab_size, &mut rng)?;
        Ok(Self { net, params, frozen: false })
    }

    pub fn load(config: &TransformerConfig, vocab_size: usize, path: &Path) -> Result<Self> {
        let mut m = Self::new(config, vocab_size, 0)?;
        m.params.load(path)?;
        m.frozen = true;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        self.params.to_checkpoint_bytes()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dim(&self) -> usize {
        self.net.config.d_model
    }

    /// Most likely token at every position of each (possibly `<blank>`-masked)
    /// sequence.
    pub fn fill_masks(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::eval(&self.params);
        let lp = self.net.log_probs(&mut g, seqs, &AttentionMask::Bidirectional)?;
        let v = g.tape.value(lp);
        let mut rows = (0..v.rows()).map(|r| argmax(v.row(r)));
        Ok(seqs.iter().map(|s| rows.by_ref().take(s.len()).collect()).collect())
    }

    fn truncate<'a>(&self, tokens: &'a [usize]) -> &'a [usize] {
        let max = self.net.config.max_positions;
        if tokens.len() > max {
            log::warn!("sentence of {} tokens truncated to {max}", tokens.len());
            &tokens[..max]
        } else {
            tokens
        }
    }
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Number of positions masked in a sequence of length `len`.
pub fn mask_count(len: usize, rate: f64) -> usize {
    ((rate * len as f64).round() as usize).max(1).min(len)
}

/// Replaces `mask_count` uniformly chosen positions with `<blank>`; returns
/// the corrupted copy and the chosen positions in increasing order.
pub fn mask_tokens<R: Rng>(tokens: &[usize], rate: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut picked = sample(rng, tokens.len(), mask_count(tokens.len(), rate)).into_vec();
    picked.sort_unstable();
    let mut out = tokens.to_vec();
    for &p in &picked {
        out[p] = BLANK;
    }
    (out, picked)
}

/// Trains a fresh encoder on every sentence of `corpus` and freezes it.
pub fn train_encoder_mlm(corpus: &[Paragraph], vocab_size: usize, cfg: &EncoderConfig) -> Result<(EncoderModel, LossLog)> {
    if !(cfg.mask_rate > 0.0 && cfg.mask_rate < 1.0) {
        return Err(Error::Config(format!("mask rate {} outside (0, 1)", cfg.mask_rate)));
    }
    let mut model = EncoderModel::new(&cfg.transformer, vocab_size, cfg.seed)?;
    let sentences: Vec<&[usize]> =
        corpus.iter().flat_map(|p| p.sentences.iter()).map(|s| model.truncate(s)).filter(|s| !s.is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6c_6d00);
    let log = if cfg.schedule.steps == 0 {
        LossLog::default()
    } else {
        let net = model.net.clone();
        let p = cfg.transformer.dropout_p;
        run_training(&mut model.params, sentences.len(), &cfg.schedule, &mut rng, |params, batch, rng| {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut targets = Vec::new();
            let mut mask = Vec::new();
            for &i in batch {
                let (masked, picked) = mask_tokens(sentences[i], cfg.mask_rate, rng);
                let mut flags = vec![false; masked.len()];
                picked.iter().for_each(|&q| flags[q] = true);
                targets.extend_from_slice(sentences[i]);
                mask.extend(flags);
                inputs.push(masked);
            }
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut g = Graph::train(params, p, &mut drop_rng);
            let seqs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
            let lp = net.log_probs(&mut g, &seqs, &AttentionMask::Bidirectional)?;
            let loss = g.tape.nll(lp, &targets, &mask)?;
            g.tape.backward(loss)?;
            Ok((g.tape.scalar(loss) as f64, g.param_grads(params)))
        })?
    };
    model.freeze();
    Ok((model, log))
}

fn require_frozen(model: &EncoderModel) -> Result<()> {
    if model.frozen {
        Ok(())
    } else {
        Err(Error::Contract("the encoder must be frozen before encoding".into()))
    }
}

/// Mean of the states after block `N - 1`, over every token position.
pub fn encode_sentence(model: &EncoderModel, tokens: &[usize]) -> Result<Vec<f32>> {
    Ok(encode_batch(model, &[tokens])?.pop().expect("one sentence in, one vector out"))
}

/// Encodes several sentences in one packed pass. Each vector is bit-identical
/// to encoding its sentence alone.
pub fn encode_batch(model: &EncoderModel, sentences: &[&[usize]]) -> Result<Vec<Vec<f32>>> {
    require_frozen(model)?;
    if sentences.is_empty() {
        return Ok(Vec::new());
    }
    if sentences.iter().any(|s| s.is_empty()) {
        return Err(Error::Degenerate("cannot encode an empty sentence".into()));
    }
    let seqs: Vec<&[usize]> = sentences.iter().map(|s| model.truncate(s)).collect();
    let mut g = Graph::eval(&model.params);
    let (h0, segs) = embed_packed(&mut g, &model.net.emb, &seqs)?;
    let blocks = &model.net.blocks[..model.net.blocks.len() - 1];
    let (h, _) = stack_forward(&mut g, blocks, h0, &segs, &AttentionMask::Bidirectional, None)?;
    let pooled = g.tape.mean_rows(h, &segs)?;
    let v = g.tape.value(pooled);
    Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
}

/// Masked-token logits, exposed for diagnostics.
pub fn mlm_logits(model: &EncoderModel, tokens: &[usize]) -> Result<Vec<Vec<f32>>> {
    let mut g = Graph::eval(&model.params);
    let (h0, segs) = embed_packed(&mut g, &model.net.emb, &[tokens])?;
    let (h, _) = stack_forward(&mut g, &model.net.blocks, h0, &segs, &AttentionMask::Bidirectional, None)?;
    let l = token_logits(&mut g, &model.net.head, h)?;
    let v = g.tape.value(l);
    Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
}

/// One vector per sentence in corpus order. Paragraphs are encoded on the
/// rayon pool; the result does not depend on the thread count.
pub fn encode_corpus(model: &EncoderModel, corpus: &[Paragraph]) -> Result<VectorCache> {
    encode_corpus_with(model, corpus, true)
}

pub fn encode_corpus_with(model: &EncoderModel, corpus: &[Paragraph], parallel: bool) -> Result<VectorCache> {
    require_frozen(model)?;
    let run = |p: &Paragraph| {
        let s: Vec<&[usize]> = p.sentences.iter().map(Vec::as_slice).collect();
        encode_batch(model, &s)
    };
    let rows: Vec<Vec<Vec<f32>>> = if parallel {
        corpus.par_iter().map(run).collect::<Result<_>>()?
    } else {
        corpus.iter().map(run).collect::<Result<_>>()?
    };
    let mut cache = VectorCache::new(model.dim());
    for (p, vs) in corpus.iter().zip(rows) {
        for (i, v) in vs.iter().enumerate() {
            cache.push(p.id as u32, i as u32, v)?;
        }
    }
    Ok(cache)
}

// ---------------------------------------------------------------------------
// Vector cache
// ---------------------------------------------------------------------------

/// Sentence vectors keyed by (paragraph id, sentence index), in insertion
/// order. Rows of one paragraph are contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorCache {
    dim: usize,
    keys: Vec<(u32, u32)>,
    data: Vec<f32>,
}

impl VectorCache {
    pub fn new(dim: usize) -> Self {
        Self { dim, keys: Vec::new(), data: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn push(&mut self, paragraph: u32, sentence: u32, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::dim(format!("vector of length {} in a cache of dimension {}", v.len(), self.dim)));
        }
        if let Some(&(last, _)) = self.keys.last() {
            if paragraph < last {
                return Err(Error::Contract(format!("paragraph {paragraph} inserted after paragraph {last}")));
            }
        }
        self.keys.push((paragraph, sentence));
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn key(&self, i: usize) -> (u32, u32) {
        self.keys[i]
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32), &[f32])> {
        self.keys.iter().copied().zip(self.data.chunks_exact(self.dim.max(1)))
    }

    /// Row ranges of each paragraph, in order.
    pub fn paragraphs(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.keys.len() {
            if i == self.keys.len() || self.keys[i].0 != self.keys[start].0 {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(VECTOR_MAGIC);
        put_u32(&mut out, self.dim);
        put_u32(&mut out, self.len());
        for ((p, s), v) in self.iter() {
            put_u32(&mut out, p as usize);
            put_u32(&mut out, s as usize);
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != VECTOR_MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected SSRVEC01".into() });
        }
        let at = r.pos;
        let dim = r.u32()?;
        if dim == 0 {
            return Err(Error::Format { offset: at as u64, msg: "dimension 0".into() });
        }
        let count = r.u32()?;
        let mut cache = Self::new(dim);
        for _ in 0..count {
            let at = r.pos;
            let p = r.u32()? as u32;
            let s = r.u32()? as u32;
            let v = r.f32s(dim)?;
            cache.push(p, s, &v).map_err(|e| Error::Format { offset: at as u64, msg: e.to_string() })?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format { offset: r.pos as u64, msg: "trailing bytes".into() });
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_artifact(path)?)
    }
}
