//! Surface realization: cosine matching against candidate sentences, and
//! token decoders conditioned on a sentence vector alone (vanilla) or on the
//! vector plus the preceding context tokens (mixed).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Paragraph, BLANK, EOS, PAD};
use crate::encoder::VectorCache;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tape::{AttentionMask, Segment, Var};
use crate::tensor::{cosine_sim, Tensor, COSINE_EPS};
use crate::train::{run_training, LossLog, Schedule};
use crate::transformer::{positions, token_logits, Graph, Linear, TokenTransformer, TransformerConfig, EMBED_STD};

pub const DEFAULT_TOP_K: usize = 20;
pub const DEFAULT_BUDGET: usize = 64;
/// Ids never produced by sampling.
pub const BANNED: [usize; 2] = [PAD, BLANK];

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

/// Candidate indices by descending cosine similarity to `z`, ties by lowest
/// index, with their scores.
pub fn match_candidates(z: &[f32], candidates: &[Vec<f32>]) -> Result<Vec<(usize, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Degenerate("no candidates to match".into()));
    }
    let zd: Vec<f64> = z.iter().map(|&x| x as f64).collect();
    let mut scored = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if c.len() != z.len() {
                return Err(Error::dim(format!("candidate {i} has dimension {} not {}", c.len(), z.len())));
            }
            let cd: Vec<f64> = c.iter().map(|&x| x as f64).collect();
            Ok((i, cosine_sim(&zd, &cd, COSINE_EPS)?))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationParams {
    pub k: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { k: DEFAULT_TOP_K, max_len: 32, seed: 0 }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_len == 0 {
            return Err(Error::Config(format!("k and max_len must be at least 1: {self:?}")));
        }
        Ok(())
    }
}

/// Softmax restricted to the `k` highest logits (ties at the cut go to the
/// lowest id), zero elsewhere.
pub fn top_k_filter(logits: &[f32], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k.max(1));
    let max = logits[order[0]] as f64;
    let mut p = vec![0.0; logits.len()];
    let mut total = 0.0;
    for &i in &order {
        let e = (logits[i] as f64 - max).exp();
        p[i] = e;
        total += e;
    }
    p.iter_mut().for_each(|x| *x /= total);
    p
}

/// Draws one id from `probs` by inverse transform over increasing ids.
pub fn sample_from<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Samples continuations for several prompts at once.
///
/// `logits(items, generated)` returns next-token logits for each listed item
/// given its tokens generated so far. Item `i` draws from its own stream
/// seeded with `seeds[i]` and stops at `<eos>`, after `max_len` tokens, or
/// when its prompt plus output would exceed `room[i]` more positions.
pub fn sample_batch<L>(room: &[usize], params: &GenerationParams, seeds: &[u64], mut logits: L) -> Result<Vec<Vec<usize>>>
where
    L: FnMut(&[usize], &[Vec<usize>]) -> Result<Vec<Vec<f32>>>,
{
    params.validate()?;
    let n = room.len();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut out = vec![Vec::new(); n];
    let mut active: Vec<usize> = (0..n).filter(|&i| room[i] > 0).collect();
    let mut step = 0;
    while !active.is_empty() && step < params.max_len {
        let rows = logits(&active, &out)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, mut row) in active.iter().zip(rows) {
            for &b in &BANNED {
                if b < row.len() {
                    row[b] = f32::NEG_INFINITY;
                }
            }
            let id = sample_from(&top_k_filter(&row, params.k), &mut rngs[i]);
            if id == EOS {
                continue;
            }
            out[i].push(id);
            if out[i].len() < room[i] {
                still.push(i);
            }
        }
        active = still;
        step += 1;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderVariant {
    Vanilla,
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub transformer: TransformerConfig,
    pub d_sentence: usize,
    /// Prefix length cap for mixed prompts, vector and separator included.
    pub budget: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

/// The conditioning prefix: a projected vector followed by token rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub vector: Vec<f32>,
    /// Context tokens (possibly none) followed by `<eos>`.
    pub tokens: Vec<usize>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        1 + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `[proj(z), emb(<eos>)]`.
pub fn build_vanilla_prompt(z: &[f32]) -> Prompt {
    Prompt { vector: z.to_vec(), tokens: vec![EOS] }
}

/// `[proj(z), emb(context tail), emb(<eos>)]`, keeping the last `budget - 2`
/// context tokens.
pub fn build_mixed_prompt(z: &[f32], prev: &[usize], budget: usize) -> Result<Prompt> {
    if budget < 2 {
        return Err(Error::Contract(format!("prompt budget {budget} leaves no room for vector and separator")));
    }
    let keep = prev.len().min(budget - 2);
    let mut tokens = prev[prev.len() - keep..].to_vec();
    tokens.push(EOS);
    Ok(Prompt { vector: z.to_vec(), tokens })
}

#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    pub net: TokenTransformer,
    pub proj: Linear,
    params: ParamSet<f32>,
}

impl DecoderModel {
    pub fn new(config: &DecoderConfig, vocab_size: usize) -> Result<Self> {
        if vocab_size <= EOS {
            return Err(Error::Config("vocabulary lacks <eos>".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let net = TokenTransformer::new(&mut params, "dec", &config.transformer, vocab_size, &mut rng)?;
        let proj = Linear::new(&mut params, "dec.proj", config.d_sentence, config.transformer.d_model, EMBED_STD, &mut rng);
        Ok(Self { config: config.clone(), net, proj, params })
    }

    pub fn load(config: &DecoderConfig, vocab_size: usize, path: &Path) -> Result<Self> {
        let mut m = Self::new(config, vocab_size)?;
        m.params.load(path)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.net.vocab_size()
    }

    /// Prefix rows before positional embeddings.
    pub fn prompt_embedding(&self, prompt: &Prompt) -> Result<Tensor<f32>> {
        let mut g = Graph::eval(&self.params);
        let (rows, _) = self.embed_rows(&mut g, &[&prompt.vector], &[&prompt.tokens])?;
        Ok(g.tape.value(rows).clone())
    }

    /// Packs `[proj(v_i), emb(tokens_i)]` for every item.
    fn embed_rows<F: Real>(&self, g: &mut Graph<'_, F>, vectors: &[&[f32]], tokens: &[&[usize]]) -> Result<(Var, Vec<Segment>)> {
        let d = self.config.d_sentence;
        if let Some(v) = vectors.iter().find(|v| v.len() != d) {
            return Err(Error::dim(format!("sentence vector of length {} where {d} expected", v.len())));
        }
        let vocab = self.vocab_size();
        if let Some(bad) = tokens.iter().flat_map(|t| t.iter()).find(|&&i| i >= vocab) {
            return Err(Error::Range(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let z = Tensor::new(&[vectors.len(), d], vectors.iter().flat_map(|v| v.iter()).map(|&x| F::of(x as f64)).collect())?;
        let z = g.tape.constant(z);
        let projected = self.proj.forward(g, z)?;
        let mut parts = Vec::with_capacity(2 * vectors.len());
        for (i, t) in tokens.iter().enumerate() {
            parts.push(g.tape.gather(projected, &[i])?);
            if !t.is_empty() {
                parts.push(g.tape.gather(g.p(self.net.emb.words), t)?);
            }
        }
        let rows = g.tape.concat_rows(&parts)?;
        let segments = Segment::pack(tokens.iter().map(|t| 1 + t.len()));
        Ok((rows, segments))
    }

    /// Hidden states for packed `[vector, tokens]` sequences.
    fn hidden<F: Real>(&self, g: &mut Graph<'_, F>, vectors: &[&[f32]], tokens: &[&[usize]]) -> Result<(Var, Vec<Segment>)> {
        let (rows, segs) = self.embed_rows(g, vectors, tokens)?;
        if let Some(s) = segs.iter().find(|s| s.len > self.net.config.max_positions) {
            return Err(Error::Range(format!("sequence of {} exceeds {} positions", s.len, self.net.config.max_positions)));
        }
        let pos = g.tape.gather(g.p(self.net.emb.positions), &positions(&segs))?;
        let h0 = g.tape.add(rows, pos)?;
        let (h, _) = self.net.hidden(g, h0, &segs, &AttentionMask::Causal, None)?;
        Ok((h, segs))
    }

    /// Mean target-token NLL of `items` on `g`.
    pub fn loss<F: Real>(&self, g: &mut Graph<'_, F>, items: &[DecoderItem]) -> Result<Var> {
        let vectors: Vec<&[f32]> = items.iter().map(|i| i.prompt.vector.as_slice()).collect();
        let inputs: Vec<Vec<usize>> = items.iter().map(DecoderItem::input_tokens).collect();
        let tokens: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let (h, segs) = self.hidden(g, &vectors, &tokens)?;
        let logits = token_logits(g, &self.net.head, h)?;
        let lp = g.tape.log_softmax(logits)?;
        let total: usize = segs.iter().map(|s| s.len).sum();
        let mut targets = vec![0; total];
        let mut mask = vec![false; total];
        for (it, s) in items.iter().zip(&segs) {
            let first = s.start + it.prompt.len() - 1;
            for (j, &t) in it.target.iter().enumerate() {
                targets[first + j] = t;
                mask[first + j] = true;
            }
        }
        g.tape.nll(lp, &targets, &mask)
    }

    /// Next-token logits after each `prompt ++ generated` sequence.
    pub fn next_logits(&self, prompts: &[&Prompt], generated: &[&[usize]]) -> Result<Vec<Vec<f32>>> {
        let vectors: Vec<&[f32]> = prompts.iter().map(|p| p.vector.as_slice()).collect();
        let seqs: Vec<Vec<usize>> = prompts.iter().zip(generated).map(|(p, g)| [p.tokens.as_slice(), g].concat()).collect();
        let tokens: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::eval(&self.params);
        let (h, segs) = self.hidden(&mut g, &vectors, &tokens)?;
        let last: Vec<usize> = segs.iter().map(|s| s.start + s.len - 1).collect();
        let h = g.tape.gather(h, &last)?;
        let l = token_logits(&mut g, &self.net.head, h)?;
        let v = g.tape.value(l);
        Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
    }
}

/// One decoder training example: the prompt and the target tokens ending
/// with `<eos>`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderItem {
    pub prompt: Prompt,
    pub target: Vec<usize>,
}

impl DecoderItem {
    /// Prompt tokens then every target token except the last, which is only
    /// ever predicted.
    pub fn input_tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.tokens.clone();
        t.extend_from_slice(&self.target[..self.target.len() - 1]);
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriple {
    /// Ground-truth vector of the target sentence.
    pub z: Vec<f32>,
    /// Every token of the preceding sentences of the paragraph.
    pub context: Vec<usize>,
    /// Target tokens followed by `<eos>`.
    pub target: Vec<usize>,
}

impl TrainingTriple {
    pub fn item(&self, variant: DecoderVariant, budget: usize) -> Result<DecoderItem> {
        let prompt = match variant {
            DecoderVariant::Vanilla => build_vanilla_prompt(&self.z),
            DecoderVariant::Mixed => build_mixed_prompt(&self.z, &self.context, budget)?,
        };
        Ok(DecoderItem { prompt, target: self.target.clone() })
    }
}

/// One triple per non-first sentence of every paragraph.
pub fn make_training_triples(corpus: &[Paragraph], cache: &VectorCache) -> Result<Vec<TrainingTriple>> {
    let total: usize = corpus.iter().map(Paragraph::len).sum();
    if total != cache.len() {
        return Err(Error::Corpus(format!("{} cached vectors for {total} sentences", cache.len())));
    }
    let mut out = Vec::new();
    let mut row = 0;
    for p in corpus {
        for (s, sent) in p.sentences.iter().enumerate() {
            if cache.key(row) != (p.id as u32, s as u32) {
                return Err(Error::Corpus(format!(
                    "cache row {row} is {:?}, expected paragraph {} sentence {s}",
                    cache.key(row),
                    p.id
                )));
            }
            if s > 0 {
                let mut target = sent.clone();
                target.push(EOS);
                out.push(TrainingTriple { z: cache.vector(row).to_vec(), context: p.sentences[..s].concat(), target });
            }
            row += 1;
        }
    }
    Ok(out)
}

pub fn train_decoder(
    triples: &[TrainingTriple],
    vocab_size: usize,
    variant: DecoderVariant,
    cfg: &DecoderConfig,
) -> Result<(DecoderModel, LossLog)> {
    if triples.is_empty() {
        return Err(Error::Degenerate("no decoder training triples".into()));
    }
    let mut model = DecoderModel::new(cfg, vocab_size)?;
    let items: Vec<DecoderItem> = triples.iter().map(|t| t.item(variant, cfg.budget)).collect::<Result<_>>()?;
    if cfg.schedule.steps == 0 {
        return Ok((model, LossLog::default()));
    }
    let shell = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6465_6300);
    let p = cfg.transformer.dropout_p;
    let log = run_training(&mut model.params, items.len(), &cfg.schedule, &mut rng, |params, batch, rng| {
        let picked: Vec<DecoderItem> = batch.iter().map(|&i| items[i].clone()).collect();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut g = Graph::train(params, p, &mut drop_rng);
        let loss = shell.loss(&mut g, &picked)?;
        g.tape.backward(loss)?;
        Ok((g.tape.scalar(loss) as f64, g.param_grads(params)))
    })?;
    Ok((model, log))
}

/// Samples one sentence after `prompt`; excludes the prompt and the final
/// `<eos>`.
pub fn decode_sentence(model: &DecoderModel, prompt: &Prompt, params: &GenerationParams) -> Result<Vec<usize>> {
    Ok(decode_batch(model, std::slice::from_ref(prompt), params)?.remove(0))
}

/// Decodes many prompts together; item `i` uses seed `params.seed + i` and
/// matches what [`decode_sentence`] returns for it alone with that seed.
pub fn decode_batch(model: &DecoderModel, prompts: &[Prompt], params: &GenerationParams) -> Result<Vec<Vec<usize>>> {
    let max = model.net.config.max_positions;
    if let Some(p) = prompts.iter().find(|p| p.len() > max) {
        return Err(Error::Range(format!("prompt of {} exceeds {max} positions", p.len())));
    }
    // The final sampled token is never fed back, so it needs no position.
    let room: Vec<usize> = prompts.iter().map(|p| max - p.len() + 1).collect();
    let seeds: Vec<u64> = (0..prompts.len() as u64).map(|i| params.seed.wrapping_add(i)).collect();
    sample_batch(&room, params, &seeds, |active, out| {
        let ps: Vec<&Prompt> = active.iter().map(|&i| &prompts[i]).collect();
        let gs: Vec<&[usize]> = active.iter().map(|&i| out[i].as_slice()).collect();
        model.next_logits(&ps, &gs)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RealizeMode {
    Vanilla,
    Mixed,
}

pub fn realize(
    z: &[f32],
    prev: &[usize],
    decoder: &DecoderModel,
    params: &GenerationParams,
    mode: RealizeMode,
) -> Result<Vec<usize>> {
    let prompt = match mode {
        RealizeMode::Vanilla => build_vanilla_prompt(z),
        RealizeMode::Mixed => build_mixed_prompt(z, prev, decoder.config.budget)?,
    };
    decode_sentence(decoder, &prompt, params)
}

/// [`realize`] over many items; item `i` is seeded with `params.seed + i`.
pub fn realize_batch(items: &[(Vec<f32>, Vec<usize>)], decoder: &DecoderModel, params: &GenerationParams, mode: RealizeMode) -> Result<Vec<Vec<usize>>> {
    let prompts: Vec<Prompt> = items
        .iter()
        .map(|(z, prev)| match mode {
            RealizeMode::Vanilla => Ok(build_vanilla_prompt(z)),
            RealizeMode::Mixed => build_mixed_prompt(z, prev, decoder.config.budget),
        })
        .collect::<Result<_>>()?;
    decode_batch(decoder, &prompts, params)
}
