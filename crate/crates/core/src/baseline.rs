//! Token-level comparison systems: a causal LM over flattened paragraphs,
//! perplexity-based ending selection, and a blank-at-the-end infilling model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Paragraph, BLANK, EOS};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tape::{AttentionMask, Var};
use crate::train::{run_training, LossLog, Schedule};
use crate::transformer::{embed_packed, token_logits, Graph, TokenTransformer, TransformerConfig};
use crate::realization::{sample_batch, GenerationParams};

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub transformer: TransformerConfig,
    pub schedule: Schedule,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TokenLm {
    pub config: LmConfig,
    pub net: TokenTransformer,
    params: ParamSet<f32>,
}

impl TokenLm {
    pub fn new(config: &LmConfig, vocab_size: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let net = TokenTransformer::new(&mut params, "lm", &config.transformer, vocab_size, &mut rng)?;
        Ok(Self { config: config.clone(), net, params })
    }

    pub fn load(config: &LmConfig, vocab_size: usize, path: &Path) -> Result<Self> {
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

    pub fn max_positions(&self) -> usize {
        self.net.config.max_positions
    }

    /// Mean NLL over the positions flagged in `masks`, where position `t` of
    /// `seqs[i]` predicts token `t + 1`.
    pub fn loss<F: Real>(&self, g: &mut Graph<'_, F>, seqs: &[&[usize]], masks: &[Vec<bool>]) -> Result<Var> {
        let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
        let lp = self.net.log_probs(g, &inputs, &AttentionMask::Causal)?;
        let targets: Vec<usize> = seqs.iter().flat_map(|s| s[1..].iter().copied()).collect();
        let mask: Vec<bool> = masks.iter().flatten().copied().collect();
        g.tape.nll(lp, &targets, &mask)
    }

    /// Per-position log-probabilities of each sequence's own next tokens.
    fn token_log_probs(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<f32>>> {
        let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
        let mut g = Graph::eval(&self.params);
        let lp = self.net.log_probs(&mut g, &inputs, &AttentionMask::Causal)?;
        let v = g.tape.value(lp);
        let mut row = 0;
        Ok(seqs
            .iter()
            .map(|s| {
                let out = s[1..].iter().enumerate().map(|(j, &t)| v.row(row + j)[t]).collect();
                row += s.len() - 1;
                out
            })
            .collect())
    }

    /// Next-token logits after each sequence.
    pub fn next_logits(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::eval(&self.params);
        let (h0, segs) = embed_packed(&mut g, &self.net.emb, seqs)?;
        let (h, _) = self.net.hidden(&mut g, h0, &segs, &AttentionMask::Causal, None)?;
        let last: Vec<usize> = segs.iter().map(|s| s.start + s.len - 1).collect();
        let h = g.tape.gather(h, &last)?;
        let l = token_logits(&mut g, &self.net.head, h)?;
        let v = g.tape.value(l);
        Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
    }
}

/// `<eos> s1 <eos> s2 <eos> ... <eos>`.
pub fn flatten_sentences(sentences: &[Vec<usize>]) -> Vec<usize> {
    let mut out = vec![EOS];
    for s in sentences {
        out.extend_from_slice(s);
        out.push(EOS);
    }
    out
}

fn fit(mut seq: Vec<usize>, max_positions: usize) -> Vec<usize> {
    seq.truncate(max_positions + 1);
    seq
}

fn train_lm_on<I>(model: &mut TokenLm, items: &[I], cfg: &LmConfig, build: impl Fn(&I, &mut ChaCha8Rng) -> (Vec<usize>, Vec<bool>)) -> Result<LossLog> {
    if cfg.schedule.steps == 0 {
        return Ok(LossLog::default());
    }
    let shell = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c6d_0000);
    let p = cfg.transformer.dropout_p;
    run_training(&mut model.params, items.len(), &cfg.schedule, &mut rng, |params, batch, rng| {
        let built: Vec<(Vec<usize>, Vec<bool>)> = batch.iter().map(|&i| build(&items[i], rng)).collect();
        let seqs: Vec<&[usize]> = built.iter().map(|b| b.0.as_slice()).collect();
        let masks: Vec<Vec<bool>> = built.iter().map(|b| b.1.clone()).collect();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut g = Graph::train(params, p, &mut drop_rng);
        let loss = shell.loss(&mut g, &seqs, &masks)?;
        g.tape.backward(loss)?;
        Ok((g.tape.scalar(loss) as f64, g.param_grads(params)))
    })
}

/// Causal NLL training on every flattened paragraph.
pub fn train_token_lm(corpus: &[Paragraph], vocab_size: usize, cfg: &LmConfig) -> Result<(TokenLm, LossLog)> {
    if corpus.is_empty() {
        return Err(Error::Degenerate("empty corpus".into()));
    }
    let mut model = TokenLm::new(cfg, vocab_size)?;
    let max = model.max_positions();
    let seqs: Vec<Vec<usize>> = corpus.iter().map(|p| fit(flatten_sentences(&p.sentences), max)).collect();
    let log = train_lm_on(&mut model, &seqs, cfg, |s, _| (s.clone(), vec![true; s.len() - 1]))?;
    Ok((model, log))
}

/// Samples the sentence following `context`, which must end with `<eos>`.
pub fn generate_next_sentence(model: &TokenLm, context: &[usize], params: &GenerationParams) -> Result<Vec<usize>> {
    Ok(generate_batch(model, &[context.to_vec()], params)?.remove(0))
}

/// Item `i` uses seed `params.seed + i`.
pub fn generate_batch(model: &TokenLm, contexts: &[Vec<usize>], params: &GenerationParams) -> Result<Vec<Vec<usize>>> {
    let max = model.max_positions();
    for c in contexts {
        if c.last() != Some(&EOS) {
            return Err(Error::Contract("generation context must end with <eos>".into()));
        }
        if c.len() > max {
            return Err(Error::Range(format!("context of {} exceeds {max} positions", c.len())));
        }
    }
    let room: Vec<usize> = contexts.iter().map(|c| max - c.len() + 1).collect();
    let seeds: Vec<u64> = (0..contexts.len() as u64).map(|i| params.seed.wrapping_add(i)).collect();
    sample_batch(&room, params, &seeds, |active, out| {
        let seqs: Vec<Vec<usize>> = active.iter().map(|&i| [contexts[i].as_slice(), &out[i]].concat()).collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        model.next_logits(&refs)
    })
}

/// Scores each candidate by `exp(mean NLL)` of its tokens after `context`;
/// the lowest score wins, ties to the lowest index.
pub fn perplexity_select(model: &TokenLm, context: &[usize], candidates: &[Vec<usize>]) -> Result<(usize, Vec<f64>)> {
    if candidates.len() < 2 {
        return Err(Error::Contract(format!("{} candidates, at least 2 needed", candidates.len())));
    }
    if candidates.iter().any(Vec::is_empty) {
        return Err(Error::Degenerate("empty candidate".into()));
    }
    if context.is_empty() {
        return Err(Error::Degenerate("empty context".into()));
    }
    let seqs: Vec<Vec<usize>> = candidates.iter().map(|c| [context, c].concat()).collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let lps = model.token_log_probs(&refs)?;
    let scores: Vec<f64> = lps
        .iter()
        .zip(candidates)
        .map(|(lp, c)| {
            let tail = &lp[lp.len() - c.len()..];
            (-tail.iter().map(|&x| x as f64).sum::<f64>() / c.len() as f64).exp()
        })
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

// ---------------------------------------------------------------------------
// Infilling
// ---------------------------------------------------------------------------

/// `<eos> before... after... <blank>`: the blank moves to the end so a causal
/// model can condition on both sides.
pub fn infill_prompt(before: &[Vec<usize>], after: &[Vec<usize>]) -> Vec<usize> {
    let mut p = flatten_sentences(before);
    for s in after {
        p.extend_from_slice(s);
        p.push(EOS);
    }
    p.push(BLANK);
    p
}

/// Prompt, target and `<eos>`, with the loss on the target side only.
pub fn infill_sequence(sentences: &[Vec<usize>], blank: usize) -> (Vec<usize>, Vec<bool>) {
    let mut seq = infill_prompt(&sentences[..blank], &sentences[blank + 1..]);
    let first = seq.len() - 1;
    seq.extend_from_slice(&sentences[blank]);
    seq.push(EOS);
    let mask = (0..seq.len() - 1).map(|t| t >= first).collect();
    (seq, mask)
}

/// Trains on rearranged paragraphs with a fresh random blank each visit.
pub fn train_infill_lm(corpus: &[Paragraph], vocab_size: usize, cfg: &LmConfig) -> Result<(TokenLm, LossLog)> {
    if corpus.is_empty() {
        return Err(Error::Degenerate("empty corpus".into()));
    }
    let mut model = TokenLm::new(cfg, vocab_size)?;
    let max = model.max_positions();
    if let Some(p) = corpus.iter().find(|p| infill_sequence(&p.sentences, 0).0.len() > max + 1) {
        return Err(Error::Range(format!("paragraph {} does not fit in {max} positions", p.id)));
    }
    let log = train_lm_on(&mut model, corpus, cfg, |p, rng| infill_sequence(&p.sentences, rng.gen_range(0..p.len())))?;
    Ok((model, log))
}

/// Content for the blank between `before` and `after`.
pub fn infill_baseline(model: &TokenLm, before: &[Vec<usize>], after: &[Vec<usize>], params: &GenerationParams) -> Result<Vec<usize>> {
    let prompt = infill_prompt(before, after);
    let max = model.max_positions();
    if prompt.len() > max {
        return Err(Error::Range(format!("infill prompt of {} exceeds {max} positions", prompt.len())));
    }
    let seeds = [params.seed];
    Ok(sample_batch(&[max - prompt.len() + 1], params, &seeds, |_, out| {
        let seq = [prompt.as_slice(), &out[0]].concat();
        model.next_logits(&[&seq])
    })?
    .remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(steps: usize) -> LmConfig {
        LmConfig {
            transformer: TransformerConfig { d_model: 16, n_heads: 2, n_blocks: 1, d_ff: 32, max_positions: 32, dropout_p: 0.0 },
            schedule: Schedule { steps, batch_size: 4, lr: 1e-2, clip: None },
            seed: 5,
        }
    }

    fn uniform(v: usize) -> TokenLm {
        let mut m = TokenLm::new(&cfg(0), v).unwrap();
        let (w, b) = (m.net.head.w, m.net.head.b);
        *m.params_mut().get_mut(w) = Tensor::zeros(&[16, v]);
        *m.params_mut().get_mut(b) = Tensor::zeros(&[v]);
        m
    }

    #[test]
    fn flattening() {
        assert_eq!(flatten_sentences(&[vec![4, 5], vec![6]]), vec![EOS, 4, 5, EOS, 6, EOS]);
        let (s, m) = infill_sequence(&[vec![4], vec![5, 6], vec![7]], 1);
        assert_eq!(s, vec![EOS, 4, EOS, 7, EOS, BLANK, 5, 6, EOS]);
        assert_eq!(m, vec![false, false, false, false, false, true, true, true]);
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let m = uniform(11);
        for len in 1..6 {
            let (best, scores) = perplexity_select(&m, &[EOS, 4, EOS], &[vec![5; len], vec![6; len + 1]]).unwrap();
            assert_eq!(best, 0);
            for s in scores {
                assert!((s - 11.0).abs() < 1e-4, "{s}");
            }
        }
    }

    #[test]
    fn selection_errors() {
        let m = uniform(8);
        assert!(matches!(perplexity_select(&m, &[EOS], &[vec![4]]), Err(Error::Contract(_))));
        assert!(matches!(perplexity_select(&m, &[EOS], &[vec![4], vec![]]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn generation_contract() {
        let m = TokenLm::new(&cfg(0), 9).unwrap();
        assert!(matches!(generate_next_sentence(&m, &[4], &GenerationParams::default()), Err(Error::Contract(_))));
        let p = GenerationParams { k: 1, max_len: 5, seed: 0 };
        let a = generate_next_sentence(&m, &[EOS, 4, EOS], &p).unwrap();
        assert_eq!(a, generate_next_sentence(&m, &[EOS, 4, EOS], &GenerationParams { seed: 3, ..p }).unwrap());
        assert!(a.len() <= 5 && !a.contains(&EOS));
        assert!(matches!(generate_next_sentence(&m, &[EOS; 33], &GenerationParams::default()), Err(Error::Range(_))));
        assert!(matches!(train_token_lm(&[], 9, &cfg(1)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn infill_never_emits_blank() {
        let m = TokenLm::new(&cfg(0), 9).unwrap();
        for seed in 0..20 {
            let out = infill_baseline(&m, &[vec![4]], &[vec![6]], &GenerationParams { k: 9, max_len: 8, seed }).unwrap();
            assert!(!out.contains(&BLANK));
        }
    }
}
