//! BLEU, Distinct-n and selection accuracy, the story-cloze harness and the
//! top-k topic-drift sweep.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use crate::baseline::{flatten_sentences, generate_batch, perplexity_select, TokenLm};
use crate::corpus::ClozeItem;
use crate::encoder::{encode_batch, EncoderModel};
use crate::error::{Error, Result};
use crate::realization::{match_candidates, realize_batch, DecoderModel, GenerationParams, RealizeMode};
use crate::ssr::{predict_masked_batch, predict_next_batch, SsrModel};

pub const DEFAULT_K_GRID: [usize; 5] = [1, 5, 10, 20, 50];
pub const SWEEP_HEADER: &str = "generator,k,bleu1,bleu2,distinct1,distinct2";

fn ngrams<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU without smoothing: geometric mean of clipped i-gram
/// precisions for `i = 1..=n` times the brevity penalty. Orders for which the
/// candidate has no i-grams at all are left out of the mean.
pub fn bleu_n<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Contract(format!("BLEU order {n} outside 1..=4")));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for i in 1..=n.min(candidate.len()) {
        let cand = ngrams(candidate, i);
        let refs = ngrams(reference, i);
        let total = candidate.len() + 1 - i;
        let matched: usize = cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
        orders += 1;
    }
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).exp().min(1.0);
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Unique n-grams over total n-grams, pooled across all candidates.
pub fn distinct_n<T: Eq + Hash + Clone>(candidates: &[Vec<T>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("distinct order must be at least 1".into()));
    }
    let mut seen: HashMap<&[T], ()> = HashMap::new();
    let mut total = 0usize;
    for c in candidates {
        if c.len() >= n {
            for w in c.windows(n) {
                seen.insert(w, ());
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Degenerate(format!("no {n}-grams in the candidates")));
    }
    Ok(seen.len() as f64 / total as f64)
}

pub fn selection_accuracy(predicted: &[usize], correct: &[usize]) -> Result<f64> {
    if predicted.len() != correct.len() {
        return Err(Error::Contract(format!("{} predictions for {} answers", predicted.len(), correct.len())));
    }
    if predicted.is_empty() {
        return Err(Error::Degenerate("no items to score".into()));
    }
    let hits = predicted.iter().zip(correct).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Named metric values plus an echo of the settings that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub items: usize,
    pub echo: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("metric {name} is {value}")));
        }
        self.values.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    /// `key,value` lines: the echo, the item count, then the metrics.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        for (k, v) in &self.echo {
            let _ = writeln!(s, "{k},{v}");
        }
        let _ = writeln!(s, "items,{}", self.items);
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k},{v:.6}");
        }
        s
    }
}

/// Mean sentence BLEU-1..4 and pooled Distinct-1..4 of generations against
/// references. Distinct is reported as 0 when there are no n-grams.
pub fn generation_report(generated: &[Vec<String>], references: &[Vec<String>]) -> Result<MetricReport> {
    if generated.len() != references.len() {
        return Err(Error::Contract(format!("{} generations for {} references", generated.len(), references.len())));
    }
    if generated.is_empty() {
        return Err(Error::Degenerate("nothing to evaluate".into()));
    }
    let mut r = MetricReport { items: generated.len(), ..Default::default() };
    for n in 1..=4 {
        let mut total = 0.0;
        for (g, rf) in generated.iter().zip(references) {
            total += bleu_n(g, rf, n)?;
        }
        r.insert(&format!("B-{n}"), total / generated.len() as f64)?;
        r.insert(&format!("D-{n}"), distinct_or_zero(generated, n)?)?;
    }
    r.echo.insert("bleu".into(), "sentence-mean".into());
    Ok(r)
}

fn distinct_or_zero<T: Eq + Hash + Clone>(c: &[Vec<T>], n: usize) -> Result<f64> {
    match distinct_n(c, n) {
        Err(Error::Degenerate(_)) => Ok(0.0),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Cloze evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClozeMethod {
    SsrArMatch,
    SsrNonArMatch,
    PplBaseline,
}

impl ClozeMethod {
    pub fn name(self) -> &'static str {
        match self {
            ClozeMethod::SsrArMatch => "ssr_ar_match",
            ClozeMethod::SsrNonArMatch => "ssr_nonar_match",
            ClozeMethod::PplBaseline => "ppl_baseline",
        }
    }
}

/// Whatever trained models a cloze method needs.
#[derive(Clone, Copy, Default)]
pub struct ClozeModels<'a> {
    pub encoder: Option<&'a EncoderModel>,
    pub ssr_ar: Option<&'a SsrModel>,
    pub ssr_nonar: Option<&'a SsrModel>,
    pub lm: Option<&'a TokenLm>,
}

fn need<'a, T>(m: Option<&'a T>, what: &str) -> Result<&'a T> {
    m.ok_or_else(|| Error::Contract(format!("cloze method needs a {what}")))
}

const CHUNK: usize = 64;

/// The index of the candidate whose vector is closest to `pred`.
pub fn choose_by_vector(pred: &[f32], candidates: &[Vec<f32>]) -> Result<usize> {
    Ok(match_candidates(pred, candidates)?[0].0)
}

/// Chosen candidate per item.
pub fn cloze_predictions(method: ClozeMethod, models: ClozeModels<'_>, items: &[ClozeItem]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(CHUNK) {
        match method {
            ClozeMethod::PplBaseline => {
                let lm = need(models.lm, "token language model")?;
                for it in chunk {
                    out.push(perplexity_select(lm, &flatten_sentences(&it.context), &it.candidates)?.0);
                }
            }
            ClozeMethod::SsrArMatch | ClozeMethod::SsrNonArMatch => {
                let enc = need(models.encoder, "sentence encoder")?;
                let sents: Vec<&[usize]> = chunk
                    .iter()
                    .flat_map(|it| it.context.iter().chain(it.candidates.iter()).map(Vec::as_slice))
                    .collect();
                let mut vecs = encode_batch(enc, &sents)?.into_iter();
                let mut contexts = Vec::with_capacity(chunk.len());
                let mut cands = Vec::with_capacity(chunk.len());
                for it in chunk {
                    contexts.push(vecs.by_ref().take(it.context.len()).collect::<Vec<_>>());
                    cands.push(vecs.by_ref().take(2).collect::<Vec<_>>());
                }
                let preds = if method == ClozeMethod::SsrArMatch {
                    predict_next_batch(need(models.ssr_ar, "autoregressive SSR model")?, &contexts)?
                } else {
                    let d = enc.dim();
                    let masked: Vec<(Vec<Vec<f32>>, usize)> = contexts
                        .into_iter()
                        .map(|mut c| {
                            let slot = c.len();
                            c.push(vec![0.0; d]);
                            (c, slot)
                        })
                        .collect();
                    predict_masked_batch(need(models.ssr_nonar, "masked SSR model")?, &masked)?
                };
                for (p, c) in preds.iter().zip(&cands) {
                    out.push(choose_by_vector(p, c)?);
                }
            }
        }
    }
    Ok(out)
}

pub fn run_cloze_eval(method: ClozeMethod, models: ClozeModels<'_>, items: &[ClozeItem]) -> Result<MetricReport> {
    let pred = cloze_predictions(method, models, items)?;
    let gold: Vec<usize> = items.iter().map(|i| i.correct).collect();
    let mut r = MetricReport { items: items.len(), ..Default::default() };
    r.insert("accuracy", selection_accuracy(&pred, &gold)?)?;
    r.echo.insert("method".into(), method.name().into());
    Ok(r)
}

// ---------------------------------------------------------------------------
// Ending generators and the top-k sweep
// ---------------------------------------------------------------------------

/// Produces one next sentence per context; item `i` is seeded with
/// `params.seed + i`.
pub trait EndingGenerator {
    fn name(&self) -> &str;
    fn generate(&self, contexts: &[Vec<Vec<usize>>], params: &GenerationParams) -> Result<Vec<Vec<usize>>>;
}

/// Predicts the next vector with an autoregressive SSR model and realizes it
/// with a decoder.
pub struct SsrGenerator<'a> {
    pub name: String,
    pub encoder: &'a EncoderModel,
    pub ssr: &'a SsrModel,
    pub decoder: &'a DecoderModel,
    pub mode: RealizeMode,
}

impl SsrGenerator<'_> {
    pub fn predict(&self, contexts: &[Vec<Vec<usize>>]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(contexts.len());
        for chunk in contexts.chunks(CHUNK) {
            let sents: Vec<&[usize]> = chunk.iter().flatten().map(Vec::as_slice).collect();
            let mut vecs = encode_batch(self.encoder, &sents)?.into_iter();
            let zs: Vec<Vec<Vec<f32>>> = chunk.iter().map(|c| vecs.by_ref().take(c.len()).collect()).collect();
            out.extend(predict_next_batch(self.ssr, &zs)?);
        }
        Ok(out)
    }
}

impl EndingGenerator for SsrGenerator<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, contexts: &[Vec<Vec<usize>>], params: &GenerationParams) -> Result<Vec<Vec<usize>>> {
        let preds = self.predict(contexts)?;
        let items: Vec<(Vec<f32>, Vec<usize>)> = preds.into_iter().zip(contexts).map(|(z, c)| (z, c.concat())).collect();
        realize_batch(&items, self.decoder, params, self.mode)
    }
}

pub struct BaselineGenerator<'a> {
    pub name: String,
    pub lm: &'a TokenLm,
}

impl EndingGenerator for BaselineGenerator<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, contexts: &[Vec<Vec<usize>>], params: &GenerationParams) -> Result<Vec<Vec<usize>>> {
        let ctx: Vec<Vec<usize>> = contexts.iter().map(|c| flatten_sentences(c)).collect();
        generate_batch(self.lm, &ctx, params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub generator: String,
    pub k: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub distinct1: f64,
    pub distinct2: f64,
}

/// One row per (generator, k), every cell using the same contexts and seed.
pub fn topic_drift_sweep(
    generators: &[&dyn EndingGenerator],
    contexts: &[Vec<Vec<usize>>],
    ks: &[usize],
    references: &[Vec<usize>],
    seed: u64,
    max_len: usize,
) -> Result<Vec<SweepRow>> {
    if contexts.len() != references.len() {
        return Err(Error::Contract(format!("{} contexts for {} references", contexts.len(), references.len())));
    }
    if contexts.is_empty() {
        return Err(Error::Degenerate("no sweep contexts".into()));
    }
    let mut rows = Vec::with_capacity(generators.len() * ks.len());
    for g in generators {
        for &k in ks {
            let out = g.generate(contexts, &GenerationParams { k, max_len, seed })?;
            let n = out.len() as f64;
            let mut b1 = 0.0;
            let mut b2 = 0.0;
            for (o, r) in out.iter().zip(references) {
                b1 += bleu_n(o, r, 1)?;
                b2 += bleu_n(o, r, 2)?;
            }
            rows.push(SweepRow {
                generator: g.name().to_string(),
                k,
                bleu1: b1 / n,
                bleu2: b2 / n,
                distinct1: distinct_or_zero(&out, 1)?,
                distinct2: distinct_or_zero(&out, 2)?,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6},{:.6}", r.generator, r.k, r.bleu1, r.bleu2, r.distinct1, r.distinct2);
    }
    s
}

/// `(B1(k_lo) - B1(k_hi)) / B1(k_lo)` for one generator's rows.
pub fn relative_bleu1_drop(rows: &[SweepRow], generator: &str, k_lo: usize, k_hi: usize) -> Option<f64> {
    let at = |k| rows.iter().find(|r| r.generator == generator && r.k == k).map(|r| r.bleu1);
    let (lo, hi) = (at(k_lo)?, at(k_hi)?);
    (lo > 0.0).then(|| (lo - hi) / lo)
}

/// Parses a comma-separated list of positive integers such as `1,5,10`.
pub fn parse_grid(s: &str) -> Result<Vec<usize>> {
    let grid: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().ok().filter(|&k| k > 0))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Argument(format!("malformed grid {s:?}; expected positive integers like 1,5,10")))?;
    if grid.is_empty() {
        return Err(Error::Argument("empty grid".into()));
    }
    Ok(grid)
}
