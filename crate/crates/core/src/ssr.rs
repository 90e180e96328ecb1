//! Sentence-level language models over frozen sentence vectors.
//!
//! The input of the first block is `Z + P^s` (no word embeddings). Outputs
//! pass through a linear head `g'` with no softmax, and are trained by
//! regression on cosine similarity, optionally contrasted against sentences
//! of other paragraphs.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{mask_count, VectorCache};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::real::Real;
use crate::tape::{AttentionMask, Segment, Var};
use crate::tensor::{Tensor, COSINE_EPS};
use crate::train::{run_training, LossLog, Schedule};
use crate::transformer::{positions, stack_forward, BlockWeights, Graph, Linear, TransformerConfig, EMBED_STD};

pub const DEFAULT_MASK_RATE: f64 = 0.15;
pub const DEFAULT_NEGATIVES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsrMode {
    Ar,
    NonAr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsrLoss {
    Cosine,
    Contrastive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsrConfig {
    /// `d_model` must equal the encoder dimension.
    pub transformer: TransformerConfig,
    pub mode: SsrMode,
    pub max_sentences: usize,
    pub mask_rate: f64,
    pub n_negatives: usize,
    pub loss: SsrLoss,
    pub schedule: Schedule,
    pub seed: u64,
}

impl SsrConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask rate {} outside (0, 1)", self.mask_rate)));
        }
        if self.n_negatives == 0 {
            return Err(Error::Config("n_negatives must be at least 1".into()));
        }
        if self.max_sentences < 2 {
            return Err(Error::Config("max_sentences must be at least 2".into()));
        }
        Ok(())
    }
}

/// Parameter ids of an SSR network.
#[derive(Clone, Debug, PartialEq)]
pub struct SsrLayout {
    pub positions: ParamId,
    pub blocks: Vec<BlockWeights>,
    pub head: Linear,
    pub d: usize,
    pub max_sentences: usize,
}

impl SsrLayout {
    pub fn new<F: Real, R: Rng>(params: &mut ParamSet<F>, cfg: &SsrConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.transformer.d_model;
        let positions = params.add_normal("ssr.positions", &[cfg.max_sentences, d], EMBED_STD, rng);
        let blocks =
            (0..cfg.transformer.n_blocks).map(|i| BlockWeights::new(params, &format!("ssr.block{i}"), &cfg.transformer, rng)).collect();
        let head = Linear::new(params, "ssr.head", d, d, 1.0 / (d as f64).sqrt(), rng);
        Ok(Self { positions, blocks, head, d, max_sentences: cfg.max_sentences })
    }

    /// `H^0 = Z + P^s`, positions restarting in every segment.
    pub fn inputs<F: Real>(&self, g: &mut Graph<'_, F>, z: Var, segments: &[Segment]) -> Result<Var> {
        if let Some(s) = segments.iter().find(|s| s.len > self.max_sentences) {
            return Err(Error::Range(format!("{} sentences exceed max_sentences {}", s.len, self.max_sentences)));
        }
        let p = g.tape.gather(g.p(self.positions), &positions(segments))?;
        g.tape.add(z, p)
    }

    /// Predicted vectors `g'(h^s_t)` for every row of `z`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, z: Var, segments: &[Segment], mode: SsrMode) -> Result<Var> {
        let mask = match mode {
            SsrMode::Ar => AttentionMask::Causal,
            SsrMode::NonAr => AttentionMask::Bidirectional,
        };
        let h0 = self.inputs(g, z, segments)?;
        let h0 = g.dropout(h0)?;
        let (h, _) = stack_forward(g, &self.blocks, h0, segments, &mask, None)?;
        self.head.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct SsrModel {
    pub config: SsrConfig,
    pub layout: SsrLayout,
    params: ParamSet<f32>,
}

impl SsrModel {
    pub fn new(config: &SsrConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let layout = SsrLayout::new(&mut params, config, &mut rng)?;
        Ok(Self { config: config.clone(), layout, params })
    }

    pub fn load(config: &SsrConfig, path: &Path) -> Result<Self> {
        let mut m = Self::new(config)?;
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

    pub fn dim(&self) -> usize {
        self.layout.d
    }
}

fn rows_tensor<F: Real>(rows: &[Vec<f32>], d: usize) -> Result<Tensor<F>> {
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::dim(format!("vector of length {} where {d} expected", r.len())));
    }
    Tensor::new(&[rows.len(), d], rows.iter().flatten().map(|&x| F::of(x as f64)).collect())
}

fn to_rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// `Z + P^s` as a plain tensor.
pub fn ssr_inputs(model: &SsrModel, z: &[Vec<f32>]) -> Result<Tensor<f32>> {
    let mut g = Graph::eval(&model.params);
    let zv = g.tape.constant(rows_tensor(z, model.dim())?);
    let h = model.layout.inputs(&mut g, zv, &[Segment::new(0, z.len())])?;
    Ok(g.tape.value(h).clone())
}

// ---------------------------------------------------------------------------
// Masking and targets
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub m: usize,
    /// Sorted, distinct, all `< m`.
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn single(m: usize, i: usize) -> Result<Self> {
        if i >= m {
            return Err(Error::Range(format!("mask index {i} out of range for {m} sentences")));
        }
        Ok(Self { m, masked: vec![i] })
    }

    /// Copy of `z` with the masked slots set to zero vectors.
    pub fn apply(&self, z: &[Vec<f32>]) -> Vec<Vec<f32>> {
        let mut out = z.to_vec();
        for &i in &self.masked {
            out[i].iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }
}

/// `max(1, round(rate·m))` slots chosen uniformly without replacement.
pub fn make_mask_plan<R: Rng>(m: usize, mask_rate: f64, rng: &mut R) -> MaskPlan {
    let mut masked = sample(rng, m, mask_count(m, mask_rate)).into_vec();
    masked.sort_unstable();
    MaskPlan { m, masked }
}

/// Left shift for autoregressive training: inputs `Z[0..m-1]`, targets
/// `Z[1..m]`, supervised positions `0..m-1`.
pub fn ssr_ar_targets(z: &[Vec<f32>]) -> Result<(&[Vec<f32>], &[Vec<f32>], Vec<usize>)> {
    if z.len() < 2 {
        return Err(Error::Degenerate(format!("{} sentences cannot form an autoregressive target", z.len())));
    }
    let m = z.len();
    Ok((&z[..m - 1], &z[1..], (0..m - 1).collect()))
}

// ---------------------------------------------------------------------------
// Negatives
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSet {
    /// Row indices into the cache.
    pub rows: Vec<usize>,
    pub paragraphs: Vec<u32>,
}

/// `n` sentences drawn uniformly without replacement from paragraphs other
/// than `anchor`.
pub fn sample_negatives<R: Rng>(cache: &VectorCache, anchor: u32, n: usize, rng: &mut R) -> Result<NegativeSet> {
    let keys: Vec<u32> = (0..cache.len()).map(|i| cache.key(i).0).collect();
    let lo = keys.partition_point(|&p| p < anchor);
    let hi = keys.partition_point(|&p| p <= anchor);
    let pool = cache.len() - (hi - lo);
    if pool < n {
        return Err(Error::Corpus(format!("only {pool} sentences outside paragraph {anchor}, {n} negatives requested")));
    }
    let rows: Vec<usize> = sample(rng, pool, n).into_iter().map(|i| if i < lo { i } else { i + (hi - lo) }).collect();
    let paragraphs = rows.iter().map(|&r| keys[r]).collect();
    Ok(NegativeSet { rows, paragraphs })
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// One training or evaluation batch of packed paragraphs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SsrBatch {
    /// Packed model inputs, masked slots already zeroed.
    pub inputs: Vec<Vec<f32>>,
    pub segments: Vec<Segment>,
    /// Packed rows whose predictions are supervised.
    pub positions: Vec<usize>,
    /// One target per supervised position.
    pub targets: Vec<Vec<f32>>,
    /// One negative set per supervised position (empty for the cosine loss).
    pub negatives: Vec<Vec<Vec<f32>>>,
}

/// `mean_t (1 - cos(ẑ_t, z_t))`, range `[0, 2]`.
pub fn cosine_loss_node<F: Real>(g: &mut Graph<'_, F>, pred: Var, targets: Var, positions: &[usize]) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::Degenerate("no supervised positions".into()));
    }
    let pairs: Vec<(usize, usize)> = positions.iter().enumerate().map(|(j, &t)| (t, j)).collect();
    let cos = g.tape.cosine_pairs(pred, targets, &pairs, F::of(COSINE_EPS))?;
    let w = F::of(-1.0 / positions.len() as f64);
    let s = g.tape.weighted_sum(cos, vec![w; positions.len()])?;
    Ok(g.tape.offset(s, F::one()))
}

/// `mean_t (2 - cos(ẑ_t, z_t) + mean_i cos(ẑ_t, z_i))`, range `[0, 4]`.
///
/// `others` stacks the targets followed by every negative set in position
/// order, `n` rows per position.
pub fn contrastive_loss_node<F: Real>(
    g: &mut Graph<'_, F>,
    pred: Var,
    others: Var,
    positions: &[usize],
    n: usize,
) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::Degenerate("no supervised positions".into()));
    }
    if n == 0 {
        return Err(Error::Contract("contrastive loss needs at least one negative per position".into()));
    }
    let p = positions.len();
    let mut pairs: Vec<(usize, usize)> = positions.iter().enumerate().map(|(j, &t)| (t, j)).collect();
    for (j, &t) in positions.iter().enumerate() {
        pairs.extend((0..n).map(|i| (t, p + j * n + i)));
    }
    let cos = g.tape.cosine_pairs(pred, others, &pairs, F::of(COSINE_EPS))?;
    let mut w = vec![F::of(-1.0 / p as f64); p];
    w.extend(std::iter::repeat(F::of(1.0 / (n * p) as f64)).take(n * p));
    let s = g.tape.weighted_sum(cos, w)?;
    Ok(g.tape.offset(s, F::of(2.0)))
}

/// Builds the loss of `batch` on `g`.
pub fn batch_loss<F: Real>(layout: &SsrLayout, g: &mut Graph<'_, F>, batch: &SsrBatch, mode: SsrMode, loss: SsrLoss) -> Result<Var> {
    let z = g.tape.constant(rows_tensor(&batch.inputs, layout.d)?);
    let pred = layout.forward(g, z, &batch.segments, mode)?;
    match loss {
        SsrLoss::Cosine => {
            let t = g.tape.constant(rows_tensor(&batch.targets, layout.d)?);
            cosine_loss_node(g, pred, t, &batch.positions)
        }
        SsrLoss::Contrastive => {
            if batch.negatives.len() != batch.positions.len() {
                return Err(Error::Contract("each supervised position needs its own negative set".into()));
            }
            let n = batch.negatives.first().map_or(0, Vec::len);
            if batch.negatives.iter().any(|s| s.len() != n) {
                return Err(Error::Contract("negative sets differ in size".into()));
            }
            let mut rows = batch.targets.clone();
            rows.extend(batch.negatives.iter().flatten().cloned());
            let others = g.tape.constant(rows_tensor(&rows, layout.d)?);
            contrastive_loss_node(g, pred, others, &batch.positions, n)
        }
    }
}

fn check_aligned(pred: &[Vec<f32>], target: &[Vec<f32>]) -> Result<usize> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    Ok(pred.first().map_or(0, Vec::len))
}

/// Cosine regression loss of aligned sequences at `positions`.
pub fn ssr_cosine_loss(pred: &[Vec<f32>], target: &[Vec<f32>], positions: &[usize]) -> Result<f64> {
    let d = check_aligned(pred, target)?;
    let params = ParamSet::<f64>::new();
    let mut g = Graph::eval(&params);
    let p = g.tape.constant(rows_tensor(pred, d)?);
    let sel: Vec<Vec<f32>> = positions.iter().map(|&t| target.get(t).cloned().ok_or_else(|| Error::Range(format!("position {t}")))).collect::<Result<_>>()?;
    let t = g.tape.constant(rows_tensor(&sel, d)?);
    let l = cosine_loss_node(&mut g, p, t, positions)?;
    Ok(g.tape.scalar(l))
}

/// Contrastive loss with one negative set per supervised position.
pub fn ssr_contrastive_loss(pred: &[Vec<f32>], target: &[Vec<f32>], negatives: &[Vec<Vec<f32>>], positions: &[usize]) -> Result<f64> {
    let d = check_aligned(pred, target)?;
    if negatives.len() != positions.len() {
        return Err(Error::Contract("each supervised position needs its own negative set".into()));
    }
    let n = negatives.first().map_or(0, Vec::len);
    if n == 0 || negatives.iter().any(|s| s.len() != n) {
        return Err(Error::Contract("negative sets must be nonempty and equal in size".into()));
    }
    let params = ParamSet::<f64>::new();
    let mut g = Graph::eval(&params);
    let p = g.tape.constant(rows_tensor(pred, d)?);
    let mut rows: Vec<Vec<f32>> =
        positions.iter().map(|&t| target.get(t).cloned().ok_or_else(|| Error::Range(format!("position {t}")))).collect::<Result<_>>()?;
    rows.extend(negatives.iter().flatten().cloned());
    let o = g.tape.constant(rows_tensor(&rows, d)?);
    let l = contrastive_loss_node(&mut g, p, o, positions, n)?;
    Ok(g.tape.scalar(l))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

fn paragraph_vectors(cache: &VectorCache, r: &std::ops::Range<usize>) -> Vec<Vec<f32>> {
    r.clone().map(|i| cache.vector(i).to_vec()).collect()
}

/// Assembles the batch for the given paragraph row ranges of `cache`,
/// drawing mask plans and negatives from `rng`.
pub fn make_batch<R: Rng>(
    cache: &VectorCache,
    ranges: &[std::ops::Range<usize>],
    cfg: &SsrConfig,
    rng: &mut R,
) -> Result<SsrBatch> {
    let mut b = SsrBatch::default();
    for r in ranges {
        let z = paragraph_vectors(cache, r);
        let anchor = cache.key(r.start).0;
        let start = b.inputs.len();
        let supervised: Vec<usize> = match cfg.mode {
            SsrMode::Ar => {
                let (inputs, targets, pos) = ssr_ar_targets(&z)?;
                b.inputs.extend_from_slice(inputs);
                b.targets.extend_from_slice(targets);
                pos
            }
            SsrMode::NonAr => {
                let plan = make_mask_plan(z.len(), cfg.mask_rate, rng);
                b.inputs.extend(plan.apply(&z));
                b.targets.extend(plan.masked.iter().map(|&i| z[i].clone()));
                plan.masked
            }
        };
        b.segments.push(Segment::new(start, b.inputs.len() - start));
        for &t in &supervised {
            b.positions.push(start + t);
            if cfg.loss == SsrLoss::Contrastive {
                let neg = sample_negatives(cache, anchor, cfg.n_negatives, rng)?;
                b.negatives.push(neg.rows.iter().map(|&i| cache.vector(i).to_vec()).collect());
            }
        }
    }
    Ok(b)
}

/// Trains a fresh model on every paragraph of `cache`.
pub fn train_ssr(cache: &VectorCache, cfg: &SsrConfig) -> Result<(SsrModel, LossLog)> {
    let mut model = SsrModel::new(cfg)?;
    if cache.dim() != cfg.transformer.d_model {
        return Err(Error::Config(format!(
            "vector cache dimension {} does not match model dimension {}",
            cache.dim(),
            cfg.transformer.d_model
        )));
    }
    let min_len = if cfg.mode == SsrMode::Ar { 2 } else { 1 };
    let ranges: Vec<_> = cache
        .paragraphs()
        .into_iter()
        .filter(|r| r.len() >= min_len)
        .map(|r| r.start..r.start + r.len().min(cfg.max_sentences + (cfg.mode == SsrMode::Ar) as usize))
        .collect();
    if cfg.schedule.steps == 0 {
        return Ok((model, LossLog::default()));
    }
    let layout = model.layout.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7373_7200);
    let p = cfg.transformer.dropout_p;
    let log = run_training(&mut model.params, ranges.len(), &cfg.schedule, &mut rng, |params, items, rng| {
        let picked: Vec<_> = items.iter().map(|&i| ranges[i].clone()).collect();
        let batch = make_batch(cache, &picked, cfg, rng)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut g = Graph::train(params, p, &mut drop_rng);
        let loss = batch_loss(&layout, &mut g, &batch, cfg.mode, cfg.loss)?;
        g.tape.backward(loss)?;
        Ok((g.tape.scalar(loss) as f64, g.param_grads(params)))
    })?;
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Predictions `ẑ_t` at every position. NonAR mode requires a mask plan;
/// its slots are zeroed before the input sum.
pub fn predict_vectors(model: &SsrModel, z: &[Vec<f32>], plan: Option<&MaskPlan>) -> Result<Vec<Vec<f32>>> {
    let inputs = match (model.config.mode, plan) {
        (SsrMode::Ar, _) => z.to_vec(),
        (SsrMode::NonAr, Some(p)) => {
            if p.m != z.len() {
                return Err(Error::dim(format!("mask plan for {} sentences applied to {}", p.m, z.len())));
            }
            p.apply(z)
        }
        (SsrMode::NonAr, None) => return Err(Error::Contract("masked prediction needs a mask plan".into())),
    };
    let out = predict_packed(model, &[inputs])?;
    Ok(out.into_iter().next().unwrap_or_default())
}

/// Runs several independent sequences in one packed pass; each result is
/// bit-identical to running its sequence alone.
pub fn predict_packed(model: &SsrModel, seqs: &[Vec<Vec<f32>>]) -> Result<Vec<Vec<Vec<f32>>>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let segments = Segment::pack(seqs.iter().map(Vec::len));
    let flat: Vec<Vec<f32>> = seqs.iter().flatten().cloned().collect();
    let mut g = Graph::eval(&model.params);
    let z = g.tape.constant(rows_tensor(&flat, model.dim())?);
    let pred = model.layout.forward(&mut g, z, &segments, model.config.mode)?;
    let rows = to_rows(g.tape.value(pred));
    Ok(segments.iter().map(|s| rows[s.start..s.start + s.len].to_vec()).collect())
}

/// The predicted vector of the sentence following `context`.
pub fn predict_next_vector(model: &SsrModel, context: &[Vec<f32>]) -> Result<Vec<f32>> {
    Ok(predict_next_batch(model, &[context.to_vec()])?.remove(0))
}

pub fn predict_next_batch(model: &SsrModel, contexts: &[Vec<Vec<f32>>]) -> Result<Vec<Vec<f32>>> {
    if model.config.mode != SsrMode::Ar {
        return Err(Error::Contract("next-vector prediction needs an autoregressive model".into()));
    }
    for c in contexts {
        if c.is_empty() {
            return Err(Error::Degenerate("empty context".into()));
        }
        if c.len() > model.config.max_sentences - 1 {
            return Err(Error::Range(format!("context of {} exceeds {} sentences", c.len(), model.config.max_sentences - 1)));
        }
    }
    let out = predict_packed(model, contexts)?;
    Ok(out.into_iter().map(|mut s| s.pop().expect("nonempty")).collect())
}

/// The prediction at slot `i` after zeroing it.
pub fn predict_masked_vector(model: &SsrModel, z: &[Vec<f32>], i: usize) -> Result<Vec<f32>> {
    Ok(predict_masked_batch(model, &[(z.to_vec(), i)])?.remove(0))
}

pub fn predict_masked_batch(model: &SsrModel, items: &[(Vec<Vec<f32>>, usize)]) -> Result<Vec<Vec<f32>>> {
    if model.config.mode != SsrMode::NonAr {
        return Err(Error::Contract("masked-slot prediction needs a masked model".into()));
    }
    let mut seqs = Vec::with_capacity(items.len());
    for (z, i) in items {
        seqs.push(MaskPlan::single(z.len(), *i)?.apply(z));
    }
    let out = predict_packed(model, &seqs)?;
    Ok(out.into_iter().zip(items).map(|(s, (_, i))| s[*i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: SsrMode, loss: SsrLoss) -> SsrConfig {
        SsrConfig {
            transformer: TransformerConfig { d_model: 8, n_heads: 2, n_blocks: 2, d_ff: 16, max_positions: 16, dropout_p: 0.0 },
            mode,
            max_sentences: 8,
            mask_rate: 0.15,
            n_negatives: 2,
            loss,
            schedule: Schedule { steps: 0, batch_size: 4, lr: 1e-3, clip: None },
            seed: 1,
        }
    }

    fn vecs(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f32>> {
        (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn config_invariants() {
        let mut c = tiny(SsrMode::Ar, SsrLoss::Cosine);
        assert!(c.validate().is_ok());
        c.mask_rate = 1.0;
        assert!(c.validate().is_err());
        c.mask_rate = 0.15;
        c.n_negatives = 0;
        assert!(c.validate().is_err());
        c.n_negatives = 1;
        c.max_sentences = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn inputs_with_zero_positions_equal_z() {
        let mut m = SsrModel::new(&tiny(SsrMode::Ar, SsrLoss::Cosine)).unwrap();
        let pos = m.layout.positions;
        *m.params_mut().get_mut(pos) = Tensor::zeros(&[8, 8]);
        let z = vecs(&mut ChaCha8Rng::seed_from_u64(0), 3, 8);
        let h = ssr_inputs(&m, &z).unwrap();
        assert_eq!(h.data(), z.concat().as_slice());
        assert_eq!(ssr_inputs(&m, &z[..1]).unwrap().shape(), &[1, 8]);
        let too_long = vecs(&mut ChaCha8Rng::seed_from_u64(0), 9, 8);
        assert!(matches!(ssr_inputs(&m, &too_long), Err(Error::Range(_))));
    }

    #[test]
    fn masked_slot_input_is_position_row() {
        let m = SsrModel::new(&tiny(SsrMode::NonAr, SsrLoss::Cosine)).unwrap();
        let z = vecs(&mut ChaCha8Rng::seed_from_u64(1), 4, 8);
        let plan = MaskPlan::single(4, 2).unwrap();
        let h = ssr_inputs(&m, &plan.apply(&z)).unwrap();
        assert_eq!(h.row(2), m.params().get(m.layout.positions).row(2));
    }

    #[test]
    fn ar_targets_shift() {
        let z = vecs(&mut ChaCha8Rng::seed_from_u64(2), 5, 3);
        let (i, t, p) = ssr_ar_targets(&z).unwrap();
        assert_eq!(p, vec![0, 1, 2, 3]);
        for k in 0..4 {
            assert_eq!(t[k], z[k + 1]);
        }
        assert_eq!(i.len(), 4);
        assert_eq!(ssr_ar_targets(&z[..2]).unwrap().2.len(), 1);
        assert!(matches!(ssr_ar_targets(&z[..1]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn mask_plan_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(make_mask_plan(20, 0.15, &mut rng).masked.len(), 3);
        assert_eq!(make_mask_plan(2, 0.15, &mut rng).masked.len(), 1);
        let a = make_mask_plan(30, 0.15, &mut ChaCha8Rng::seed_from_u64(9));
        let b = make_mask_plan(30, 0.15, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn loss_corners() {
        let z = vec![vec![1.0f32, 0.0], vec![0.0, 2.0]];
        let orth = vec![vec![0.0f32, 3.0], vec![-1.0, 0.0]];
        let neg: Vec<Vec<f32>> = z.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        let pos = [0, 1];
        assert!(ssr_cosine_loss(&z, &z, &pos).unwrap().abs() < 1e-6);
        assert!((ssr_cosine_loss(&orth, &z, &pos).unwrap() - 1.0).abs() < 1e-6);
        assert!((ssr_cosine_loss(&neg, &z, &pos).unwrap() - 2.0).abs() < 1e-6);
        assert!(matches!(ssr_cosine_loss(&z, &z, &[]), Err(Error::Degenerate(_))));

        let n_orth = vec![vec![orth[0].clone(); 2], vec![orth[1].clone(); 2]];
        assert!((ssr_contrastive_loss(&z, &z, &n_orth, &pos).unwrap() - 1.0).abs() < 1e-6);
        let n_same: Vec<Vec<Vec<f32>>> = z.iter().map(|v| vec![v.clone(); 3]).collect();
        assert!((ssr_contrastive_loss(&z, &z, &n_same, &pos).unwrap() - 2.0).abs() < 1e-6);
        let n_pred: Vec<Vec<Vec<f32>>> = neg.iter().map(|v| vec![v.clone(); 3]).collect();
        assert!((ssr_contrastive_loss(&neg, &z, &n_pred, &pos).unwrap() - 4.0).abs() < 1e-6);
        assert!(matches!(ssr_contrastive_loss(&z, &z, &[vec![], vec![]], &pos), Err(Error::Contract(_))));
    }

    fn cache_of(lens: &[usize], d: usize) -> VectorCache {
        let mut c = VectorCache::new(d);
        let mut k = 0.0;
        for (p, &n) in lens.iter().enumerate() {
            for s in 0..n {
                k += 1.0;
                c.push(p as u32, s as u32, &vec![k; d]).unwrap();
            }
        }
        c
    }

    #[test]
    fn negatives_exclude_anchor() {
        let c = cache_of(&[3, 2], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = sample_negatives(&c, 0, 2, &mut rng).unwrap();
        s.rows.sort();
        assert_eq!(s.rows, vec![3, 4]);
        assert!(matches!(sample_negatives(&c, 0, 3, &mut rng), Err(Error::Corpus(_))));

        let c = cache_of(&[5, 4, 6, 3, 5], 2);
        for _ in 0..10_000 {
            let s = sample_negatives(&c, 2, 4, &mut rng).unwrap();
            assert!(s.paragraphs.iter().all(|&p| p != 2));
        }
        let a = sample_negatives(&c, 1, 5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_negatives(&c, 1, 5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ar_prediction_is_causal() {
        let m = SsrModel::new(&tiny(SsrMode::Ar, SsrLoss::Cosine)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = vecs(&mut rng, 3, 8);
        let a = predict_vectors(&m, &z, None).unwrap();
        let mut z2 = z.clone();
        z2[1] = vecs(&mut rng, 1, 8).remove(0);
        z2[2] = vecs(&mut rng, 1, 8).remove(0);
        let b = predict_vectors(&m, &z2, None).unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
        let next = predict_next_vector(&m, &z[..2]).unwrap();
        assert_eq!(next, a[1]);
        assert!(matches!(predict_next_vector(&m, &[]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn nonar_prediction_ignores_masked_original() {
        let m = SsrModel::new(&tiny(SsrMode::NonAr, SsrLoss::Cosine)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = vecs(&mut rng, 4, 8);
        let mut z2 = z.clone();
        z2[1] = vecs(&mut rng, 1, 8).remove(0);
        assert_eq!(predict_masked_vector(&m, &z, 1).unwrap(), predict_masked_vector(&m, &z2, 1).unwrap());
        let mut z3 = z.clone();
        z3[3][0] += 0.5;
        assert_ne!(predict_masked_vector(&m, &z, 1).unwrap(), predict_masked_vector(&m, &z3, 1).unwrap());
        assert!(matches!(predict_vectors(&m, &z, None), Err(Error::Contract(_))));
        assert!(matches!(predict_masked_vector(&m, &z, 4), Err(Error::Range(_))));
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut m = SsrModel::new(&tiny(SsrMode::Ar, SsrLoss::Cosine)).unwrap();
        let (w, b) = (m.layout.head.w, m.layout.head.b);
        *m.params_mut().get_mut(w) = Tensor::zeros(&[8, 8]);
        *m.params_mut().get_mut(b) = Tensor::zeros(&[8]);
        let z = vecs(&mut ChaCha8Rng::seed_from_u64(8), 3, 8);
        for v in predict_vectors(&m, &z, None).unwrap() {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let c = cache_of(&[3, 3], 4);
        assert!(matches!(train_ssr(&c, &tiny(SsrMode::Ar, SsrLoss::Cosine)), Err(Error::Config(_))));
    }
}
