//! Post-norm transformer stack shared by the encoder, the decoders and the
//! token-level baselines.
//!
//! Each block computes `C = LN(SelfAtt(H) + H)` then `H' = LN(FFN(C) + C)`
//! with a GELU feed-forward layer. Positional tables are learned.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::real::Real;
use crate::tape::{AttentionMask, Segment, Tape, Var};

pub const LN_EPS: f64 = 1e-5;
/// Standard deviation for embedding tables and output heads.
pub const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_p: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TransformerConfig {
    pub fn desk() -> Self {
        Self { d_model: 64, n_heads: 4, n_blocks: 2, d_ff: 256, max_positions: 256, dropout_p: 0.1 }
    }

    /// GPT2-small / BERT-base sizes.
    pub fn paper_preset() -> Self {
        Self { d_model: 768, n_heads: 12, n_blocks: 12, d_ff: 3072, max_positions: 1024, dropout_p: 0.1 }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [self.d_model, self.n_heads, self.d_ff, self.max_positions];
        if extents.contains(&0) {
            return Err(Error::Config(format!("transformer extents must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Affine map `x W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng>(
        params: &mut ParamSet<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = params.add_normal(format!("{name}.w"), &[in_dim, out_dim], std, rng);
        let b = params.add_zeros(format!("{name}.b"), &[out_dim]);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let y = g.tape.matmul(x, g.p(self.w))?;
        g.tape.add_row(y, g.p(self.b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddings {
    pub words: ParamId,
    pub positions: ParamId,
    pub vocab_size: usize,
    pub max_positions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormWeights {
    fn new<F: Real>(params: &mut ParamSet<F>, name: &str, d: usize) -> Self {
        Self {
            gamma: params.add_full(format!("{name}.gamma"), &[d], F::one()),
            beta: params.add_zeros(format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.p(self.gamma), g.p(self.beta));
        g.tape.layer_norm(x, gm, bt, F::of(LN_EPS))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln1: LayerNormWeights,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ln2: LayerNormWeights,
    pub n_heads: usize,
}

impl BlockWeights {
    pub fn new<F: Real, R: Rng>(params: &mut ParamSet<F>, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let s = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (cfg.d_ff as f64).sqrt();
        Self {
            query: Linear::new(params, &format!("{name}.attn.query"), d, d, s, rng),
            key: Linear::new(params, &format!("{name}.attn.key"), d, d, s, rng),
            value: Linear::new(params, &format!("{name}.attn.value"), d, d, s, rng),
            out: Linear::new(params, &format!("{name}.attn.out"), d, d, s, rng),
            ln1: LayerNormWeights::new(params, &format!("{name}.ln1"), d),
            ff_in: Linear::new(params, &format!("{name}.ffn.in"), d, cfg.d_ff, s, rng),
            ff_out: Linear::new(params, &format!("{name}.ffn.out"), cfg.d_ff, d, sf, rng),
            ln2: LayerNormWeights::new(params, &format!("{name}.ln2"), d),
            n_heads: cfg.n_heads,
        }
    }
}

/// A forward pass in progress: the tape, the bound parameters and the
/// dropout regime.
pub struct Graph<'r, F: Real = f32> {
    pub tape: Tape<F>,
    pub vars: Vec<Var>,
    dropout_p: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r, F: Real> Graph<'r, F> {
    /// Parameters are constants; dropout is off.
    pub fn eval(params: &ParamSet<F>) -> Self {
        let mut tape = Tape::new();
        let vars = params.bind_frozen(&mut tape);
        Self { tape, vars, dropout_p: 0.0, rng: None }
    }

    /// Parameters track gradients; dropout is off.
    pub fn grad(params: &ParamSet<F>) -> Self {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        Self { tape, vars, dropout_p: 0.0, rng: None }
    }

    /// Parameters track gradients and dropout draws from `rng`.
    pub fn train(params: &ParamSet<F>, dropout_p: f64, rng: &'r mut ChaCha8Rng) -> Self {
        let mut g = Self::grad(params);
        g.dropout_p = dropout_p;
        g.rng = Some(rng);
        g
    }

    #[inline]
    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id]
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout_p > 0.0 => self.tape.dropout(x, self.dropout_p, rng, true),
            _ => Ok(x),
        }
    }

    pub fn param_grads(&self, params: &ParamSet<F>) -> Vec<Vec<F>> {
        params.grads(&self.tape, &self.vars)
    }
}

fn check_lengths(segments: &[Segment], max_positions: usize) -> Result<()> {
    if let Some(s) = segments.iter().find(|s| s.len > max_positions) {
        return Err(Error::Range(format!("sequence of length {} exceeds {max_positions} positions", s.len)));
    }
    Ok(())
}

/// Position index of every packed row, restarting at each segment.
pub fn positions(segments: &[Segment]) -> Vec<usize> {
    segments.iter().flat_map(|s| 0..s.len).collect()
}

/// `H0 = E[ids] + P[0..T]` for a single sequence.
pub fn embed_tokens<F: Real>(g: &mut Graph<'_, F>, emb: &TokenEmbeddings, ids: &[usize]) -> Result<Var> {
    let (h, _) = embed_packed(g, emb, &[ids])?;
    Ok(h)
}

/// Embeds several sequences into one packed matrix.
pub fn embed_packed<F: Real>(
    g: &mut Graph<'_, F>,
    emb: &TokenEmbeddings,
    seqs: &[&[usize]],
) -> Result<(Var, Vec<Segment>)> {
    let segments = Segment::pack(seqs.iter().map(|s| s.len()));
    check_lengths(&segments, emb.max_positions)?;
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    if let Some(bad) = ids.iter().find(|&&i| i >= emb.vocab_size) {
        return Err(Error::Range(format!("token id {bad} outside vocabulary of {}", emb.vocab_size)));
    }
    let words = g.tape.gather(g.p(emb.words), &ids)?;
    let pos = g.tape.gather(g.p(emb.positions), &positions(&segments))?;
    Ok((g.tape.add(words, pos)?, segments))
}

/// Multi-head self-attention including the output projection.
pub fn self_attention<F: Real>(
    g: &mut Graph<'_, F>,
    w: &BlockWeights,
    h: Var,
    segments: &[Segment],
    mask: &AttentionMask,
) -> Result<Var> {
    Ok(self_attention_with_probs(g, w, h, segments, mask)?.0)
}

/// As [`self_attention`], also returning the attention node whose saved
/// weights [`Tape::attention_probs`] exposes.
pub fn self_attention_with_probs<F: Real>(
    g: &mut Graph<'_, F>,
    w: &BlockWeights,
    h: Var,
    segments: &[Segment],
    mask: &AttentionMask,
) -> Result<(Var, Var)> {
    let q = w.query.forward(g, h)?;
    let k = w.key.forward(g, h)?;
    let v = w.value.forward(g, h)?;
    let att = g.tape.attention(q, k, v, w.n_heads, segments, mask)?;
    Ok((w.out.forward(g, att)?, att))
}

pub fn transformer_block<F: Real>(
    g: &mut Graph<'_, F>,
    w: &BlockWeights,
    h: Var,
    segments: &[Segment],
    mask: &AttentionMask,
) -> Result<Var> {
    let a = self_attention(g, w, h, segments, mask)?;
    let a = g.dropout(a)?;
    let c = g.tape.add(a, h)?;
    let c = w.ln1.forward(g, c)?;
    let f = w.ff_in.forward(g, c)?;
    let f = g.tape.gelu(f);
    let f = w.ff_out.forward(g, f)?;
    let f = g.dropout(f)?;
    let out = g.tape.add(f, c)?;
    w.ln2.forward(g, out)
}

/// Applies the blocks in order. With `tap = Some(j)` also returns `H^j`, the
/// states after the first `j` blocks (`j = N - 1` is the penultimate layer).
pub fn stack_forward<F: Real>(
    g: &mut Graph<'_, F>,
    blocks: &[BlockWeights],
    h0: Var,
    segments: &[Segment],
    mask: &AttentionMask,
    tap: Option<usize>,
) -> Result<(Var, Option<Var>)> {
    if let Some(t) = tap {
        if t >= blocks.len() {
            return Err(Error::Range(format!("tap {t} out of range for {} blocks", blocks.len())));
        }
    }
    let mut h = h0;
    let mut tapped = (tap == Some(0)).then_some(h0);
    for (i, b) in blocks.iter().enumerate() {
        h = transformer_block(g, b, h, segments, mask)?;
        if tap == Some(i + 1) {
            tapped = Some(h);
        }
    }
    Ok((h, tapped))
}

/// Unnormalized next-token (or masked-token) scores.
pub fn token_logits<F: Real>(g: &mut Graph<'_, F>, head: &Linear, h: Var) -> Result<Var> {
    head.forward(g, h)
}

/// Embeddings, a block stack and a token output head.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTransformer {
    pub config: TransformerConfig,
    pub emb: TokenEmbeddings,
    pub blocks: Vec<BlockWeights>,
    pub head: Linear,
}

impl TokenTransformer {
    pub fn new<F: Real, R: Rng>(
        params: &mut ParamSet<F>,
        prefix: &str,
        config: &TransformerConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let d = config.d_model;
        let words = params.add_normal(format!("{prefix}.emb.words"), &[vocab_size, d], EMBED_STD, rng);
        let positions = params.add_normal(format!("{prefix}.emb.positions"), &[config.max_positions, d], EMBED_STD, rng);
        let blocks = (0..config.n_blocks)
            .map(|i| BlockWeights::new(params, &format!("{prefix}.block{i}"), config, rng))
            .collect();
        let head = Linear::new(params, &format!("{prefix}.head"), d, vocab_size, EMBED_STD, rng);
        Ok(Self {
            config: config.clone(),
            emb: TokenEmbeddings { words, positions, vocab_size, max_positions: config.max_positions },
            blocks,
            head,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.emb.vocab_size
    }

    pub fn hidden<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        h0: Var,
        segments: &[Segment],
        mask: &AttentionMask,
        tap: Option<usize>,
    ) -> Result<(Var, Option<Var>)> {
        let h0 = g.dropout(h0)?;
        stack_forward(g, &self.blocks, h0, segments, mask, tap)
    }

    /// Log-probabilities for packed token sequences.
    pub fn log_probs<F: Real>(&self, g: &mut Graph<'_, F>, seqs: &[&[usize]], mask: &AttentionMask) -> Result<Var> {
        let (h0, segs) = embed_packed(g, &self.emb, seqs)?;
        let (h, _) = self.hidden(g, h0, &segs, mask, None)?;
        let logits = token_logits(g, &self.head, h)?;
        g.tape.log_softmax(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_relative_error};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn cfg(d: usize, heads: usize, blocks: usize) -> TransformerConfig {
        TransformerConfig { d_model: d, n_heads: heads, n_blocks: blocks, d_ff: 2 * d, max_positions: 16, dropout_p: 0.0 }
    }

    fn random_rows(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor<f64> {
        let data = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(&[t, d], data).unwrap()
    }

    fn model(seed: u64, c: &TransformerConfig) -> (ParamSet<f64>, TokenTransformer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let net = TokenTransformer::new(&mut p, "t", c, 7, &mut rng).unwrap();
        (p, net)
    }

    #[test]
    fn config_validation() {
        assert!(TransformerConfig::desk().validate().is_ok());
        assert!(TransformerConfig::paper_preset().validate().is_ok());
        assert_eq!(TransformerConfig::paper_preset().d_k(), 64);
        let mut c = cfg(10, 3, 1);
        assert!(c.validate().is_err());
        c.n_heads = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embedding_examples() {
        let c = cfg(8, 2, 1);
        let (mut p, net) = model(1, &c);
        let mut g = Graph::eval(&p);
        let h = embed_tokens(&mut g, &net.emb, &[]).unwrap();
        assert_eq!(g.tape.shape(h), &[0, 8]);

        let h = embed_tokens(&mut g, &net.emb, &[3, 3]).unwrap();
        let pos = p.get(net.emb.positions).clone();
        let v = g.tape.value(h);
        for j in 0..8 {
            let diff = v.row(1)[j] - v.row(0)[j];
            assert!((diff - (pos.row(1)[j] - pos.row(0)[j])).abs() < 1e-12);
        }

        *p.get_mut(net.emb.positions) = Tensor::zeros(&[16, 8]);
        let mut g = Graph::eval(&p);
        let h = embed_tokens(&mut g, &net.emb, &[4, 1]).unwrap();
        assert_eq!(g.tape.value(h).row(0), p.get(net.emb.words).row(4));
        assert_eq!(g.tape.value(h).row(1), p.get(net.emb.words).row(1));

        assert!(matches!(embed_tokens(&mut g, &net.emb, &[7]), Err(Error::Range(_))));
        assert!(matches!(embed_tokens(&mut g, &net.emb, &[0; 17]), Err(Error::Range(_))));
    }

    #[test]
    fn single_row_attention_is_value_then_output_projection() {
        let c = cfg(8, 2, 1);
        let (p, net) = model(2, &c);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::eval(&p);
        let h = g.tape.constant(random_rows(&mut rng, 1, 8));
        let out = self_attention(&mut g, &net.blocks[0], h, &[Segment::new(0, 1)], &AttentionMask::Bidirectional).unwrap();
        let b = &net.blocks[0];
        let v = b.value.forward(&mut g, h).unwrap();
        let want = b.out.forward(&mut g, v).unwrap();
        for (a, w) in g.tape.value(out).data().iter().zip(g.tape.value(want).data()) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let c = cfg(8, 2, 1);
        let (mut p, net) = model(3, &c);
        let b = net.blocks[0].clone();
        *p.get_mut(b.query.w) = Tensor::zeros(&[8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::eval(&p);
        let h = g.tape.constant(random_rows(&mut rng, 3, 8));
        let q = b.query.forward(&mut g, h).unwrap();
        let k = b.key.forward(&mut g, h).unwrap();
        let v = b.value.forward(&mut g, h).unwrap();
        let att = g.tape.attention(q, k, v, 2, &[Segment::new(0, 3)], &AttentionMask::Causal).unwrap();
        let vv = g.tape.value(v).clone();
        let a = g.tape.value(att);
        for i in 0..3 {
            for j in 0..8 {
                let mean = (0..=i).map(|r| vv.row(r)[j]).sum::<f64>() / (i + 1) as f64;
                assert!((a.row(i)[j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_attention_row_is_contract_error() {
        let c = cfg(4, 1, 1);
        let (p, net) = model(5, &c);
        let mut g = Graph::eval(&p);
        let h = g.tape.constant(Tensor::zeros(&[2, 4]));
        let mask = AttentionMask::explicit(vec![vec![true, false], vec![false, false]]).unwrap();
        let err = self_attention(&mut g, &net.blocks[0], h, &[Segment::new(0, 2)], &mask).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn block_preserves_shape_and_tap_semantics() {
        let c = cfg(8, 2, 3);
        let (p, net) = model(6, &c);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in [1, 2, 5] {
            let mut g = Graph::eval(&p);
            let h = g.tape.constant(random_rows(&mut rng, t, 8));
            let segs = [Segment::new(0, t)];
            let out = transformer_block(&mut g, &net.blocks[0], h, &segs, &AttentionMask::Causal).unwrap();
            assert_eq!(g.tape.shape(out), &[t, 8]);
            let (fin, tap) = stack_forward(&mut g, &net.blocks, h, &segs, &AttentionMask::Causal, Some(2)).unwrap();
            assert_ne!(g.tape.value(fin).data(), g.tape.value(tap.unwrap()).data());
            let (_, tap0) = stack_forward(&mut g, &net.blocks, h, &segs, &AttentionMask::Causal, Some(0)).unwrap();
            assert_eq!(tap0, Some(h));
            assert!(stack_forward(&mut g, &net.blocks, h, &segs, &AttentionMask::Causal, Some(3)).is_err());
        }
        let mut g = Graph::eval(&p);
        let h = g.tape.constant(random_rows(&mut rng, 3, 8));
        let (out, tap) = stack_forward(&mut g, &[], h, &[Segment::new(0, 3)], &AttentionMask::Causal, None).unwrap();
        assert_eq!(out, h);
        assert!(tap.is_none());
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let c = cfg(8, 2, 1);
        let (mut p, net) = model(8, &c);
        *p.get_mut(net.head.w) = Tensor::zeros(&[8, 7]);
        let mut g = Graph::eval(&p);
        let lp = net.log_probs(&mut g, &[&[1, 2, 3]], &AttentionMask::Causal).unwrap();
        for v in g.tape.value(lp).data() {
            assert!((v + (7f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let c = cfg(8, 2, 1);
        let (p, net) = model(10, &c);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_rows(&mut rng, 4, 8);
        let proj = random_rows(&mut rng, 4, 8).into_data();
        let segs = [Segment::new(0, 4)];
        let eval = |g: &mut Graph<'_, f64>, xv: Var| {
            let out = transformer_block(g, &net.blocks[0], xv, &segs, &AttentionMask::Causal).unwrap();
            g.tape.weighted_sum(out, proj.clone()).unwrap()
        };
        let mut g = Graph::eval(&p);
        let xv = g.tape.param(x.clone());
        let loss = eval(&mut g, xv);
        g.tape.backward(loss).unwrap();
        let analytic = g.tape.grad(xv).unwrap().to_vec();
        let numeric = finite_diff_grad(
            |flat| {
                let mut g = Graph::eval(&p);
                let xv = g.tape.constant(Tensor::new(&[4, 8], flat.to_vec()).unwrap());
                let l = eval(&mut g, xv);
                g.tape.scalar(l)
            },
            x.data(),
            1e-3,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-3);
    }
}
