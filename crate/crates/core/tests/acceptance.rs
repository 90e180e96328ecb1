//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Exits 0 even when a criterion fails so the workspace test run reports
//! the numbers instead of aborting; set `SSR_ACCEPTANCE_STRICT=1` to turn
//! any FAIL into a nonzero exit.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssr_core::baseline::{perplexity_select, LmConfig, TokenLm};
use ssr_core::corpus::{SyntheticSpec, EOS};
use ssr_core::encoder::VectorCache;
use ssr_core::gradcheck::check_param_gradients;
use ssr_core::metrics::{bleu_n, distinct_n, relative_bleu1_drop, ClozeMethod, DEFAULT_K_GRID};
use ssr_core::params::ParamSet;
use ssr_core::pipeline::{last_sentence_retrieval, synth, GenMode, Run, RunConfig};
use ssr_core::realization::DecoderVariant;
use ssr_core::ssr::{
    batch_loss, predict_vectors, ssr_contrastive_loss, ssr_cosine_loss, SsrBatch, SsrConfig, SsrLayout, SsrLoss, SsrMode, SsrModel,
};
use ssr_core::train::Schedule;
use ssr_core::transformer::{Graph, TokenTransformer, TransformerConfig};
use ssr_core::{AttentionMask, Segment, Tensor};

type Outcome = Result<(bool, String), String>;

fn err(e: ssr_core::Error) -> String {
    e.to_string()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fmt3(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

// ---------------------------------------------------------------------------
// 1. gradient oracle
// ---------------------------------------------------------------------------

fn grad_cfg() -> TransformerConfig {
    TransformerConfig { d_model: 16, n_heads: 2, n_blocks: 2, d_ff: 16, max_positions: 6, dropout_p: 0.0 }
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

/// Redraws every parameter uniformly from [-0.5, 0.5]. At the 0.02-scale
/// embedding init a step of 1e-3 is a sizeable fraction of each activation
/// and central differences lose accuracy ahead of the analytic gradient.
fn redraw(p: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    for id in 0..p.len() {
        for v in p.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

fn ssr_grad_batch(rng: &mut ChaCha8Rng, d: usize, n_neg: usize) -> SsrBatch {
    let lens = [4, 3];
    let z = rows(rng, 7, d);
    let segments = Segment::pack(lens);
    let mut b = SsrBatch { inputs: z.clone(), segments: segments.clone(), ..SsrBatch::default() };
    for s in &segments {
        for t in s.start..s.start + s.len - 1 {
            b.positions.push(t);
            b.targets.push(z[t + 1].clone());
            if n_neg > 0 {
                b.negatives.push(rows(rng, n_neg, d));
            }
        }
    }
    b
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = grad_cfg();
    let vocab = 10;
    let mut worst = [0.0f64; 3];
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut p = ParamSet::<f64>::new();
        let net = TokenTransformer::new(&mut p, "lm", &cfg, vocab, &mut rng).map_err(err)?;
        redraw(&mut p, &mut rng);
        let seqs: Vec<Vec<usize>> = [6, 5].iter().map(|&n| (0..n).map(|_| rng.gen_range(0..vocab)).collect()).collect();
        let e = check_param_gradients(&p, 1e-3, |g| {
            let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
            let lp = net.log_probs(g, &inputs, &AttentionMask::Causal)?;
            let targets: Vec<usize> = seqs.iter().flat_map(|s| s[1..].iter().copied()).collect();
            g.tape.nll(lp, &targets, &vec![true; targets.len()])
        })
        .map_err(err)?;
        worst[0] = worst[0].max(e);

        for (slot, loss) in [(1, SsrLoss::Cosine), (2, SsrLoss::Contrastive)] {
            let scfg = SsrConfig {
                transformer: cfg.clone(),
                mode: SsrMode::Ar,
                max_sentences: 6,
                mask_rate: 0.15,
                n_negatives: 3,
                loss,
                schedule: Schedule { steps: 0, batch_size: 1, lr: 1e-3, clip: None },
                seed,
            };
            let mut p = ParamSet::<f64>::new();
            let layout = SsrLayout::new(&mut p, &scfg, &mut rng).map_err(err)?;
            redraw(&mut p, &mut rng);
            let batch = ssr_grad_batch(&mut rng, cfg.d_model, if loss == SsrLoss::Contrastive { 3 } else { 0 });
            let e = check_param_gradients(&p, 1e-3, |g| batch_loss(&layout, g, &batch, SsrMode::Ar, loss)).map_err(err)?;
            worst[slot] = worst[slot].max(e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst.iter().all(|&w| w < 1e-3) && secs < 60.0;
    Ok((ok, format!("max rel err nll {:.2e} cosine {:.2e} contrastive {:.2e} over 20 seeds in {secs:.1}s", worst[0], worst[1], worst[2])))
}

// ---------------------------------------------------------------------------
// 2. loss corners
// ---------------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let z = vec![vec![1.0f32, 0.0, 0.5], vec![0.0, 2.0, -1.0]];
    let orth = vec![vec![0.0f32, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
    let neg: Vec<Vec<f32>> = z.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
    let pos = [0, 1];
    let cos = [
        ssr_cosine_loss(&z, &z, &pos).map_err(err)?,
        ssr_cosine_loss(&orth, &z, &pos).map_err(err)?,
        ssr_cosine_loss(&neg, &z, &pos).map_err(err)?,
    ];
    let orth_negs = vec![vec![vec![0.0f32, 1.0, 0.0]; 4], vec![vec![1.0f32, 0.0, 0.0]; 4]];
    let same_negs: Vec<Vec<Vec<f32>>> = z.iter().map(|v| vec![v.clone(); 4]).collect();
    let pred_negs: Vec<Vec<Vec<f32>>> = neg.iter().map(|v| vec![v.clone(); 4]).collect();
    let con = [
        ssr_contrastive_loss(&z, &z, &orth_negs, &pos).map_err(err)?,
        ssr_contrastive_loss(&z, &z, &same_negs, &pos).map_err(err)?,
        ssr_contrastive_loss(&neg, &z, &pred_negs, &pos).map_err(err)?,
    ];
    let ok = cos.iter().zip([0.0, 1.0, 2.0]).chain(con.iter().zip([1.0, 2.0, 4.0])).all(|(a, b)| (a - b).abs() < 1e-6);
    Ok((ok, format!("cosine {cos:?} contrastive {con:?}")))
}

// ---------------------------------------------------------------------------
// 3. causality
// ---------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let tcfg = TransformerConfig { d_model: 16, n_heads: 2, n_blocks: 2, d_ff: 32, max_positions: 12, dropout_p: 0.0 };
    let vocab = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut token_ok = 0;
    let mut sentence_ok = 0;
    for trial in 0..100u64 {
        let lm = TokenLm::new(
            &LmConfig { transformer: tcfg.clone(), schedule: Schedule { steps: 0, batch_size: 1, lr: 1e-3, clip: None }, seed: trial },
            vocab,
        )
        .map_err(err)?;
        let len = rng.gen_range(2..=12);
        let cut = rng.gen_range(0..len - 1);
        let a: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let mut b = a.clone();
        for t in &mut b[cut + 1..] {
            *t = (*t + rng.gen_range(1..vocab)) % vocab;
        }
        let logp = |s: &[usize]| -> Result<Tensor<f32>, String> {
            let mut g = Graph::eval(lm.params());
            let v = lm.net.log_probs(&mut g, &[s], &AttentionMask::Causal).map_err(err)?;
            Ok(g.tape.value(v).clone())
        };
        let (la, lb) = (logp(&a)?, logp(&b)?);
        if (0..=cut).all(|i| la.row(i) == lb.row(i)) {
            token_ok += 1;
        }

        let scfg = SsrConfig {
            transformer: TransformerConfig { max_positions: 8, ..tcfg.clone() },
            mode: SsrMode::Ar,
            max_sentences: 8,
            mask_rate: 0.15,
            n_negatives: 2,
            loss: SsrLoss::Contrastive,
            schedule: Schedule { steps: 0, batch_size: 1, lr: 1e-3, clip: None },
            seed: trial,
        };
        let m = SsrModel::new(&scfg).map_err(err)?;
        let n = rng.gen_range(2..=8);
        let cut = rng.gen_range(0..n - 1);
        let z = rows(&mut rng, n, 16);
        let mut z2 = z.clone();
        for r in &mut z2[cut + 1..] {
            *r = rows(&mut rng, 1, 16).remove(0);
        }
        let (pa, pb) = (predict_vectors(&m, &z, None).map_err(err)?, predict_vectors(&m, &z2, None).map_err(err)?);
        if pa[..=cut] == pb[..=cut] && pa[cut + 1] != pb[cut + 1] {
            sentence_ok += 1;
        }
    }
    Ok((token_ok == 100 && sentence_ok == 100, format!("token {token_ok}/100, sentence {sentence_ok}/100")))
}

// ---------------------------------------------------------------------------
// 4. overfit and retrieve
// ---------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // 68 stories so that the 0.94 training split holds exactly 64.
    let spec = SyntheticSpec { story_count: 68, split: (0.94, 0.03, 0.03), seed: 4, ..SyntheticSpec::default() };
    synth(&spec, dir.path(), false).map_err(err)?;
    let cfg = RunConfig::from_text(
        "seed=4\nd_model=32\nn_heads=4\nd_ff=64\nmax_positions=16\ndropout=0\nencoder_steps=3000\nssr_steps=4000\n",
    )
    .map_err(err)?;
    let run = Run::new(dir.path(), cfg, false);
    run.train_encoder().map_err(err)?;
    run.encode_corpus().map_err(err)?;
    run.train_ssr(SsrMode::Ar, SsrLoss::Contrastive).map_err(err)?;
    let cache = VectorCache::load(&run.path("vectors_train.bin")).map_err(err)?;
    let n = cache.paragraphs().len();
    let ssr = run.ssr(SsrMode::Ar, SsrLoss::Contrastive).map_err(err)?;
    let acc = last_sentence_retrieval(&ssr, &cache).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    Ok((n == 64 && acc >= 0.95 && secs < 300.0, format!("top-1 {acc:.3} over {n} stories, pipeline {secs:.1}s")))
}

// ---------------------------------------------------------------------------
// 5-8. trained pipelines over three seeds
// ---------------------------------------------------------------------------

const DESK: &str = "d_model=32\nn_heads=4\nd_ff=64\nmax_positions=64\nbudget=48\nmax_len=16\n\
encoder_steps=3000\nssr_steps=3000\ndecoder_steps=3000\nbaseline_steps=3000\n";

struct SeedResult {
    ssr_ar: f64,
    ssr_cosine: f64,
    ppl: f64,
    vanilla_entity: f64,
    mixed_entity: f64,
    drop_ssr: f64,
    drop_baseline: f64,
    sweep: Duration,
}

fn entity_rate(run: &Run, mode: GenMode, seed: u64) -> Result<f64, String> {
    let path = run.generate(mode, 20, seed).map_err(err)?;
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let meta = run.split_meta("test").map_err(err)?;
    let lines: Vec<&str> = text.lines().collect();
    let hits = lines.iter().zip(&meta).filter(|(l, m)| l.split_whitespace().any(|w| w == m.entity)).count();
    Ok(hits as f64 / lines.len() as f64)
}

fn trained_seed(seed: u64, root: &Path) -> Result<SeedResult, String> {
    let dir = root.join(format!("seed{seed}"));
    let spec = SyntheticSpec { story_count: 1600, split: (0.6, 0.05, 0.35), seed, ..SyntheticSpec::default() };
    synth(&spec, &dir, false).map_err(err)?;
    let base = RunConfig::from_text(&format!("seed={seed}\n{DESK}")).map_err(err)?;
    let run = Run::new(&dir, RunConfig { eval_items: 500, ..base.clone() }, false);
    run.train_encoder().map_err(err)?;
    run.encode_corpus().map_err(err)?;
    run.train_ssr(SsrMode::Ar, SsrLoss::Contrastive).map_err(err)?;
    run.train_ssr(SsrMode::Ar, SsrLoss::Cosine).map_err(err)?;
    run.train_baseline(false).map_err(err)?;
    run.train_decoder(DecoderVariant::Vanilla).map_err(err)?;
    run.train_decoder(DecoderVariant::Mixed).map_err(err)?;

    let tok = run.tokenizer().map_err(err)?;
    let items = run.cloze_items(&tok).map_err(err)?;
    if items.len() != 500 {
        return Err(format!("only {} held-out cloze items", items.len()));
    }
    let ssr_ar = run.select_ending(ClozeMethod::SsrArMatch).map_err(err)?.get("accuracy").unwrap_or(f64::NAN);
    let ppl = run.select_ending(ClozeMethod::PplBaseline).map_err(err)?.get("accuracy").unwrap_or(f64::NAN);
    let ssr_cosine = {
        let cos = run.ssr(SsrMode::Ar, SsrLoss::Cosine).map_err(err)?;
        let enc = run.encoder(&tok).map_err(err)?;
        let models = ssr_core::metrics::ClozeModels { encoder: Some(&enc), ssr_ar: Some(&cos), ..Default::default() };
        ssr_core::metrics::run_cloze_eval(ClozeMethod::SsrArMatch, models, &items).map_err(err)?.get("accuracy").unwrap_or(f64::NAN)
    };

    let gen_run = Run::new(&dir, RunConfig { eval_items: 200, ..base }, false);
    let vanilla_entity = entity_rate(&gen_run, GenMode::SsrVanilla, seed)?;
    let mixed_entity = entity_rate(&gen_run, GenMode::SsrMixed, seed)?;

    let t = Instant::now();
    let (_, rows) = gen_run.sweep_k(&[GenMode::SsrMixed, GenMode::Baseline], &DEFAULT_K_GRID, seed).map_err(err)?;
    let sweep = t.elapsed();
    let drop = |name| relative_bleu1_drop(&rows, name, 1, 50).ok_or_else(|| format!("no BLEU-1 drop for {name}"));
    Ok(SeedResult {
        ssr_ar,
        ssr_cosine,
        ppl,
        vanilla_entity,
        mixed_entity,
        drop_ssr: drop("ssr-mixed")?,
        drop_baseline: drop("baseline")?,
        sweep,
    })
}

fn criteria_5_to_8() -> [Outcome; 4] {
    let root = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return std::array::from_fn(|_| Err(e.to_string())),
    };
    let mut results = Vec::new();
    for seed in 0..3 {
        match trained_seed(seed, root.path()) {
            Ok(r) => results.push(r),
            Err(e) => return std::array::from_fn(|_| Err(format!("seed {seed}: {e}"))),
        }
    }
    let col = |f: fn(&SeedResult) -> f64| results.iter().map(f).collect::<Vec<f64>>();
    let (ar, cos, ppl) = (col(|r| r.ssr_ar), col(|r| r.ssr_cosine), col(|r| r.ppl));
    let (van, mix) = (col(|r| r.vanilla_entity), col(|r| r.mixed_entity));
    let (ds, db) = (col(|r| r.drop_ssr), col(|r| r.drop_baseline));
    let slowest = results.iter().map(|r| r.sweep).max().unwrap_or_default().as_secs_f64();
    let (m_ar, m_cos, m_ppl) = (median(ar.clone()), median(cos.clone()), median(ppl.clone()));
    let (m_van, m_mix) = (median(van.clone()), median(mix.clone()));
    let (m_ds, m_db) = (median(ds.clone()), median(db.clone()));
    [
        Ok((
            m_ar >= m_ppl && m_ar > 0.55 && m_ppl > 0.55,
            format!("median ssr-ar {m_ar:.3} vs ppl {m_ppl:.3} (seeds ssr-ar {} ppl {})", fmt3(&ar), fmt3(&ppl)),
        )),
        Ok((m_ar >= m_cos, format!("median contrastive {m_ar:.3} vs cosine {m_cos:.3} (seeds {} vs {})", fmt3(&ar), fmt3(&cos)))),
        Ok((
            m_mix >= 0.7 && m_van < m_mix,
            format!("median entity rate mixed {m_mix:.3} vanilla {m_van:.3} (seeds {} / {})", fmt3(&mix), fmt3(&van)),
        )),
        Ok((
            m_ds <= m_db && slowest < 600.0,
            format!(
                "median BLEU-1 drop k=1->50 ssr-mixed {m_ds:.4} baseline {m_db:.4} (seeds {} / {}), slowest sweep {slowest:.1}s",
                fmt3(&ds),
                fmt3(&db)
            ),
        )),
    ]
}

// ---------------------------------------------------------------------------
// 9. metric golden values
// ---------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let w = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let got = [
        bleu_n(&w("the cat"), &w("the dog"), 1).map_err(err)?,
        distinct_n(&[w("a a b")], 1).map_err(err)?,
        distinct_n(&[w("a b"), w("a b")], 1).map_err(err)?,
        bleu_n(&w("a b c d e"), &w("a b c d e"), 4).map_err(err)?,
        bleu_n(&w("x y z"), &w("a b c"), 2).map_err(err)?,
    ];
    let want = [0.5, 2.0 / 3.0, 0.5, 1.0, 0.0];
    let metrics_ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-6);

    let v = 13;
    let mut lm = TokenLm::new(
        &LmConfig {
            transformer: TransformerConfig { d_model: 16, n_heads: 2, n_blocks: 2, d_ff: 32, max_positions: 16, dropout_p: 0.0 },
            schedule: Schedule { steps: 0, batch_size: 1, lr: 1e-3, clip: None },
            seed: 9,
        },
        v,
    )
    .map_err(err)?;
    let (hw, hb) = (lm.net.head.w, lm.net.head.b);
    *lm.params_mut().get_mut(hw) = Tensor::zeros(&[16, v]);
    *lm.params_mut().get_mut(hb) = Tensor::zeros(&[v]);
    let (_, scores) = perplexity_select(&lm, &[EOS, 4, 5, EOS], &[vec![6, 7], vec![8, 9, 10]]).map_err(err)?;
    let ppl_ok = scores.iter().all(|s| (s - v as f64).abs() < 1e-4);
    Ok((metrics_ok && ppl_ok, format!("fixtures {got:?}, uniform perplexity {scores:?} for V={v}")))
}

// ---------------------------------------------------------------------------
// 10. determinism
// ---------------------------------------------------------------------------

const TINY: &str = "seed=5\nd_model=16\nn_heads=2\nd_ff=32\nmax_positions=64\nbudget=40\nmax_len=8\nbatch_size=8\n\
encoder_steps=20\nssr_steps=20\ndecoder_steps=20\nbaseline_steps=20\neval_items=8\n";

fn full_pipeline(dir: &Path) -> ssr_core::Result<()> {
    let spec = SyntheticSpec { story_count: 64, seed: 5, ..SyntheticSpec::default() };
    synth(&spec, dir, false)?;
    let run = Run::new(dir, RunConfig::from_text(TINY)?, false);
    run.train_encoder()?;
    run.encode_corpus()?;
    run.train_ssr(SsrMode::Ar, SsrLoss::Contrastive)?;
    run.train_ssr(SsrMode::NonAr, SsrLoss::Contrastive)?;
    run.train_ssr(SsrMode::Ar, SsrLoss::Cosine)?;
    run.train_decoder(DecoderVariant::Vanilla)?;
    run.train_decoder(DecoderVariant::Mixed)?;
    run.train_baseline(false)?;
    run.train_baseline(true)?;
    for mode in [GenMode::SsrVanilla, GenMode::SsrMixed, GenMode::Baseline] {
        run.generate(mode, 20, 1)?;
        run.evaluate(mode, 20, 1)?;
    }
    for m in [ClozeMethod::SsrArMatch, ClozeMethod::SsrNonArMatch, ClozeMethod::PplBaseline] {
        run.select_ending(m)?;
    }
    run.sweep_k(&[GenMode::SsrMixed, GenMode::Baseline], &[1, 5], 1)?;
    Ok(())
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(bytes) = std::fs::read(&p) {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), bytes);
            }
        }
    }
    out
}

fn criterion_10() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    full_pipeline(a.path()).map_err(err)?;
    full_pipeline(b.path()).map_err(err)?;
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<&String> = sa.keys().filter(|k| sa.get(*k) != sb.get(*k)).collect();
    let ok = differing.is_empty() && sa.len() == sb.len();
    Ok((ok, format!("{} artifacts compared, {} differ {differing:?}", sa.len(), differing.len())))
}

fn main() {
    let strict = std::env::var("SSR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    // Comma-separated criterion numbers, for iterating on a subset.
    let only: Option<Vec<usize>> = std::env::var("SSR_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let skipped = || Err("skipped".to_string());
    let mut lines: Vec<(usize, &str, Outcome)> = Vec::new();
    lines.push((1, "gradient oracle", if want(1) { criterion_1() } else { skipped() }));
    lines.push((2, "loss corners", if want(2) { criterion_2() } else { skipped() }));
    lines.push((3, "causality", if want(3) { criterion_3() } else { skipped() }));
    lines.push((4, "overfit and retrieve", if want(4) { criterion_4() } else { skipped() }));
    let [c5, c6, c7, c8] = if (5..=8).any(want) { criteria_5_to_8() } else { std::array::from_fn(|_| skipped()) };
    lines.push((5, "cloze vs perplexity baseline", c5));
    lines.push((6, "contrastive vs cosine ablation", c6));
    lines.push((7, "entity restoration", c7));
    lines.push((8, "topic drift sweep", c8));
    lines.push((9, "metric golden values", if want(9) { criterion_9() } else { skipped() }));
    lines.push((10, "determinism", if want(10) { criterion_10() } else { skipped() }));
    let mut failed = 0;
    for (n, name, outcome) in lines {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!ok);
        println!("{} criterion {n:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
