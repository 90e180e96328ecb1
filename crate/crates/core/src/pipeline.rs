//! Staged pipeline over a run directory. Every stage reads its upstream
//! artifacts from disk, refuses to overwrite its own outputs without
//! `force`, and echoes the resolved configuration before doing any work.
//!
//! Layout of a run directory:
//!
//! ```text
//! config/<command>.txt           resolved configuration echo
//! data/{train,val,test}.txt      corpus splits (+ .meta.csv sidecars)
//! vocab.txt  encoder.ckpt  vectors_{train,val,test}.bin
//! ssr_ar.ckpt  ssr_nonar.ckpt  decoder_{vanilla,mixed}.ckpt  baseline.ckpt
//! logs/<model>_loss.csv          one `epoch,mean_loss` line per epoch
//! generations/<mode>_k<k>_s<seed>.txt
//! metrics/*.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baseline::{train_infill_lm, train_token_lm, LmConfig, TokenLm};
use crate::config::parse_key_values;
use crate::corpus::{
    build_vocab, corpus_to_text, generate_synthetic_corpus, make_cloze_items, meta_to_csv, parse_meta_csv, read_raw_corpus,
    split_dataset, tokenize_corpus, ClozeItem, Paragraph, StoryMeta, SyntheticSpec, Tokenizer,
};
use crate::encoder::{encode_corpus, train_encoder_mlm, EncoderConfig, EncoderModel, VectorCache};
use crate::error::{Error, Result};
use crate::metrics::{
    generation_report, run_cloze_eval, sweep_csv, topic_drift_sweep, BaselineGenerator, ClozeMethod, ClozeModels, EndingGenerator,
    MetricReport, SsrGenerator, SweepRow,
};
use crate::params::{read_artifact, write_atomic};
use crate::realization::{make_training_triples, match_candidates, train_decoder, DecoderConfig, DecoderModel, DecoderVariant, GenerationParams, RealizeMode};
use crate::ssr::{predict_next_batch, train_ssr, SsrConfig, SsrLoss, SsrMode, SsrModel};
use crate::train::Schedule;
use crate::transformer::TransformerConfig;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Every tunable of the pipeline. Each key has a default; unknown keys in a
/// config file are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub min_count: usize,
    pub encoder_steps: usize,
    pub mlm_rate: f64,
    pub ssr_steps: usize,
    pub ssr_blocks: usize,
    pub ssr_loss: SsrLoss,
    pub ssr_mask_rate: f64,
    pub n_negatives: usize,
    pub max_sentences: usize,
    pub decoder_steps: usize,
    pub baseline_steps: usize,
    pub budget: usize,
    pub k: usize,
    pub max_len: usize,
    pub eval_items: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 256,
            max_positions: 128,
            dropout: 0.1,
            batch_size: 16,
            lr: 1e-3,
            clip: 1.0,
            min_count: 1,
            encoder_steps: 400,
            mlm_rate: 0.15,
            ssr_steps: 400,
            ssr_blocks: 2,
            ssr_loss: SsrLoss::Contrastive,
            ssr_mask_rate: 0.15,
            n_negatives: 8,
            max_sentences: 8,
            decoder_steps: 400,
            baseline_steps: 400,
            budget: 64,
            k: 20,
            max_len: 24,
            eval_items: 0,
        }
    }
}

fn loss_name(l: SsrLoss) -> &'static str {
    match l {
        SsrLoss::Cosine => "cosine",
        SsrLoss::Contrastive => "contrastive",
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 25] = [
        "seed",
        "d_model",
        "n_heads",
        "n_blocks",
        "d_ff",
        "max_positions",
        "dropout",
        "batch_size",
        "lr",
        "clip",
        "min_count",
        "encoder_steps",
        "mlm_rate",
        "ssr_steps",
        "ssr_blocks",
        "ssr_loss",
        "ssr_mask_rate",
        "n_negatives",
        "max_sentences",
        "decoder_steps",
        "baseline_steps",
        "budget",
        "k",
        "max_len",
        "eval_items",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_blocks" => self.n_blocks = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "max_positions" => self.max_positions = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "clip" => self.clip = num(key, value)?,
            "min_count" => self.min_count = num(key, value)?,
            "encoder_steps" => self.encoder_steps = num(key, value)?,
            "mlm_rate" => self.mlm_rate = num(key, value)?,
            "ssr_steps" => self.ssr_steps = num(key, value)?,
            "ssr_blocks" => self.ssr_blocks = num(key, value)?,
            "ssr_loss" => {
                self.ssr_loss = match value {
                    "cosine" => SsrLoss::Cosine,
                    "contrastive" => SsrLoss::Contrastive,
                    _ => return Err(Error::Config(format!("ssr_loss must be cosine or contrastive, not {value:?}"))),
                }
            }
            "ssr_mask_rate" => self.ssr_mask_rate = num(key, value)?,
            "n_negatives" => self.n_negatives = num(key, value)?,
            "max_sentences" => self.max_sentences = num(key, value)?,
            "decoder_steps" => self.decoder_steps = num(key, value)?,
            "baseline_steps" => self.baseline_steps = num(key, value)?,
            "budget" => self.budget = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "eval_items" => self.eval_items = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "n_blocks" => self.n_blocks.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "max_positions" => self.max_positions.to_string(),
            "dropout" => self.dropout.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "clip" => self.clip.to_string(),
            "min_count" => self.min_count.to_string(),
            "encoder_steps" => self.encoder_steps.to_string(),
            "mlm_rate" => self.mlm_rate.to_string(),
            "ssr_steps" => self.ssr_steps.to_string(),
            "ssr_blocks" => self.ssr_blocks.to_string(),
            "ssr_loss" => loss_name(self.ssr_loss).to_string(),
            "ssr_mask_rate" => self.ssr_mask_rate.to_string(),
            "n_negatives" => self.n_negatives.to_string(),
            "max_sentences" => self.max_sentences.to_string(),
            "decoder_steps" => self.decoder_steps.to_string(),
            "baseline_steps" => self.baseline_steps.to_string(),
            "budget" => self.budget.to_string(),
            "k" => self.k.to_string(),
            "max_len" => self.max_len.to_string(),
            "eval_items" => self.eval_items.to_string(),
            _ => return None,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (ln, (k, v)) in parse_key_values(text)? {
            c.set(&k, &v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {ln}: {m}")),
                e => e,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Every key in declaration order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("declared key"));
        }
        s
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
            dropout_p: self.dropout,
        }
    }

    fn schedule(&self, steps: usize) -> Schedule {
        Schedule { steps, batch_size: self.batch_size, lr: self.lr, clip: (self.clip > 0.0).then_some(self.clip) }
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer().validate()?;
        self.schedule(0).validate()?;
        if self.n_blocks < 2 {
            return Err(Error::Config("n_blocks must be at least 2 so the encoder has a penultimate layer".into()));
        }
        if self.k == 0 || self.max_len == 0 || self.min_count == 0 {
            return Err(Error::Config("k, max_len and min_count must be positive".into()));
        }
        self.ssr(SsrMode::Ar, self.ssr_loss).validate()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig { transformer: self.transformer(), mask_rate: self.mlm_rate, schedule: self.schedule(self.encoder_steps), seed: self.seed }
    }

    pub fn ssr(&self, mode: SsrMode, loss: SsrLoss) -> SsrConfig {
        SsrConfig {
            transformer: TransformerConfig { n_blocks: self.ssr_blocks, ..self.transformer() },
            mode,
            max_sentences: self.max_sentences,
            mask_rate: self.ssr_mask_rate,
            n_negatives: self.n_negatives,
            loss,
            schedule: self.schedule(self.ssr_steps),
            seed: self.seed,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            transformer: self.transformer(),
            d_sentence: self.d_model,
            budget: self.budget,
            schedule: self.schedule(self.decoder_steps),
            seed: self.seed,
        }
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig { transformer: self.transformer(), schedule: self.schedule(self.baseline_steps), seed: self.seed }
    }

    pub fn generation(&self, k: usize, seed: u64) -> GenerationParams {
        GenerationParams { k, max_len: self.max_len, seed }
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Writes `corpus`, `train`, `val` and `test` text files with metadata
/// sidecars under `out/data`.
pub fn synth(spec: &SyntheticSpec, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let data = out.join("data");
    if data.exists() && !force {
        return Err(Error::Config(format!("{} already exists; pass --force to overwrite", data.display())));
    }
    let corpus = generate_synthetic_corpus(spec)?;
    let pairs: Vec<(Vec<String>, StoryMeta)> = corpus.stories.iter().cloned().zip(corpus.meta.iter().cloned()).collect();
    let (a, b, c) = split_dataset(&pairs, spec.split, spec.seed)?;
    let mut written = Vec::new();
    let mut write = |name: &str, part: &[(Vec<String>, StoryMeta)]| -> Result<()> {
        let stories: Vec<Vec<String>> = part.iter().map(|p| p.0.clone()).collect();
        let meta: Vec<StoryMeta> = part.iter().map(|p| p.1.clone()).collect();
        let text = data.join(format!("{name}.txt"));
        write_atomic(&text, corpus_to_text(&stories).as_bytes())?;
        write_atomic(&data.join(format!("{name}.meta.csv")), meta_to_csv(&meta).as_bytes())?;
        written.push(text);
        Ok(())
    };
    write("corpus", &pairs)?;
    write("train", &a)?;
    write("val", &b)?;
    write("test", &c)?;
    Ok(written)
}

/// Splits a user-supplied corpus (one paragraph per line, sentences
/// separated by tabs) into `out/data/{corpus,train,val,test}.txt`.
pub fn ingest(corpus: &Path, out: &Path, split: (f64, f64, f64), seed: u64, force: bool) -> Result<Vec<PathBuf>> {
    if !corpus.exists() {
        return Err(Error::Config(format!("corpus file {} not found", corpus.display())));
    }
    let data = out.join("data");
    if data.exists() && !force {
        return Err(Error::Config(format!("{} already exists; pass --force to overwrite", data.display())));
    }
    let raw = read_raw_corpus(corpus)?;
    let (a, b, c) = split_dataset(&raw, split, seed)?;
    let mut written = Vec::new();
    for (name, part) in [("corpus", &raw), ("train", &a), ("val", &b), ("test", &c)] {
        let path = data.join(format!("{name}.txt"));
        write_atomic(&path, corpus_to_text(part).as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_spec(path: &Path) -> Result<SyntheticSpec> {
    if !path.exists() {
        return Err(Error::Config(format!("spec file {} not found", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    SyntheticSpec::from_text(&text)
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub force: bool,
}

fn ssr_file(mode: SsrMode, loss: SsrLoss) -> String {
    let m = match mode {
        SsrMode::Ar => "ar",
        SsrMode::NonAr => "nonar",
    };
    match loss {
        SsrLoss::Contrastive => format!("ssr_{m}.ckpt"),
        SsrLoss::Cosine => format!("ssr_{m}_cosine.ckpt"),
    }
}

fn variant_name(v: DecoderVariant) -> &'static str {
    match v {
        DecoderVariant::Vanilla => "vanilla",
        DecoderVariant::Mixed => "mixed",
    }
}

/// Generation systems selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenMode {
    SsrVanilla,
    SsrMixed,
    Baseline,
}

impl GenMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ssr-vanilla" => Ok(GenMode::SsrVanilla),
            "ssr-mixed" => Ok(GenMode::SsrMixed),
            "baseline" => Ok(GenMode::Baseline),
            _ => Err(Error::Argument(format!("unknown generation mode {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GenMode::SsrVanilla => "ssr-vanilla",
            GenMode::SsrMixed => "ssr-mixed",
            GenMode::Baseline => "baseline",
        }
    }
}

/// Loaded models needed by a generator.
pub enum LoadedGenerator {
    Ssr { encoder: EncoderModel, ssr: SsrModel, decoder: DecoderModel, mode: RealizeMode },
    Baseline(TokenLm),
}

impl LoadedGenerator {
    pub fn as_generator(&self, name: &str) -> Box<dyn EndingGenerator + '_> {
        match self {
            LoadedGenerator::Ssr { encoder, ssr, decoder, mode } => {
                Box::new(SsrGenerator { name: name.to_string(), encoder, ssr, decoder, mode: *mode })
            }
            LoadedGenerator::Baseline(lm) => Box::new(BaselineGenerator { name: name.to_string(), lm }),
        }
    }
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, config: RunConfig, force: bool) -> Self {
        Self { dir: dir.into(), config, force }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Writes the resolved configuration to `config/<command>.txt`.
    pub fn echo(&self, command: &str, extra: &[(&str, String)]) -> Result<()> {
        let mut text = self.config.to_text();
        for (k, v) in extra {
            let _ = writeln!(text, "{k} = {v}");
        }
        write_atomic(&self.path(&format!("config/{command}.txt")), text.as_bytes())
    }

    fn guard(&self, outputs: &[PathBuf]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        if let Some(p) = outputs.iter().find(|p| p.exists()) {
            return Err(Error::Config(format!("{} already exists; pass --force to overwrite", p.display())));
        }
        Ok(())
    }

    fn require(&self, inputs: &[PathBuf]) -> Result<()> {
        match inputs.iter().find(|p| !p.exists()) {
            Some(p) => Err(Error::MissingArtifact(p.clone())),
            None => Ok(()),
        }
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::load(&self.path("vocab.txt"))
    }

    pub fn split(&self, name: &str, tok: &Tokenizer) -> Result<Vec<Paragraph>> {
        Ok(tokenize_corpus(&read_raw_corpus(&self.path(&format!("data/{name}.txt")))?, tok))
    }

    pub fn split_meta(&self, name: &str) -> Result<Vec<StoryMeta>> {
        let bytes = read_artifact(&self.path(&format!("data/{name}.meta.csv")))?;
        parse_meta_csv(&String::from_utf8_lossy(&bytes))
    }

    pub fn encoder(&self, tok: &Tokenizer) -> Result<EncoderModel> {
        EncoderModel::load(&self.config.transformer(), tok.vocab_size(), &self.path("encoder.ckpt"))
    }

    pub fn ssr(&self, mode: SsrMode, loss: SsrLoss) -> Result<SsrModel> {
        SsrModel::load(&self.config.ssr(mode, loss), &self.path(&ssr_file(mode, loss)))
    }

    pub fn decoder(&self, variant: DecoderVariant, tok: &Tokenizer) -> Result<DecoderModel> {
        DecoderModel::load(&self.config.decoder(), tok.vocab_size(), &self.path(&format!("decoder_{}.ckpt", variant_name(variant))))
    }

    pub fn baseline(&self, tok: &Tokenizer) -> Result<TokenLm> {
        TokenLm::load(&self.config.lm(), tok.vocab_size(), &self.path("baseline.ckpt"))
    }

    /// Builds the vocabulary from the training split, trains and freezes
    /// the encoder.
    pub fn train_encoder(&self) -> Result<String> {
        let train = self.path("data/train.txt");
        self.require(&[train.clone()])?;
        let outs = [self.path("vocab.txt"), self.path("encoder.ckpt")];
        self.guard(&outs)?;
        self.echo("train-encoder", &[])?;
        let raw = read_raw_corpus(&train)?;
        let tok = build_vocab(&raw, self.config.min_count)?;
        tok.save(&outs[0])?;
        let corpus = tokenize_corpus(&raw, &tok);
        let (model, log) = train_encoder_mlm(&corpus, tok.vocab_size(), &self.config.encoder())?;
        model.save(&outs[1])?;
        log.save(&self.path("logs/encoder_loss.csv"))?;
        Ok(format!("encoder trained: vocab {} final loss {:.4}", tok.vocab_size(), log.last().unwrap_or(f64::NAN)))
    }

    /// Encodes every split into `vectors_<split>.bin`.
    pub fn encode_corpus(&self) -> Result<String> {
        self.require(&[self.path("encoder.ckpt"), self.path("vocab.txt")])?;
        let outs: Vec<PathBuf> = SPLITS.iter().map(|s| self.path(&format!("vectors_{s}.bin"))).collect();
        self.guard(&outs)?;
        self.echo("encode-corpus", &[])?;
        let tok = self.tokenizer()?;
        let enc = self.encoder(&tok)?;
        let mut total = 0;
        for (s, out) in SPLITS.iter().zip(&outs) {
            let corpus = self.split(s, &tok)?;
            let cache = encode_corpus(&enc, &corpus)?;
            total += cache.len();
            cache.save(out)?;
        }
        Ok(format!("encoded {total} sentences"))
    }

    pub fn train_ssr(&self, mode: SsrMode, loss: SsrLoss) -> Result<String> {
        let input = self.path("vectors_train.bin");
        self.require(&[input.clone()])?;
        let out = self.path(&ssr_file(mode, loss));
        self.guard(&[out.clone()])?;
        self.echo("train-ssr", &[("mode", format!("{mode:?}")), ("loss", loss_name(loss).into())])?;
        let cache = VectorCache::load(&input)?;
        let (model, log) = train_ssr(&cache, &self.config.ssr(mode, loss))?;
        model.save(&out)?;
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("ssr").to_string();
        log.save(&self.path(&format!("logs/{stem}_loss.csv")))?;
        Ok(format!("{stem} trained: final loss {:.4}", log.last().unwrap_or(f64::NAN)))
    }

    pub fn train_decoder(&self, variant: DecoderVariant) -> Result<String> {
        self.require(&[self.path("vectors_train.bin"), self.path("vocab.txt"), self.path("data/train.txt")])?;
        let name = variant_name(variant);
        let out = self.path(&format!("decoder_{name}.ckpt"));
        self.guard(&[out.clone()])?;
        self.echo("train-decoder", &[("variant", name.into())])?;
        let tok = self.tokenizer()?;
        let corpus = self.split("train", &tok)?;
        let cache = VectorCache::load(&self.path("vectors_train.bin"))?;
        let triples = make_training_triples(&corpus, &cache)?;
        let (model, log) = train_decoder(&triples, tok.vocab_size(), variant, &self.config.decoder())?;
        model.save(&out)?;
        log.save(&self.path(&format!("logs/decoder_{name}_loss.csv")))?;
        Ok(format!("decoder_{name} trained: final loss {:.4}", log.last().unwrap_or(f64::NAN)))
    }

    pub fn train_baseline(&self, infill: bool) -> Result<String> {
        self.require(&[self.path("vocab.txt"), self.path("data/train.txt")])?;
        let stem = if infill { "infill" } else { "baseline" };
        let out = self.path(&format!("{stem}.ckpt"));
        self.guard(&[out.clone()])?;
        self.echo("train-baseline", &[("infill", infill.to_string())])?;
        let tok = self.tokenizer()?;
        let corpus = self.split("train", &tok)?;
        let (model, log) = if infill {
            train_infill_lm(&corpus, tok.vocab_size(), &self.config.lm())?
        } else {
            train_token_lm(&corpus, tok.vocab_size(), &self.config.lm())?
        };
        model.save(&out)?;
        log.save(&self.path(&format!("logs/{stem}_loss.csv")))?;
        Ok(format!("{stem} trained: final loss {:.4}", log.last().unwrap_or(f64::NAN)))
    }

    fn limit<T: Clone>(&self, v: Vec<T>) -> Vec<T> {
        match self.config.eval_items {
            0 => v,
            n => v.into_iter().take(n).collect(),
        }
    }

    /// First `m - 1` sentences of every test paragraph and its last sentence.
    pub fn test_contexts(&self, tok: &Tokenizer) -> Result<(Vec<Vec<Vec<usize>>>, Vec<Vec<usize>>)> {
        let test = self.limit(self.split("test", tok)?);
        let ctx = test.iter().map(|p| p.sentences[..p.len() - 1].to_vec()).collect();
        let refs = test.iter().map(|p| p.sentences[p.len() - 1].clone()).collect();
        Ok((ctx, refs))
    }

    pub fn load_generator(&self, mode: GenMode, tok: &Tokenizer) -> Result<LoadedGenerator> {
        Ok(match mode {
            GenMode::Baseline => {
                self.require(&[self.path("baseline.ckpt")])?;
                LoadedGenerator::Baseline(self.baseline(tok)?)
            }
            GenMode::SsrVanilla | GenMode::SsrMixed => {
                let (variant, realize) = if mode == GenMode::SsrMixed {
                    (DecoderVariant::Mixed, RealizeMode::Mixed)
                } else {
                    (DecoderVariant::Vanilla, RealizeMode::Vanilla)
                };
                self.require(&[
                    self.path("encoder.ckpt"),
                    self.path(&ssr_file(SsrMode::Ar, SsrLoss::Contrastive)),
                    self.path(&format!("decoder_{}.ckpt", variant_name(variant))),
                ])?;
                LoadedGenerator::Ssr {
                    encoder: self.encoder(tok)?,
                    ssr: self.ssr(SsrMode::Ar, SsrLoss::Contrastive)?,
                    decoder: self.decoder(variant, tok)?,
                    mode: realize,
                }
            }
        })
    }

    pub fn generation_path(&self, mode: GenMode, k: usize, seed: u64) -> PathBuf {
        self.path(&format!("generations/{}_k{k}_s{seed}.txt", mode.name()))
    }

    /// One generated ending per test context.
    pub fn generate(&self, mode: GenMode, k: usize, seed: u64) -> Result<PathBuf> {
        self.require(&[self.path("vocab.txt")])?;
        let out = self.generation_path(mode, k, seed);
        self.guard(&[out.clone()])?;
        self.echo("generate", &[("mode", mode.name().into()), ("k", k.to_string()), ("gen_seed", seed.to_string())])?;
        let tok = self.tokenizer()?;
        let gen = self.load_generator(mode, &tok)?;
        let (ctx, _) = self.test_contexts(&tok)?;
        let lines = gen.as_generator(mode.name()).generate(&ctx, &self.config.generation(k, seed))?;
        let mut text = String::new();
        for l in &lines {
            text.push_str(&tok.decode(l));
            text.push('\n');
        }
        write_atomic(&out, text.as_bytes())?;
        Ok(out)
    }

    pub fn cloze_items(&self, tok: &Tokenizer) -> Result<Vec<ClozeItem>> {
        let test = self.split("test", tok)?;
        let meta = self.split_meta("test")?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x636c_6f7a);
        Ok(self.limit(make_cloze_items(&test, &meta, &mut rng)?))
    }

    pub fn select_ending(&self, method: ClozeMethod) -> Result<MetricReport> {
        let tag = match method {
            ClozeMethod::SsrArMatch => "ssr-ar",
            ClozeMethod::SsrNonArMatch => "ssr-nonar",
            ClozeMethod::PplBaseline => "ppl",
        };
        let needs: Vec<PathBuf> = match method {
            ClozeMethod::SsrArMatch => vec![self.path("encoder.ckpt"), self.path(&ssr_file(SsrMode::Ar, SsrLoss::Contrastive))],
            ClozeMethod::SsrNonArMatch => vec![self.path("encoder.ckpt"), self.path(&ssr_file(SsrMode::NonAr, SsrLoss::Contrastive))],
            ClozeMethod::PplBaseline => vec![self.path("baseline.ckpt")],
        };
        self.require(&[self.path("vocab.txt")])?;
        self.require(&needs)?;
        let out = self.path(&format!("metrics/cloze_{tag}.csv"));
        self.guard(&[out.clone()])?;
        self.echo("select-ending", &[("method", tag.into())])?;
        let tok = self.tokenizer()?;
        let items = self.cloze_items(&tok)?;
        let enc;
        let ar;
        let nonar;
        let lm;
        let mut models = ClozeModels::default();
        match method {
            ClozeMethod::SsrArMatch => {
                enc = self.encoder(&tok)?;
                ar = self.ssr(SsrMode::Ar, SsrLoss::Contrastive)?;
                models.encoder = Some(&enc);
                models.ssr_ar = Some(&ar);
            }
            ClozeMethod::SsrNonArMatch => {
                enc = self.encoder(&tok)?;
                nonar = self.ssr(SsrMode::NonAr, SsrLoss::Contrastive)?;
                models.encoder = Some(&enc);
                models.ssr_nonar = Some(&nonar);
            }
            ClozeMethod::PplBaseline => {
                lm = self.baseline(&tok)?;
                models.lm = Some(&lm);
            }
        }
        let mut report = run_cloze_eval(method, models, &items)?;
        report.echo.insert("seed".into(), self.config.seed.to_string());
        write_atomic(&out, report.to_csv().as_bytes())?;
        Ok(report)
    }

    /// BLEU-1..4 and Distinct-1..4 of a generation file against the true
    /// endings of the test split.
    pub fn evaluate(&self, mode: GenMode, k: usize, seed: u64) -> Result<MetricReport> {
        let gen = self.generation_path(mode, k, seed);
        self.require(&[self.path("vocab.txt"), gen.clone()])?;
        let out = self.path(&format!("metrics/eval_{}_k{k}_s{seed}.csv", mode.name()));
        self.guard(&[out.clone()])?;
        self.echo("evaluate", &[("mode", mode.name().into()), ("k", k.to_string()), ("gen_seed", seed.to_string())])?;
        let tok = self.tokenizer()?;
        let (_, refs) = self.test_contexts(&tok)?;
        let text = String::from_utf8_lossy(&read_artifact(&gen)?).into_owned();
        let generated: Vec<Vec<String>> = text.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect();
        let references: Vec<Vec<String>> = refs.iter().map(|r| tok.decode(r).split_whitespace().map(str::to_string).collect()).collect();
        let mut report = generation_report(&generated, &references)?;
        report.echo.insert("mode".into(), mode.name().into());
        report.echo.insert("k".into(), k.to_string());
        report.echo.insert("seed".into(), seed.to_string());
        write_atomic(&out, report.to_csv().as_bytes())?;
        Ok(report)
    }

    pub fn sweep_k(&self, modes: &[GenMode], grid: &[usize], seed: u64) -> Result<(PathBuf, Vec<SweepRow>)> {
        self.require(&[self.path("vocab.txt")])?;
        let out = self.path("metrics/sweep_k.csv");
        self.guard(&[out.clone()])?;
        let grid_text = grid.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",");
        let names = modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(",");
        self.echo("sweep-k", &[("grid", grid_text), ("generators", names), ("gen_seed", seed.to_string())])?;
        let tok = self.tokenizer()?;
        let loaded: Vec<(GenMode, LoadedGenerator)> =
            modes.iter().map(|&m| Ok((m, self.load_generator(m, &tok)?))).collect::<Result<_>>()?;
        let gens: Vec<Box<dyn EndingGenerator + '_>> = loaded.iter().map(|(m, l)| l.as_generator(m.name())).collect();
        let refs: Vec<&dyn EndingGenerator> = gens.iter().map(|g| g.as_ref()).collect();
        let (ctx, references) = self.test_contexts(&tok)?;
        let rows = topic_drift_sweep(&refs, &ctx, grid, &references, seed, self.config.max_len)?;
        write_atomic(&out, sweep_csv(&rows).as_bytes())?;
        Ok((out, rows))
    }
}

/// Top-1 retrieval of each paragraph's last sentence vector among the last
/// sentence vectors of every paragraph in `cache`, predicting from the
/// preceding sentences. Identical candidate vectors count as the same
/// sentence.
pub fn last_sentence_retrieval(ssr: &SsrModel, cache: &VectorCache) -> Result<f64> {
    let ranges = cache.paragraphs();
    let ranges: Vec<_> = ranges.into_iter().filter(|r| r.len() >= 2).collect();
    if ranges.is_empty() {
        return Err(Error::Degenerate("no paragraph has two sentences".into()));
    }
    let contexts: Vec<Vec<Vec<f32>>> =
        ranges.iter().map(|r| (r.start..r.end - 1).map(|i| cache.vector(i).to_vec()).collect()).collect();
    let lasts: Vec<Vec<f32>> = ranges.iter().map(|r| cache.vector(r.end - 1).to_vec()).collect();
    let preds = predict_next_batch(ssr, &contexts)?;
    let mut hits = 0;
    for (i, p) in preds.iter().enumerate() {
        let best = match_candidates(p, &lasts)?[0].0;
        hits += usize::from(lasts[best] == lasts[i]);
    }
    Ok(hits as f64 / ranges.len() as f64)
}
