//! Corpus ingestion, word-level tokenization, splits, cloze items and the
//! synthetic story generator.
//!
//! Corpus files are UTF-8 with one paragraph per line and sentences separated
//! by a single tab. Tokens are whitespace-separated words.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{read_artifact, write_atomic};

pub const EOS: usize = 0;
pub const PAD: usize = 1;
pub const UNK: usize = 2;
pub const BLANK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<eos>", "<pad>", "<unk>", "<blank>"];

/// Raw text of one paragraph, sentence by sentence.
pub type RawParagraph = Vec<String>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Paragraph {
    pub id: usize,
    pub sentences: Vec<Vec<usize>>,
    pub raw: Vec<String>,
}

impl Paragraph {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
    pub min_count: usize,
}

impl Tokenizer {
    fn from_words(words: Vec<String>, min_count: usize) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if words.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Corpus(format!("vocabulary must start with {s} at id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary entry {w}")));
            }
        }
        Ok(Self { words, index, min_count })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    /// One entry per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_words(text.lines().map(str::to_string).collect(), 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_artifact(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Corpus(format!("{} is not UTF-8", path.display())))?;
        Self::from_text(&text)
    }
}

/// Words seen at least `min_count` times, most frequent first, ties in
/// alphabetical order, after the four special tokens.
pub fn build_vocab(raw: &[RawParagraph], min_count: usize) -> Result<Tokenizer> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in raw.iter().flatten().flat_map(|s| s.split_whitespace()) {
        *counts.entry(w).or_default() += 1;
    }
    let mut entries: Vec<(&str, usize)> =
        counts.into_iter().filter(|(w, c)| *c >= min_count && !SPECIALS.contains(w)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let words = SPECIALS.iter().map(|s| s.to_string()).chain(entries.into_iter().map(|(w, _)| w.to_string())).collect();
    Tokenizer::from_words(words, min_count)
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

pub fn parse_raw_corpus(text: &str) -> Result<Vec<RawParagraph>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let mut sentences = Vec::new();
        for field in line.split('\t') {
            let s = field.split_whitespace().collect::<Vec<_>>().join(" ");
            if s.is_empty() {
                return Err(Error::Corpus(format!("line {}: empty sentence field", i + 1)));
            }
            sentences.push(s);
        }
        out.push(sentences);
    }
    if out.is_empty() {
        return Err(Error::Corpus("corpus is empty".into()));
    }
    Ok(out)
}

pub fn read_raw_corpus(path: &Path) -> Result<Vec<RawParagraph>> {
    let bytes = read_artifact(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Corpus(format!("{} is not UTF-8", path.display())))?;
    parse_raw_corpus(&text).map_err(|e| match e {
        Error::Corpus(m) => Error::Corpus(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn tokenize_corpus(raw: &[RawParagraph], tok: &Tokenizer) -> Vec<Paragraph> {
    raw.iter()
        .enumerate()
        .map(|(id, p)| Paragraph { id, sentences: p.iter().map(|s| tok.encode(s)).collect(), raw: p.clone() })
        .collect()
}

/// Paragraphs in file order; unknown words map to `<unk>`.
pub fn load_corpus(path: &Path, tok: &Tokenizer) -> Result<Vec<Paragraph>> {
    Ok(tokenize_corpus(&read_raw_corpus(path)?, tok))
}

pub fn corpus_to_text(raw: &[RawParagraph]) -> String {
    let mut s = String::new();
    for p in raw {
        s.push_str(&p.join("\t"));
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Deterministic shuffle, then consecutive train/val/test slices.
pub fn split_dataset<T: Clone>(items: &[T], fractions: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be positive and sum to 1")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..n_train + n_val]), pick(&order[n_train + n_val..])))
}

// ---------------------------------------------------------------------------
// Synthetic stories
// ---------------------------------------------------------------------------

/// Topic vocabulary for one cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub name: &'static str,
    pub places: &'static [&'static str],
    pub things: &'static [&'static str],
    pub acts: &'static [&'static str],
    pub helpers: &'static [&'static str],
    pub results: &'static [&'static str],
}

pub const CLUSTERS: &[Cluster] = &[
    Cluster {
        name: "cooking",
        places: &["kitchen", "bakery", "market"],
        things: &["soup", "bread", "pie", "pasta"],
        acts: &["cook", "bake", "taste"],
        helpers: &["chef", "baker"],
        results: &["dinner", "feast", "meal"],
    },
    Cluster {
        name: "sports",
        places: &["stadium", "field", "gym"],
        things: &["ball", "bat", "net", "glove"],
        acts: &["train", "practice", "compete"],
        helpers: &["coach", "referee"],
        results: &["match", "trophy", "game"],
    },
    Cluster {
        name: "music",
        places: &["studio", "theater", "club"],
        things: &["guitar", "piano", "drum", "violin"],
        acts: &["play", "sing", "rehearse"],
        helpers: &["conductor", "drummer"],
        results: &["song", "concert", "album"],
    },
    Cluster {
        name: "garden",
        places: &["garden", "farm", "greenhouse"],
        things: &["tomato", "rose", "seed", "shovel"],
        acts: &["plant", "water", "dig"],
        helpers: &["farmer", "gardener"],
        results: &["harvest", "flowers", "crop"],
    },
    Cluster {
        name: "ocean",
        places: &["beach", "harbor", "pier"],
        things: &["fish", "shell", "boat", "surfboard"],
        acts: &["swim", "surf", "sail"],
        helpers: &["sailor", "lifeguard"],
        results: &["voyage", "catch", "tide"],
    },
    Cluster {
        name: "school",
        places: &["classroom", "library", "campus"],
        things: &["book", "pencil", "essay", "notebook"],
        acts: &["study", "read", "write"],
        helpers: &["professor", "tutor"],
        results: &["grade", "exam", "diploma"],
    },
    Cluster {
        name: "winter",
        places: &["mountain", "cabin", "rink"],
        things: &["sled", "skates", "scarf", "snowball"],
        acts: &["ski", "skate", "climb"],
        helpers: &["guide", "ranger"],
        results: &["slope", "race", "summit"],
    },
    Cluster {
        name: "art",
        places: &["museum", "gallery", "workshop"],
        things: &["brush", "canvas", "clay", "easel"],
        acts: &["paint", "draw", "sculpt"],
        helpers: &["artist", "curator"],
        results: &["portrait", "sculpture", "mural"],
    },
];

pub const DEFAULT_ENTITIES: &[&str] = &[
    "alice", "bob", "carla", "david", "emma", "frank", "grace", "henry", "irene", "jack", "kate", "liam", "maria",
    "nathan", "olivia", "peter", "quinn", "rosa", "sam", "tina", "uma", "victor", "wendy", "xavier",
];

const DAYS: &[&str] = &["monday", "tuesday", "saturday", "sunday"];

/// Five-sentence event chains. `{E}` is the protagonist; it opens the first
/// sentence and appears in the last.
pub const TEMPLATES: &[[&str; 5]] = &[
    [
        "{E} went to the {place} on {day} .",
        "{E} wanted to {act} with a {thing} .",
        "the {helper} brought a new {thing2} .",
        "they {act} together for hours .",
        "{E} loved the {result} .",
    ],
    [
        "{E} drove to the {place} early .",
        "a {helper} asked for help with the {thing} .",
        "the {thing} was harder than expected .",
        "after a while the {helper} showed how to {act} .",
        "in the end {E} finished the {result} .",
    ],
    [
        "{E} had always dreamed of a {thing} .",
        "one day a {helper} at the {place} offered one .",
        "every {day} they would {act} .",
        "soon the {thing} felt familiar .",
        "{E} was proud of the {result} .",
    ],
    [
        "{E} and a friend visited the {place} .",
        "the friend brought a {thing} .",
        "they decided to {act} all afternoon .",
        "the {helper} cheered for them .",
        "{E} will never forget the {result} .",
    ],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub entities: Vec<String>,
    pub templates: Vec<[String; 5]>,
    pub story_count: usize,
    pub seed: u64,
    /// Train/val/test fractions used when the corpus is split.
    pub split: (f64, f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clusters: CLUSTERS.len(),
            entities: DEFAULT_ENTITIES.iter().map(|s| s.to_string()).collect(),
            templates: TEMPLATES.iter().map(|t| t.map(str::to_string)).collect(),
            story_count: 64,
            seed: 0,
            split: (0.8, 0.1, 0.1),
        }
    }
}

impl SyntheticSpec {
    /// Parses `key = value` lines over the defaults. Keys: `stories`,
    /// `clusters`, `seed`, `entities` (comma separated), `templates` (how many
    /// built-in templates to use), `split` (three comma-separated fractions).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (ln, kv) in crate::config::parse_key_values(text)? {
            let (k, v) = (kv.0.as_str(), kv.1.as_str());
            let bad = || Error::Config(format!("line {ln}: bad value {v:?} for {k}"));
            match k {
                "stories" => spec.story_count = v.parse().map_err(|_| bad())?,
                "clusters" => spec.n_clusters = v.parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "entities" => {
                    spec.entities = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
                }
                "templates" => {
                    let n: usize = v.parse().map_err(|_| bad())?;
                    if n == 0 || n > TEMPLATES.len() {
                        return Err(bad());
                    }
                    spec.templates.truncate(n);
                }
                "split" => {
                    let f: Vec<f64> = v.split(',').map(|x| x.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
                    if f.len() != 3 {
                        return Err(bad());
                    }
                    spec.split = (f[0], f[1], f[2]);
                }
                _ => return Err(Error::Config(format!("line {ln}: unknown key {k}"))),
            }
        }
        Ok(spec)
    }
}

/// Annotations for one synthetic story, written as `story_id,cluster_id,entity`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoryMeta {
    pub story_id: usize,
    pub cluster: usize,
    pub entity: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub stories: Vec<RawParagraph>,
    pub meta: Vec<StoryMeta>,
}

impl SyntheticCorpus {
    pub fn text(&self) -> String {
        corpus_to_text(&self.stories)
    }

    pub fn meta_csv(&self) -> String {
        meta_to_csv(&self.meta)
    }
}

pub fn meta_to_csv(meta: &[StoryMeta]) -> String {
    meta.iter().map(|m| format!("{},{},{}\n", m.story_id, m.cluster, m.entity)).collect()
}

pub fn parse_meta_csv(text: &str) -> Result<Vec<StoryMeta>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Corpus(format!("metadata line {}: expected story_id,cluster_id,entity", i + 1));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(StoryMeta {
                story_id: f[0].parse().map_err(|_| bad())?,
                cluster: f[1].parse().map_err(|_| bad())?,
                entity: f[2].to_string(),
            })
        })
        .collect()
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.entities.is_empty() || spec.templates.is_empty() {
        return Err(Error::Config("entity and template pools must be nonempty".into()));
    }
    if spec.n_clusters == 0 || spec.n_clusters > CLUSTERS.len() {
        return Err(Error::Config(format!("clusters must be in 1..={}", CLUSTERS.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stories = Vec::with_capacity(spec.story_count);
    let mut meta = Vec::with_capacity(spec.story_count);
    for story_id in 0..spec.story_count {
        let cluster = rng.gen_range(0..spec.n_clusters);
        let c = &CLUSTERS[cluster];
        let entity = spec.entities.choose(&mut rng).unwrap().clone();
        let template = spec.templates.choose(&mut rng).unwrap();
        let thing = *c.things.choose(&mut rng).unwrap();
        let thing2 = *c.things.iter().filter(|t| **t != thing).collect::<Vec<_>>().choose(&mut rng).unwrap_or(&&thing);
        let fills = [
            ("{E}", entity.as_str()),
            ("{place}", c.places.choose(&mut rng).unwrap()),
            ("{day}", DAYS.choose(&mut rng).unwrap()),
            ("{act}", c.acts.choose(&mut rng).unwrap()),
            ("{thing2}", thing2),
            ("{thing}", thing),
            ("{helper}", c.helpers.choose(&mut rng).unwrap()),
            ("{result}", c.results.choose(&mut rng).unwrap()),
        ];
        let sentences = template
            .iter()
            .map(|t| fills.iter().fold(t.clone(), |s, (slot, word)| s.replace(slot, word)))
            .collect();
        stories.push(sentences);
        meta.push(StoryMeta { story_id, cluster, entity });
    }
    Ok(SyntheticCorpus { stories, meta })
}

// ---------------------------------------------------------------------------
// Cloze items
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClozeItem {
    pub story: usize,
    pub context: Vec<Vec<usize>>,
    pub candidates: [Vec<usize>; 2],
    pub correct: usize,
}

/// One item per story: the first four sentences as context, its own fifth
/// sentence and the fifth sentence of a story from another cluster as
/// candidates, in random order.
pub fn make_cloze_items<R: Rng>(corpus: &[Paragraph], meta: &[StoryMeta], rng: &mut R) -> Result<Vec<ClozeItem>> {
    if meta.len() != corpus.len() {
        return Err(Error::Corpus(format!("{} metadata rows for {} stories", meta.len(), corpus.len())));
    }
    if let Some(p) = corpus.iter().find(|p| p.len() < 2) {
        return Err(Error::Corpus(format!("paragraph {} is too short for a cloze item", p.id)));
    }
    let first = meta.first().map(|m| m.cluster);
    if meta.iter().all(|m| Some(m.cluster) == first) {
        return Err(Error::Corpus("cloze items need at least two topic clusters".into()));
    }
    let mut items = Vec::with_capacity(corpus.len());
    for (i, p) in corpus.iter().enumerate() {
        let others: Vec<usize> = (0..corpus.len()).filter(|&j| meta[j].cluster != meta[i].cluster).collect();
        let j = *others.choose(rng).expect("two clusters present");
        let m = p.len();
        let right = p.sentences[m - 1].clone();
        let wrong = corpus[j].sentences[corpus[j].len() - 1].clone();
        let correct = rng.gen_range(0..2);
        let candidates = if correct == 0 { [right, wrong] } else { [wrong, right] };
        items.push(ClozeItem { story: i, context: p.sentences[..m - 1].to_vec(), candidates, correct });
    }
    Ok(items)
}
