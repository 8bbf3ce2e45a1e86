//! Token-level fact corpora.
//!
//! Two generators are provided:
//!
//! * **Simple reversal**: every relation is a random fixed-point-free
//!   permutation of the entities, so each `(entity, relation)` pair names one
//!   fact and the inverse query `target inverse ?` has exactly one answer.
//!   All facts are trained in both directions except a held-out set, which is
//!   trained forward only.
//! * **Nonsense comparisons**: disjoint entity pairs joined by one of a small
//!   inventory of comparison relations, each repeated under several filler
//!   preambles; a fraction of the facts is also trained reversed.
//!
//! Entities and relations are single tokens. Documents may carry random
//! filler tokens before and after the fact.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

/// Size of the filler pool used for affixes and preambles.
pub const FILLER_POOL: usize = 100;
/// Number of distinct comparison relations available to the nonsense corpus.
pub const COMPARISON_INVENTORY: usize = 28;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("need at least 2 entities, got {0}")]
    TooFewEntities(usize),
    #[error("need at least 1 relation")]
    NoRelations,
    #[error("{heldout} held-out facts requested but the universe has only {universe} facts")]
    TooManyHeldout { heldout: usize, universe: usize },
    #[error("{requested} comparison words requested but only {available} exist")]
    TooManyComparisonWords { requested: usize, available: usize },
    #[error("reverse fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }
}

/// What a token id stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Pad,
    Mask,
    Sep,
    Entity(usize),
    Relation(usize),
    Inverse(usize),
    Filler(usize),
}

/// Token id space: special tokens, entities, relations, their inverses and
/// filler, all disjoint. `relation_tokens[i]` pairs with `inverse_tokens[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub pad: TokenId,
    pub mask: TokenId,
    pub sep: TokenId,
    pub entity_tokens: Vec<TokenId>,
    pub relation_tokens: Vec<TokenId>,
    pub inverse_tokens: Vec<TokenId>,
    pub filler_tokens: Vec<TokenId>,
}

impl Vocab {
    /// Contiguous layout: `[pad, mask, sep, entities.., relations.., inverses.., filler..]`.
    pub fn new(n_entities: usize, n_relations: usize, n_filler: usize) -> Self {
        let mut next = 3u32;
        let mut take = |n: usize| {
            let ids: Vec<TokenId> = (next..next + n as u32).collect();
            next += n as u32;
            ids
        };
        let entity_tokens = take(n_entities);
        let relation_tokens = take(n_relations);
        let inverse_tokens = take(n_relations);
        let filler_tokens = take(n_filler);
        Self { pad: 0, mask: 1, sep: 2, entity_tokens, relation_tokens, inverse_tokens, filler_tokens }
    }

    pub fn size(&self) -> usize {
        3 + self.entity_tokens.len()
            + self.relation_tokens.len()
            + self.inverse_tokens.len()
            + self.filler_tokens.len()
    }

    pub fn role(&self, token: TokenId) -> Option<TokenRole> {
        if token == self.pad {
            return Some(TokenRole::Pad);
        }
        if token == self.mask {
            return Some(TokenRole::Mask);
        }
        if token == self.sep {
            return Some(TokenRole::Sep);
        }
        let find = |ids: &[TokenId]| ids.iter().position(|&t| t == token);
        find(&self.entity_tokens)
            .map(TokenRole::Entity)
            .or_else(|| find(&self.relation_tokens).map(TokenRole::Relation))
            .or_else(|| find(&self.inverse_tokens).map(TokenRole::Inverse))
            .or_else(|| find(&self.filler_tokens).map(TokenRole::Filler))
    }

    /// The paired token of a relation or inverse relation. Applying it twice
    /// returns the original token.
    pub fn inverse(&self, relation: TokenId) -> Option<TokenId> {
        match self.role(relation)? {
            TokenRole::Relation(i) => Some(self.inverse_tokens[i]),
            TokenRole::Inverse(i) => Some(self.relation_tokens[i]),
            _ => None,
        }
    }

    pub fn is_entity(&self, token: TokenId) -> bool {
        matches!(self.role(token), Some(TokenRole::Entity(_)))
    }

    pub fn is_filler(&self, token: TokenId) -> bool {
        matches!(self.role(token), Some(TokenRole::Filler(_)))
    }
}

/// A `(source, relation, target)` triple in surface order. The forward form
/// carries a relation token; its reverse swaps the entities and carries the
/// paired inverse token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub source: TokenId,
    pub relation: TokenId,
    pub target: TokenId,
    pub direction: Direction,
}

impl Fact {
    pub fn forward(source: TokenId, relation: TokenId, target: TokenId) -> Self {
        Self { source, relation, target, direction: Direction::Forward }
    }

    pub fn tokens(&self) -> [TokenId; 3] {
        [self.source, self.relation, self.target]
    }
}

impl fmt::Display for Fact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.source, self.relation, self.target)
    }
}

/// Swaps the entities, replaces the relation by its pair and flips the
/// direction.
///
/// # Panics
/// If `fact.relation` is not a relation token of `vocab`.
pub fn reverse_fact(fact: &Fact, vocab: &Vocab) -> Fact {
    Fact {
        source: fact.target,
        relation: vocab.inverse(fact.relation).expect("fact relation must be a relation token"),
        target: fact.source,
        direction: fact.direction.flip(),
    }
}

/// One training sequence realizing a fact in one direction.
///
/// Spans are named by the *forward* fact: `source_span` always covers entity
/// A, so in a reverse document it comes after the target span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub tokens: Vec<TokenId>,
    pub source_span: Range<usize>,
    pub relation_span: Range<usize>,
    pub target_span: Range<usize>,
    /// Index into [`Corpus::facts`].
    pub fact_id: usize,
    pub direction: Direction,
}

impl Document {
    /// Builds `prefix ++ fact ++ suffix` for the fact seen in `direction`.
    pub fn realize(
        fact: &Fact,
        fact_id: usize,
        direction: Direction,
        prefix: &[TokenId],
        suffix: &[TokenId],
        vocab: &Vocab,
    ) -> Self {
        let surface = match direction {
            Direction::Forward => *fact,
            Direction::Reverse => reverse_fact(fact, vocab),
        };
        let p = prefix.len();
        let mut tokens = Vec::with_capacity(p + 3 + suffix.len());
        tokens.extend_from_slice(prefix);
        tokens.extend_from_slice(&surface.tokens());
        tokens.extend_from_slice(suffix);
        let (source_span, target_span) = match direction {
            Direction::Forward => (p..p + 1, p + 2..p + 3),
            Direction::Reverse => (p + 2..p + 3, p..p + 1),
        };
        Self { tokens, source_span, relation_span: p + 1..p + 2, target_span, fact_id, direction }
    }

    /// The fact tokens in surface order (affixes dropped).
    pub fn surface(&self) -> Fact {
        let (first, last) = match self.direction {
            Direction::Forward => (&self.source_span, &self.target_span),
            Direction::Reverse => (&self.target_span, &self.source_span),
        };
        Fact {
            source: self.tokens[first.start],
            relation: self.tokens[self.relation_span.start],
            target: self.tokens[last.start],
            direction: self.direction,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusConfig {
    SimpleReversal {
        n_entities: usize,
        n_relations: usize,
        n_heldout: usize,
        max_affix: usize,
    },
    Nonsense {
        n_comparisons: usize,
        n_comparison_words: usize,
        repeats: usize,
        reverse_fraction: f64,
        max_preamble: usize,
    },
}

impl CorpusConfig {
    /// 1,000 entities, 20 relations, 200 held-out facts, up to 5 affix tokens.
    pub fn simple_reversal_standard() -> Self {
        CorpusConfig::SimpleReversal { n_entities: 1000, n_relations: 20, n_heldout: 200, max_affix: 5 }
    }

    pub fn generate(&self, seed: u64) -> Result<Corpus, CorpusError> {
        match *self {
            CorpusConfig::SimpleReversal { n_entities, n_relations, n_heldout, max_affix } => {
                generate_simple_reversal(n_entities, n_relations, n_heldout, max_affix, seed)
            }
            CorpusConfig::Nonsense {
                n_comparisons,
                n_comparison_words,
                repeats,
                reverse_fraction,
                max_preamble,
            } => generate_nonsense_with_preamble(
                n_comparisons,
                n_comparison_words,
                repeats,
                reverse_fraction,
                max_preamble,
                seed,
            ),
        }
    }

    /// Longest document this config can produce.
    pub fn max_doc_len(&self) -> usize {
        match *self {
            CorpusConfig::SimpleReversal { max_affix, .. } => 3 + 2 * max_affix,
            CorpusConfig::Nonsense { max_preamble, .. } => 3 + max_preamble,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config: CorpusConfig,
    pub n_facts: usize,
    pub n_train_docs: usize,
    pub n_heldout: usize,
    pub vocab_size: usize,
}

/// A generated corpus. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    /// Forward universe; `Document::fact_id` indexes here.
    pub facts: Vec<Fact>,
    pub train_docs: Vec<Document>,
    /// Ids of facts trained forward only, sorted.
    pub heldout_ids: Vec<usize>,
    pub heldout_facts: Vec<Fact>,
    pub manifest: CorpusManifest,
}

fn sample_affix(rng: &mut ChaCha8Rng, vocab: &Vocab, max_len: usize) -> Vec<TokenId> {
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| *vocab.filler_tokens.choose(rng).expect("filler pool is non-empty")).collect()
}

fn derangement(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Simple reversal corpus: `n_entities * n_relations` facts, each trained in
/// both directions except `n_heldout` facts trained forward only.
pub fn generate_simple_reversal(
    n_entities: usize,
    n_relations: usize,
    n_heldout: usize,
    max_affix: usize,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if n_entities < 2 {
        return Err(CorpusError::TooFewEntities(n_entities));
    }
    if n_relations == 0 {
        return Err(CorpusError::NoRelations);
    }
    let universe = n_entities * n_relations;
    if n_heldout >= universe {
        return Err(CorpusError::TooManyHeldout { heldout: n_heldout, universe });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::new(n_entities, n_relations, FILLER_POOL);

    let mut facts = Vec::with_capacity(universe);
    for r in 0..n_relations {
        let perm = derangement(&mut rng, n_entities);
        for (a, &b) in perm.iter().enumerate() {
            facts.push(Fact::forward(
                vocab.entity_tokens[a],
                vocab.relation_tokens[r],
                vocab.entity_tokens[b],
            ));
        }
    }

    let mut heldout_ids = index::sample(&mut rng, universe, n_heldout).into_vec();
    heldout_ids.sort_unstable();
    let heldout: HashSet<usize> = heldout_ids.iter().copied().collect();

    let mut train_docs = Vec::with_capacity(2 * universe - n_heldout);
    for (id, fact) in facts.iter().enumerate() {
        for direction in [Direction::Forward, Direction::Reverse] {
            if direction == Direction::Reverse && heldout.contains(&id) {
                continue;
            }
            let prefix = sample_affix(&mut rng, &vocab, max_affix);
            let suffix = sample_affix(&mut rng, &vocab, max_affix);
            train_docs.push(Document::realize(fact, id, direction, &prefix, &suffix, &vocab));
        }
    }

    let heldout_facts = heldout_ids.iter().map(|&i| facts[i]).collect();
    let manifest = CorpusManifest {
        seed,
        config: CorpusConfig::SimpleReversal { n_entities, n_relations, n_heldout, max_affix },
        n_facts: universe,
        n_train_docs: train_docs.len(),
        n_heldout,
        vocab_size: vocab.size(),
    };
    Ok(Corpus { vocab, facts, train_docs, heldout_ids, heldout_facts, manifest })
}

/// Nonsense comparison corpus with filler preambles of up to 5 tokens.
pub fn generate_nonsense(
    n_comparisons: usize,
    n_comparison_words: usize,
    repeats: usize,
    reverse_fraction: f64,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    generate_nonsense_with_preamble(n_comparisons, n_comparison_words, repeats, reverse_fraction, 5, seed)
}

pub fn generate_nonsense_with_preamble(
    n_comparisons: usize,
    n_comparison_words: usize,
    repeats: usize,
    reverse_fraction: f64,
    max_preamble: usize,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if !(0.0..=1.0).contains(&reverse_fraction) {
        return Err(CorpusError::InvalidFraction(reverse_fraction));
    }
    if n_comparison_words > COMPARISON_INVENTORY {
        return Err(CorpusError::TooManyComparisonWords {
            requested: n_comparison_words,
            available: COMPARISON_INVENTORY,
        });
    }
    if n_comparison_words == 0 {
        return Err(CorpusError::NoRelations);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::new(2 * n_comparisons, n_comparison_words, FILLER_POOL);
    let facts: Vec<Fact> = (0..n_comparisons)
        .map(|i| {
            let rel = rng.random_range(0..n_comparison_words);
            Fact::forward(
                vocab.entity_tokens[2 * i],
                vocab.relation_tokens[rel],
                vocab.entity_tokens[2 * i + 1],
            )
        })
        .collect();

    // The epsilon keeps products like 0.29 * 100 from flooring to 28.
    let n_reversed = ((reverse_fraction * n_comparisons as f64) + 1e-9).floor() as usize;
    let reversed: HashSet<usize> =
        index::sample(&mut rng, n_comparisons, n_reversed).into_iter().collect();

    let mut train_docs = Vec::new();
    for (id, fact) in facts.iter().enumerate() {
        for direction in [Direction::Forward, Direction::Reverse] {
            if direction == Direction::Reverse && !reversed.contains(&id) {
                continue;
            }
            for _ in 0..repeats {
                let preamble = sample_affix(&mut rng, &vocab, max_preamble);
                train_docs.push(Document::realize(fact, id, direction, &preamble, &[], &vocab));
            }
        }
    }
    let heldout_ids: Vec<usize> = (0..n_comparisons).filter(|i| !reversed.contains(i)).collect();
    let heldout_facts = heldout_ids.iter().map(|&i| facts[i]).collect();
    let manifest = CorpusManifest {
        seed,
        config: CorpusConfig::Nonsense {
            n_comparisons,
            n_comparison_words,
            repeats,
            reverse_fraction,
            max_preamble,
        },
        n_facts: n_comparisons,
        n_train_docs: train_docs.len(),
        n_heldout: heldout_ids.len(),
        vocab_size: vocab.size(),
    };
    Ok(Corpus { vocab, facts, train_docs, heldout_ids, heldout_facts, manifest })
}

/// A document in the training set that realizes a held-out fact in reverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leak {
    pub doc_index: usize,
    pub fact_id: usize,
}

impl Corpus {
    pub fn max_doc_len(&self) -> usize {
        self.train_docs.iter().map(Document::len).max().unwrap_or(0)
    }

    /// Scans every training document's tokens for the reverse surface form
    /// of any held-out fact. Independent of the recorded `fact_id`s.
    pub fn leakage_audit(&self) -> Vec<Leak> {
        let reversed: HashSet<[TokenId; 3]> = self
            .heldout_ids
            .iter()
            .map(|&i| reverse_fact(&self.facts[i], &self.vocab).tokens())
            .collect();
        let mut leaks = Vec::new();
        for (doc_index, doc) in self.train_docs.iter().enumerate() {
            for w in doc.tokens.windows(3) {
                let key = [w[0], w[1], w[2]];
                if reversed.contains(&key) {
                    let fact_id = self
                        .heldout_ids
                        .iter()
                        .copied()
                        .find(|&i| reverse_fact(&self.facts[i], &self.vocab).tokens() == key)
                        .expect("key came from a held-out fact");
                    leaks.push(Leak { doc_index, fact_id });
                }
            }
        }
        leaks
    }

    /// Writes `manifest`, `vocab`, `universe.facts`, `train.tokens` and
    /// `heldout.facts` into `dir` (see `docs/formats.md`).
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let manifest = toml::to_string(&self.manifest).map_err(|e| CorpusError::Parse {
            file: "manifest".into(),
            line: 0,
            msg: e.to_string(),
        })?;
        fs::write(dir.join("manifest"), manifest)?;
        fs::write(dir.join("vocab"), self.vocab_table())?;

        let facts_text = |facts: &mut dyn Iterator<Item = &Fact>| {
            facts.map(|f| format!("{f}\n")).collect::<String>()
        };
        fs::write(dir.join("universe.facts"), facts_text(&mut self.facts.iter()))?;
        fs::write(dir.join("heldout.facts"), facts_text(&mut self.heldout_facts.iter()))?;

        let mut train = String::new();
        for doc in &self.train_docs {
            train.push_str(&format_document(doc));
            train.push('\n');
        }
        fs::write(dir.join("train.tokens"), train)?;
        Ok(())
    }

    fn vocab_table(&self) -> String {
        let mut rows: Vec<(TokenId, String)> = vec![
            (self.vocab.pad, "pad".into()),
            (self.vocab.mask, "mask".into()),
            (self.vocab.sep, "sep".into()),
        ];
        let groups = [
            ("entity", &self.vocab.entity_tokens),
            ("relation", &self.vocab.relation_tokens),
            ("inverse", &self.vocab.inverse_tokens),
            ("filler", &self.vocab.filler_tokens),
        ];
        for (role, ids) in groups {
            rows.extend(ids.iter().enumerate().map(|(i, &t)| (t, format!("{role} {i}"))));
        }
        rows.sort_by_key(|(t, _)| *t);
        rows.into_iter().map(|(t, r)| format!("{t} {r}\n")).collect()
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let read = |name: &str| fs::read_to_string(dir.join(name));
        let manifest: CorpusManifest = toml::from_str(&read("manifest")?).map_err(|e| {
            CorpusError::Parse { file: "manifest".into(), line: 0, msg: e.to_string() }
        })?;
        let vocab = parse_vocab(&read("vocab")?)?;
        let facts = parse_facts("universe.facts", &read("universe.facts")?)?;
        let heldout_facts = parse_facts("heldout.facts", &read("heldout.facts")?)?;
        let train_docs = read("train.tokens")?
            .lines()
            .enumerate()
            .map(|(i, line)| {
                parse_document(line).map_err(|msg| CorpusError::Parse {
                    file: "train.tokens".into(),
                    line: i + 1,
                    msg,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let heldout_ids = heldout_facts
            .iter()
            .enumerate()
            .map(|(line, h)| {
                facts.iter().position(|f| f == h).ok_or_else(|| CorpusError::Parse {
                    file: "heldout.facts".into(),
                    line: line + 1,
                    msg: format!("fact {h} is not in universe.facts"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { vocab, facts, train_docs, heldout_ids, heldout_facts, manifest })
    }
}

/// `tokens... | s0 s1 r0 r1 t0 t1 | fact_id f|r`
pub fn format_document(doc: &Document) -> String {
    let toks: Vec<String> = doc.tokens.iter().map(|t| t.to_string()).collect();
    let dir = match doc.direction {
        Direction::Forward => 'f',
        Direction::Reverse => 'r',
    };
    format!(
        "{} | {} {} {} {} {} {} | {} {}",
        toks.join(" "),
        doc.source_span.start,
        doc.source_span.end,
        doc.relation_span.start,
        doc.relation_span.end,
        doc.target_span.start,
        doc.target_span.end,
        doc.fact_id,
        dir
    )
}

pub fn parse_document(line: &str) -> Result<Document, String> {
    let parts: Vec<&str> = line.split(" | ").collect();
    let [toks, spans, meta] = parts.as_slice() else {
        return Err("expected three `|`-separated fields".into());
    };
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    let tokens = toks
        .split_whitespace()
        .map(|s| s.parse::<TokenId>().map_err(|e| format!("{s:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    let s: Vec<usize> = spans.split_whitespace().map(num).collect::<Result<_, _>>()?;
    if s.len() != 6 {
        return Err(format!("expected 6 span indices, found {}", s.len()));
    }
    let m: Vec<&str> = meta.split_whitespace().collect();
    let [fact_id, dir] = m.as_slice() else {
        return Err("expected `fact_id direction`".into());
    };
    let direction = match *dir {
        "f" => Direction::Forward,
        "r" => Direction::Reverse,
        other => return Err(format!("unknown direction {other:?}")),
    };
    let doc = Document {
        source_span: s[0]..s[1],
        relation_span: s[2]..s[3],
        target_span: s[4]..s[5],
        tokens,
        fact_id: num(fact_id)?,
        direction,
    };
    if [&doc.source_span, &doc.relation_span, &doc.target_span]
        .iter()
        .any(|r| r.end > doc.tokens.len() || r.start >= r.end)
    {
        return Err("span out of bounds".into());
    }
    Ok(doc)
}

fn parse_facts(file: &str, text: &str) -> Result<Vec<Fact>, CorpusError> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let ids: Vec<TokenId> = line
                .split_whitespace()
                .map(|s| s.parse())
                .collect::<Result<_, _>>()
                .map_err(|e: std::num::ParseIntError| CorpusError::Parse {
                    file: file.into(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            match ids.as_slice() {
                &[s, r, t] => Ok(Fact::forward(s, r, t)),
                _ => Err(CorpusError::Parse {
                    file: file.into(),
                    line: i + 1,
                    msg: "expected `source relation target`".into(),
                }),
            }
        })
        .collect()
}

fn parse_vocab(text: &str) -> Result<Vocab, CorpusError> {
    let mut vocab = Vocab {
        pad: 0,
        mask: 0,
        sep: 0,
        entity_tokens: Vec::new(),
        relation_tokens: Vec::new(),
        inverse_tokens: Vec::new(),
        filler_tokens: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let err = |msg: &str| CorpusError::Parse { file: "vocab".into(), line: i + 1, msg: msg.into() };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let id: TokenId = fields.first().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad id"))?;
        match fields.get(1).copied() {
            Some("pad") => vocab.pad = id,
            Some("mask") => vocab.mask = id,
            Some("sep") => vocab.sep = id,
            Some(role @ ("entity" | "relation" | "inverse" | "filler")) => {
                let list = match role {
                    "entity" => &mut vocab.entity_tokens,
                    "relation" => &mut vocab.relation_tokens,
                    "inverse" => &mut vocab.inverse_tokens,
                    _ => &mut vocab.filler_tokens,
                };
                let idx: usize =
                    fields.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| err("bad index"))?;
                if idx != list.len() {
                    return Err(err("role indices must be listed in order"));
                }
                list.push(id);
            }
            _ => return Err(err("unknown role")),
        }
    }
    if vocab.relation_tokens.len() != vocab.inverse_tokens.len() {
        return Err(CorpusError::Parse {
            file: "vocab".into(),
            line: 0,
            msg: "every relation needs exactly one inverse".into(),
        });
    }
    Ok(vocab)
}
