//! Turning documents into training examples.
//!
//! * NTP: the raw document, causal attention, loss on every next token.
//! * MLM: fact slots replaced by `[MASK]`, bidirectional attention, loss only
//!   at masked positions.
//! * NTP+Masking: `masked(doc) [SEP] doc` under causal attention, loss only
//!   on the unmasked continuation after `[SEP]`.
//!
//! Which fact slots may be masked is set by a [`MaskingPolicy`]. Affix tokens
//! are never masked and masked positions always become `[MASK]`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, TokenId, Vocab};
use crate::model::AttentionMode;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("masking policy has no maskable slots")]
    EmptyPolicy,
    #[error("none of the maskable slots ({0}) occur in the document")]
    Inadmissible(SlotSet),
    #[error("token rate {0} must lie in (0, 1)")]
    InvalidRate(f64),
    #[error("ratio range ({0}, {1}) must satisfy 0 <= lo < hi <= 1")]
    InvalidRange(f64, f64),
    #[error("empty document")]
    EmptyDocument,
    #[error("bad example line: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ntp,
    Mlm,
    NtpMasking,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Ntp, Objective::Mlm, Objective::NtpMasking];

    pub fn attention(self) -> AttentionMode {
        match self {
            Objective::Mlm => AttentionMode::Bidirectional,
            Objective::Ntp | Objective::NtpMasking => AttentionMode::Causal,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Ntp => "ntp",
            Objective::Mlm => "mlm",
            Objective::NtpMasking => "ntp+masking",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ntp" => Ok(Objective::Ntp),
            "mlm" => Ok(Objective::Mlm),
            "ntp+masking" | "ntp-masking" | "ntpmasking" | "ntpm" => Ok(Objective::NtpMasking),
            other => Err(format!("unknown objective {other:?} (ntp, mlm, ntp+masking)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    Source,
    Relation,
    Target,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Source, Slot::Relation, Slot::Target];

    fn bit(self) -> u8 {
        match self {
            Slot::Source => 1,
            Slot::Relation => 2,
            Slot::Target => 4,
        }
    }

    fn letter(self) -> char {
        match self {
            Slot::Source => 'S',
            Slot::Relation => 'R',
            Slot::Target => 'T',
        }
    }
}

/// A subset of `{Source, Relation, Target}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SlotSet(u8);

impl SlotSet {
    pub const EMPTY: SlotSet = SlotSet(0);
    pub const ALL: SlotSet = SlotSet(7);

    pub fn of(slots: &[Slot]) -> Self {
        SlotSet(slots.iter().fold(0, |acc, s| acc | s.bit()))
    }

    pub fn contains(self, slot: Slot) -> bool {
        self.0 & slot.bit() != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Slot> {
        Slot::ALL.into_iter().filter(move |&s| self.contains(s))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for SlotSet {
    /// `S`, `R`, `T` joined by `+`, e.g. `S+T`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|s| s.letter().to_string()).collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for SlotSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = SlotSet::EMPTY;
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            let slot = match part.to_ascii_lowercase().as_str() {
                "s" | "source" => Slot::Source,
                "r" | "relation" => Slot::Relation,
                "t" | "target" => Slot::Target,
                other => return Err(format!("unknown slot {other:?}")),
            };
            set.0 |= slot.bit();
        }
        if set.is_empty() {
            return Err("empty slot set".into());
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MaskMode {
    /// Mask one whole maskable slot, chosen uniformly.
    ExactlyOneSlot,
    /// Multi-slot sweep variant: each example masks one member slot, chosen
    /// uniformly among the members present.
    SlotPairs,
    /// Mask each maskable token independently with this probability.
    TokenRate { rate: f64 },
    /// Draw a ratio uniformly from `(lo, hi)` and mask that fraction of the
    /// maskable tokens.
    RatioRange { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub maskable: SlotSet,
    pub mode: MaskMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationKind {
    NeverMaskSource,
    NeverMaskTarget,
}

impl MaskingPolicy {
    pub fn new(maskable: SlotSet, mode: MaskMode) -> Result<Self, ObjectiveError> {
        let p = Self { maskable, mode };
        p.validate()?;
        Ok(p)
    }

    /// Exactly one of source, relation or target per example.
    pub fn standard() -> Self {
        Self { maskable: SlotSet::ALL, mode: MaskMode::ExactlyOneSlot }
    }

    /// Sweep variant over `maskable`: single slots use [`MaskMode::ExactlyOneSlot`],
    /// larger sets [`MaskMode::SlotPairs`].
    pub fn sweep(maskable: SlotSet) -> Self {
        let mode = if maskable.len() == 1 { MaskMode::ExactlyOneSlot } else { MaskMode::SlotPairs };
        Self { maskable, mode }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.maskable.is_empty() {
            return Err(ObjectiveError::EmptyPolicy);
        }
        match self.mode {
            MaskMode::TokenRate { rate } if !(rate > 0.0 && rate < 1.0) => {
                Err(ObjectiveError::InvalidRate(rate))
            }
            MaskMode::RatioRange { lo, hi } if !(0.0 <= lo && lo < hi && hi <= 1.0) => {
                Err(ObjectiveError::InvalidRange(lo, hi))
            }
            _ => Ok(()),
        }
    }

    /// Slot set, plus the mode for the token-level modes.
    pub fn label(&self) -> String {
        match self.mode {
            MaskMode::ExactlyOneSlot | MaskMode::SlotPairs => self.maskable.to_string(),
            MaskMode::TokenRate { rate } => format!("{}:rate={rate}", self.maskable),
            MaskMode::RatioRange { lo, hi } => format!("{}:ratio={lo}-{hi}", self.maskable),
        }
    }
}

/// The 7 non-empty subsets of `{Source, Relation, Target}`.
pub fn enumerate_sweep_policies() -> Vec<MaskingPolicy> {
    (1u8..8).map(|bits| MaskingPolicy::sweep(SlotSet(bits))).collect()
}

pub fn ablation_policy(kind: AblationKind) -> MaskingPolicy {
    let maskable = match kind {
        AblationKind::NeverMaskSource => SlotSet::of(&[Slot::Relation, Slot::Target]),
        AblationKind::NeverMaskTarget => SlotSet::of(&[Slot::Source, Slot::Relation]),
    };
    MaskingPolicy::sweep(maskable)
}

/// One objective-specific training sequence.
///
/// `target[i]` is the token predicted at position `i` (the pad id where
/// nothing is defined) and only positions with `loss_mask[i]` contribute to
/// the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub attention: AttentionMode,
}

impl TrainingExample {
    pub fn loss_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

fn slot_span(doc: &Document, slot: Slot) -> std::ops::Range<usize> {
    match slot {
        Slot::Source => doc.source_span.clone(),
        Slot::Relation => doc.relation_span.clone(),
        Slot::Target => doc.target_span.clone(),
    }
}

/// Positions of `doc` to replace with `[MASK]` under `policy` (sorted).
pub fn select_mask_positions(
    doc: &Document,
    policy: &MaskingPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, ObjectiveError> {
    policy.validate()?;
    let present: Vec<Slot> = policy.maskable.iter().filter(|&s| !slot_span(doc, s).is_empty()).collect();
    if present.is_empty() {
        return Err(ObjectiveError::Inadmissible(policy.maskable));
    }
    let mut candidates: Vec<usize> = present.iter().flat_map(|&s| slot_span(doc, s)).collect();
    candidates.sort_unstable();
    let mut positions: Vec<usize> = match policy.mode {
        MaskMode::ExactlyOneSlot | MaskMode::SlotPairs => {
            let slot = present[rng.random_range(0..present.len())];
            slot_span(doc, slot).collect()
        }
        MaskMode::TokenRate { rate } => {
            candidates.into_iter().filter(|_| rng.random_bool(rate)).collect()
        }
        MaskMode::RatioRange { lo, hi } => {
            let ratio = rng.random_range(lo..hi);
            let k = ((ratio * candidates.len() as f64).round() as usize).min(candidates.len());
            index::sample(rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect()
        }
    };
    positions.sort_unstable();
    Ok(positions)
}

fn causal_targets(input: &[TokenId], pad: TokenId) -> Vec<TokenId> {
    input.iter().skip(1).copied().chain(std::iter::once(pad)).collect()
}

/// Next-token prediction on the raw document.
pub fn build_ntp(doc: &Document, vocab: &Vocab) -> TrainingExample {
    let n = doc.tokens.len();
    TrainingExample {
        input: doc.tokens.clone(),
        target: causal_targets(&doc.tokens, vocab.pad),
        loss_mask: (0..n).map(|i| i + 1 < n).collect(),
        attention: AttentionMode::Causal,
    }
}

/// Masked-token prediction under bidirectional attention.
pub fn build_mlm(
    doc: &Document,
    policy: &MaskingPolicy,
    vocab: &Vocab,
    seed: u64,
) -> Result<TrainingExample, ObjectiveError> {
    if doc.tokens.is_empty() {
        return Err(ObjectiveError::EmptyDocument);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = select_mask_positions(doc, policy, &mut rng)?;
    let n = doc.tokens.len();
    let mut input = doc.tokens.clone();
    let mut target = vec![vocab.pad; n];
    let mut loss_mask = vec![false; n];
    for &p in &positions {
        input[p] = vocab.mask;
        target[p] = doc.tokens[p];
        loss_mask[p] = true;
    }
    Ok(TrainingExample { input, target, loss_mask, attention: AttentionMode::Bidirectional })
}

/// `masked(doc) [SEP] doc` with next-token loss only on the continuation.
pub fn build_ntp_masking(
    doc: &Document,
    policy: &MaskingPolicy,
    vocab: &Vocab,
    seed: u64,
) -> Result<TrainingExample, ObjectiveError> {
    if doc.tokens.is_empty() {
        return Err(ObjectiveError::EmptyDocument);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = select_mask_positions(doc, policy, &mut rng)?;
    let n = doc.tokens.len();
    let mut input = doc.tokens.clone();
    for &p in &positions {
        input[p] = vocab.mask;
    }
    input.push(vocab.sep);
    input.extend_from_slice(&doc.tokens);
    let total = input.len();
    let target = causal_targets(&input, vocab.pad);
    // Position n holds [SEP] and predicts the first continuation token; the
    // last position has nothing to predict.
    let loss_mask = (0..total).map(|i| i >= n && i + 1 < total).collect();
    Ok(TrainingExample { input, target, loss_mask, attention: AttentionMode::Causal })
}

/// `input | target | mask | mode`, token ids space-separated, mask as 0/1.
pub fn format_example(ex: &TrainingExample) -> String {
    let join = |v: &[TokenId]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    let mask: Vec<&str> = ex.loss_mask.iter().map(|&m| if m { "1" } else { "0" }).collect();
    format!("{} | {} | {} | {}", join(&ex.input), join(&ex.target), mask.join(" "), ex.attention.as_str())
}

pub fn parse_example(line: &str) -> Result<TrainingExample, ObjectiveError> {
    let parts: Vec<&str> = line.split(" | ").collect();
    let [input, target, mask, mode] = parts.as_slice() else {
        return Err(ObjectiveError::Parse("expected 4 `|`-separated fields".into()));
    };
    let ids = |s: &str| {
        s.split_whitespace()
            .map(|t| t.parse::<TokenId>().map_err(|e| ObjectiveError::Parse(e.to_string())))
            .collect::<Result<Vec<_>, _>>()
    };
    let loss_mask = mask
        .split_whitespace()
        .map(|m| match m {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(ObjectiveError::Parse(format!("bad mask bit {other:?}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let attention = match mode.trim() {
        "causal" => AttentionMode::Causal,
        "bidirectional" => AttentionMode::Bidirectional,
        other => return Err(ObjectiveError::Parse(format!("bad mode {other:?}"))),
    };
    let ex = TrainingExample { input: ids(input)?, target: ids(target)?, loss_mask, attention };
    if ex.input.len() != ex.target.len() || ex.input.len() != ex.loss_mask.len() {
        return Err(ObjectiveError::Parse("fields differ in length".into()));
    }
    Ok(ex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Direction, Fact};

    fn setup() -> (Vocab, Document) {
        let v = Vocab::new(4, 1, 10);
        let f = Fact::forward(v.entity_tokens[0], v.relation_tokens[0], v.entity_tokens[1]);
        let doc = Document::realize(&f, 0, Direction::Forward, &[], &[], &v);
        (v, doc)
    }

    #[test]
    fn ntp_single_token_has_no_loss() {
        let (v, mut doc) = setup();
        doc.tokens.truncate(1);
        let ex = build_ntp(&doc, &v);
        assert_eq!(ex.loss_mask, vec![false]);
    }

    #[test]
    fn ntp_shifts_targets() {
        let (v, doc) = setup();
        let ex = build_ntp(&doc, &v);
        assert_eq!(ex.input, doc.tokens);
        assert_eq!(&ex.target[..2], &doc.tokens[1..]);
        assert_eq!(ex.loss_mask, vec![true, true, false]);
        assert_eq!(ex.attention, AttentionMode::Causal);
    }

    #[test]
    fn relation_only_policy_always_masks_relation() {
        let (v, doc) = setup();
        let policy = MaskingPolicy::sweep(SlotSet::of(&[Slot::Relation]));
        for seed in 0..20 {
            let ex = build_mlm(&doc, &policy, &v, seed).unwrap();
            assert_eq!(ex.input, vec![doc.tokens[0], v.mask, doc.tokens[2]]);
            assert_eq!(ex.loss_mask, vec![false, true, false]);
            assert_eq!(ex.target[1], doc.tokens[1]);
        }
    }

    #[test]
    fn ntp_masking_layout_for_source_mask() {
        let (v, doc) = setup();
        let policy = MaskingPolicy::sweep(SlotSet::of(&[Slot::Source]));
        let ex = build_ntp_masking(&doc, &policy, &v, 3).unwrap();
        let (a, r, b) = (doc.tokens[0], doc.tokens[1], doc.tokens[2]);
        assert_eq!(ex.input, vec![v.mask, r, b, v.sep, a, r, b]);
        assert_eq!(ex.loss_mask, vec![false, false, false, true, true, true, false]);
        assert_eq!(&ex.target[3..6], &[a, r, b]);
    }

    #[test]
    fn policy_validation() {
        assert_eq!(
            MaskingPolicy::new(SlotSet::EMPTY, MaskMode::ExactlyOneSlot),
            Err(ObjectiveError::EmptyPolicy)
        );
        assert!(MaskingPolicy::new(SlotSet::ALL, MaskMode::TokenRate { rate: 1.0 }).is_err());
        assert!(MaskingPolicy::new(SlotSet::ALL, MaskMode::RatioRange { lo: 0.5, hi: 0.5 }).is_err());
        let (v, doc) = setup();
        let empty = MaskingPolicy { maskable: SlotSet::EMPTY, mode: MaskMode::ExactlyOneSlot };
        assert_eq!(build_ntp_masking(&doc, &empty, &v, 0), Err(ObjectiveError::EmptyPolicy));
    }

    #[test]
    fn slot_set_parses_and_prints() {
        let s: SlotSet = "source+target".parse().unwrap();
        assert_eq!(s.to_string(), "S+T");
        assert_eq!("S,R,T".parse::<SlotSet>().unwrap(), SlotSet::ALL);
        assert!("x".parse::<SlotSet>().is_err());
    }

    #[test]
    fn example_line_round_trips() {
        let (v, doc) = setup();
        let ex = build_ntp_masking(&doc, &MaskingPolicy::standard(), &v, 1).unwrap();
        assert_eq!(parse_example(&format_example(&ex)).unwrap(), ex);
    }
}
