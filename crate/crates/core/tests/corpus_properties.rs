//! Count, leakage, span and serialization properties of generated corpora.

use std::collections::{HashMap, HashSet};

use proptest::prelude::*;

use revcurse::corpus::{
    generate_nonsense, generate_simple_reversal, reverse_fact, Corpus, CorpusError, Direction, Fact, TokenId,
};

/// Independent scan: every 3-token window of every document against the
/// reverse surface form of every held-out fact.
fn brute_force_leaks(corpus: &Corpus) -> usize {
    let mut leaks = 0;
    for doc in &corpus.train_docs {
        for w in doc.tokens.windows(3) {
            for h in &corpus.heldout_facts {
                let inv = corpus.vocab.inverse(h.relation).unwrap();
                if w == [h.target, inv, h.source] {
                    leaks += 1;
                }
            }
        }
    }
    leaks
}

fn directions_by_fact(corpus: &Corpus) -> HashMap<[TokenId; 3], HashSet<Direction>> {
    let mut seen: HashMap<[TokenId; 3], HashSet<Direction>> = HashMap::new();
    for doc in &corpus.train_docs {
        let s = doc.surface();
        let key = match s.direction {
            Direction::Forward => s.tokens(),
            Direction::Reverse => reverse_fact(&s, &corpus.vocab).tokens(),
        };
        seen.entry(key).or_default().insert(s.direction);
    }
    seen
}

fn check_spans(corpus: &Corpus) {
    for doc in &corpus.train_docs {
        let spans = [&doc.source_span, &doc.relation_span, &doc.target_span];
        let mut covered = vec![false; doc.len()];
        for span in spans {
            assert!(span.end <= doc.len() && span.start < span.end);
            for i in span.clone() {
                assert!(!covered[i], "overlapping spans in {doc:?}");
                covered[i] = true;
            }
        }
        for (i, &t) in doc.tokens.iter().enumerate() {
            if !covered[i] {
                assert!(corpus.vocab.is_filler(t), "non-filler token {t} outside spans");
            }
        }
        let fact = corpus.facts[doc.fact_id];
        assert_eq!(doc.tokens[doc.source_span.start], fact.source);
        assert_eq!(doc.tokens[doc.target_span.start], fact.target);
        let rel = doc.tokens[doc.relation_span.start];
        match doc.direction {
            Direction::Forward => assert_eq!(rel, fact.relation),
            Direction::Reverse => assert_eq!(Some(rel), corpus.vocab.inverse(fact.relation)),
        }
    }
}

#[test]
fn standard_config_counts() {
    let c = generate_simple_reversal(1000, 20, 200, 5, 0).unwrap();
    assert_eq!(c.train_docs.len(), 39_800);
    assert_eq!(c.heldout_facts.len(), 200);
    assert_eq!(c.facts.len(), 20_000);
    assert_eq!(brute_force_leaks(&c), 0);
}

#[test]
fn small_corpus_has_no_heldout_reverse() {
    let c = generate_simple_reversal(10, 3, 5, 2, 9).unwrap();
    assert_eq!(brute_force_leaks(&c), 0);
    assert!(c.leakage_audit().is_empty());
}

#[test]
fn audit_detects_a_planted_leak() {
    let mut c = generate_simple_reversal(10, 2, 4, 0, 1).unwrap();
    let id = c.heldout_ids[0];
    let mut doc = c.train_docs.iter().find(|d| d.fact_id == id).unwrap().clone();
    doc.tokens = reverse_fact(&c.facts[id], &c.vocab).tokens().to_vec();
    c.train_docs.push(doc);
    let leaks = c.leakage_audit();
    assert_eq!(leaks.len(), 1);
    assert_eq!(leaks[0].fact_id, id);
    assert_eq!(brute_force_leaks(&c), 1);
}

#[test]
fn nonsense_counts() {
    let c = generate_nonsense(100, 28, 10, 0.4, 3).unwrap();
    assert_eq!(c.heldout_facts.len(), 60);
    assert_eq!(c.train_docs.len(), 10 * (100 + 40));
    let full = generate_nonsense(10, 5, 1, 1.0, 3).unwrap();
    assert!(full.heldout_facts.is_empty());
    assert!(matches!(
        generate_nonsense(10, 29, 1, 0.5, 0),
        Err(CorpusError::TooManyComparisonWords { .. })
    ));
    assert!(generate_nonsense(10, 5, 1, 1.5, 0).is_err());
}

#[test]
fn nonsense_reversed_set_matches_scan() {
    let c = generate_nonsense(20, 4, 3, 0.5, 8).unwrap();
    let seen = directions_by_fact(&c);
    let reversed = seen.values().filter(|d| d.contains(&Direction::Reverse)).count();
    assert_eq!(reversed, 10);
    assert_eq!(brute_force_leaks(&c), 0);
    // Comparisons use 2n distinct entities.
    let entities: HashSet<TokenId> = c.facts.iter().flat_map(|f| [f.source, f.target]).collect();
    assert_eq!(entities.len(), 40);
    check_spans(&c);
}

#[test]
fn reverse_fact_example_and_bijection() {
    let c = generate_simple_reversal(12, 3, 0, 0, 4).unwrap();
    let f = c.facts[0];
    let r = reverse_fact(&f, &c.vocab);
    assert_eq!((r.source, r.target, r.direction), (f.target, f.source, Direction::Reverse));
    assert_eq!(Some(r.relation), c.vocab.inverse(f.relation));
    let images: HashSet<[TokenId; 3]> = c.facts.iter().map(|f| reverse_fact(f, &c.vocab).tokens()).collect();
    assert_eq!(images.len(), c.facts.len());
    let reverse_docs: HashSet<[TokenId; 3]> = c
        .train_docs
        .iter()
        .filter(|d| d.direction == Direction::Reverse)
        .map(|d| d.surface().tokens())
        .collect();
    assert_eq!(images, reverse_docs);
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for c in [generate_simple_reversal(15, 2, 6, 3, 2).unwrap(), generate_nonsense(12, 6, 2, 0.25, 2).unwrap()] {
        c.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    }
}

#[test]
fn corrupt_train_line_reports_its_position() {
    let dir = tempfile::tempdir().unwrap();
    generate_simple_reversal(5, 1, 1, 0, 0).unwrap().save(dir.path()).unwrap();
    let path = dir.path().join("train.tokens");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("1 2 3 | 0 1 1 2 | 0 f\n");
    std::fs::write(&path, text).unwrap();
    match Corpus::load(dir.path()) {
        Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 10),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn simple_reversal_properties(
        n_entities in 2usize..30,
        n_relations in 1usize..5,
        heldout_frac in 0.0f64..1.0,
        max_affix in 0usize..6,
        seed in any::<u64>(),
    ) {
        let universe = n_entities * n_relations;
        let n_heldout = ((universe as f64 * heldout_frac) as usize).min(universe - 1);
        let c = generate_simple_reversal(n_entities, n_relations, n_heldout, max_affix, seed).unwrap();

        prop_assert_eq!(c.facts.len(), universe);
        prop_assert_eq!(c.train_docs.len(), 2 * universe - n_heldout);
        prop_assert_eq!(c.heldout_facts.len(), n_heldout);
        prop_assert_eq!(brute_force_leaks(&c), 0);

        let seen = directions_by_fact(&c);
        prop_assert_eq!(seen.len(), universe);
        for h in &c.heldout_facts {
            let dirs = &seen[&h.tokens()];
            prop_assert!(dirs.contains(&Direction::Forward) && !dirs.contains(&Direction::Reverse));
        }
        let only_forward = seen.values().filter(|d| d.len() == 1).count();
        prop_assert_eq!(only_forward, n_heldout);

        // Each relation maps every entity to a different entity, bijectively.
        for &r in &c.vocab.relation_tokens {
            let of_r: Vec<&Fact> = c.facts.iter().filter(|f| f.relation == r).collect();
            prop_assert_eq!(of_r.len(), n_entities);
            prop_assert!(of_r.iter().all(|f| f.source != f.target));
            let sources: HashSet<_> = of_r.iter().map(|f| f.source).collect();
            let targets: HashSet<_> = of_r.iter().map(|f| f.target).collect();
            prop_assert_eq!(sources.len(), n_entities);
            prop_assert_eq!(targets.len(), n_entities);
        }

        for doc in &c.train_docs {
            prop_assert!(doc.len() <= 3 + 2 * max_affix);
            prop_assert!(doc.source_span.len() == 1 && doc.target_span.len() == 1);
            let prefix = doc.source_span.start.min(doc.target_span.start);
            prop_assert!(prefix <= max_affix && doc.len() - prefix - 3 <= max_affix);
        }
        check_spans(&c);

        for f in &c.facts {
            prop_assert_eq!(reverse_fact(&reverse_fact(f, &c.vocab), &c.vocab), *f);
        }

        let again = generate_simple_reversal(n_entities, n_relations, n_heldout, max_affix, seed).unwrap();
        prop_assert_eq!(&again, &c);
    }

    #[test]
    fn nonsense_counts_follow_floor(
        n in 1usize..40,
        words in 1usize..29,
        repeats in 1usize..4,
        frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let c = generate_nonsense(n, words, repeats, frac, seed).unwrap();
        let n_rev = (frac * n as f64 + 1e-9).floor() as usize;
        prop_assert_eq!(c.facts.len(), n);
        prop_assert_eq!(c.heldout_facts.len(), n - n_rev);
        prop_assert_eq!(c.train_docs.len(), repeats * (n + n_rev));
        prop_assert_eq!(brute_force_leaks(&c), 0);
    }
}

#[test]
fn different_seeds_change_affixes() {
    let a = generate_simple_reversal(50, 2, 10, 5, 1).unwrap();
    let b = generate_simple_reversal(50, 2, 10, 5, 2).unwrap();
    let affixes = |c: &Corpus| -> Vec<Vec<TokenId>> {
        c.train_docs.iter().map(|d| d.tokens.iter().copied().filter(|&t| c.vocab.is_filler(t)).collect()).collect()
    };
    assert_ne!(affixes(&a), affixes(&b));
}

#[test]
fn rejects_invalid_configs() {
    assert!(matches!(generate_simple_reversal(1, 1, 0, 0, 0), Err(CorpusError::TooFewEntities(1))));
    assert!(matches!(generate_simple_reversal(2, 1, 2, 0, 0), Err(CorpusError::TooManyHeldout { .. })));
    assert_eq!(generate_simple_reversal(2, 1, 0, 0, 0).unwrap().train_docs.len(), 4);
}
