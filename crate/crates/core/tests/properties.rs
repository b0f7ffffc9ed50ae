mod common;

use std::collections::{BTreeMap, BTreeSet};

use dedup_core::active::{binary_entropy, ingest_labels, select, PoolState, SelectionStrategy};
use dedup_core::blocking::{block_candidates, CandidatePair};
use dedup_core::corpus::{generate_synthetic, read_csv, Corpus, CorruptionConfig, Record, Schema};
use dedup_core::encoder::Prediction;
use dedup_core::eval::{edit_similarity, f1_from, field_similarity_baseline, levenshtein, metrics, ConfusionCounts};
use dedup_core::preprocess::{default_taggers, fit_tfidf, inject_knowledge, serialize_pair, summarize, Tagger};
use dedup_core::text::Stopwords;
use dedup_core::training::rdrop_loss;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_force_pairs, check_summary, random_corpus, rdrop_scalar, uncertainty_prefix, TfidfOracle, STOPWORDS};

fn pool_of(preds: &[(String, f64)]) -> PoolState {
    let mut pool = PoolState::new(preds.iter().map(|(id, _)| id.clone()), 10, 5);
    for (id, p) in preds {
        pool.predictions.insert(id.clone(), Prediction { pair_id: id.clone(), p: *p, logits: [0.0; 2] });
    }
    pool
}

fn predictions() -> impl Strategy<Value = Vec<(String, f64)>> {
    // Grid probabilities so that ties in |p - 0.5| and entropy are common.
    prop::collection::btree_map("[a-z]{1,4}", 0u32..=20, 0..60)
        .prop_map(|m| m.into_iter().map(|(id, k)| (id, f64::from(k) / 20.0)).collect())
}

fn probability() -> impl Strategy<Value = [f64; 2]> {
    (0.0..=1.0f64).prop_map(|a| [a, 1.0 - a])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blocking_matches_brute_force(seed in any::<u64>()) {
        let corpus = random_corpus(&mut ChaCha8Rng::seed_from_u64(seed), 60);
        let got: BTreeSet<(String, String)> = block_candidates(&corpus, &Stopwords::new(STOPWORDS))
            .into_iter()
            .map(|p| (p.left_id, p.right_id))
            .collect();
        prop_assert_eq!(got, brute_force_pairs(&corpus, STOPWORDS));
    }

    #[test]
    fn summaries_keep_the_contract(seed in any::<u64>(), slack in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = generate_synthetic(20, &CorruptionConfig::moderate(seed)).unwrap();
        let taggers: Vec<Tagger> = default_taggers().iter().map(|s| Tagger::compile(s).unwrap()).collect();
        let pairs: Vec<_> = (0..8)
            .map(|k| {
                let (i, j) = (rng.random_range(0..corpus.len()), rng.random_range(0..corpus.len()));
                inject_knowledge(&serialize_pair(&format!("p{k}"), &corpus.records[i], &corpus.records[j], &corpus.schema), &taggers).unwrap()
            })
            .collect();
        let texts: Vec<String> = pairs.iter().map(|p| p.text.clone()).collect();
        let stop = ["the", "of", "and", "a"];
        let model = fit_tfidf(&texts, &Stopwords::new(stop));
        let oracle = TfidfOracle::fit(&texts, &stop);
        let max_len = 3 + 6 * corpus.schema.len() + slack;
        for sp in &pairs {
            let out = summarize(sp, &model, max_len, &Stopwords::new(stop)).unwrap();
            if let Err(e) = check_summary(&sp.text, &out.text, &oracle, max_len) {
                return Err(TestCaseError::fail(format!("{e}\n in:  {}\n out: {}", sp.text, out.text)));
            }
        }
    }

    #[test]
    fn uncertainty_selection_is_a_sorted_prefix(preds in predictions(), n in 0usize..80) {
        prop_assert_eq!(select(&pool_of(&preds), &SelectionStrategy::Uncertainty, n), uncertainty_prefix(&preds, n));
    }

    #[test]
    fn selection_ignores_insertion_order(preds in predictions(), n in 0usize..80, seed in any::<u64>()) {
        let mut shuffled = preds.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        for strategy in [SelectionStrategy::Uncertainty, SelectionStrategy::Entropy, SelectionStrategy::Random { seed }] {
            prop_assert_eq!(select(&pool_of(&preds), &strategy, n), select(&pool_of(&shuffled), &strategy, n));
        }
    }

    #[test]
    fn entropy_selection_prefers_high_entropy(preds in predictions(), n in 0usize..80) {
        let chosen = select(&pool_of(&preds), &SelectionStrategy::Entropy, n);
        prop_assert_eq!(chosen.len(), n.min(preds.len()));
        let p: BTreeMap<&str, f64> = preds.iter().map(|(id, p)| (id.as_str(), *p)).collect();
        let h = |id: &str| -p[id] * p[id].ln().max(-1e300) - (1.0 - p[id]) * (1.0 - p[id]).ln().max(-1e300);
        let worst_chosen = chosen.iter().map(|id| binary_entropy(p[id.as_str()])).fold(f64::INFINITY, f64::min);
        for (id, _) in &preds {
            if !chosen.contains(id) {
                prop_assert!(binary_entropy(p[id.as_str()]) <= worst_chosen + 1e-12);
            }
            prop_assert!((binary_entropy(p[id.as_str()]) - h(id)).abs() < 1e-12);
        }
    }

    #[test]
    fn random_selection_draws_distinct_unlabeled(preds in predictions(), n in 0usize..80, seed in any::<u64>()) {
        let pool = pool_of(&preds);
        let chosen = select(&pool, &SelectionStrategy::Random { seed }, n);
        let distinct: BTreeSet<&String> = chosen.iter().collect();
        prop_assert_eq!(chosen.len(), n.min(preds.len()));
        prop_assert_eq!(distinct.len(), chosen.len());
        prop_assert!(chosen.iter().all(|id| pool.unlabeled.contains(id)));
    }

    #[test]
    fn ingesting_labels_conserves_the_pool(preds in predictions(), take in 0usize..20) {
        let mut pool = pool_of(&preds);
        let size = pool.len();
        let batch: Vec<(String, i64)> = preds.iter().take(take).enumerate().map(|(i, (id, _))| (id.clone(), (i % 2) as i64)).collect();
        ingest_labels(&mut pool, &batch).unwrap();
        prop_assert_eq!(pool.len(), size);
        prop_assert_eq!(pool.labeled.len(), batch.len());
        prop_assert!(batch.iter().all(|(id, _)| !pool.predictions.contains_key(id)));
        // Relabeling anything is refused and leaves the pool untouched.
        if let Some(first) = batch.first() {
            let before = pool.clone();
            prop_assert!(ingest_labels(&mut pool, std::slice::from_ref(first)).is_err());
            prop_assert_eq!(pool, before);
        }
    }

    #[test]
    fn rdrop_matches_scalar_oracle(p1 in probability(), p2 in probability(), y in 0u8..2, alpha in 0.0..5.0f64) {
        prop_assume!(p1.iter().chain(&p2).all(|v| *v > 1e-6));
        let l = rdrop_loss(p1, p2, y, alpha, 1e-12).unwrap();
        let swapped = rdrop_loss(p2, p1, y, alpha, 1e-12).unwrap();
        prop_assert!(l.kl >= 0.0);
        prop_assert_eq!(l.kl, swapped.kl);
        let oracle = rdrop_scalar(p1, p2, usize::from(y), alpha);
        prop_assert!((l.total - oracle).abs() <= 1e-9 * oracle.abs().max(1.0), "{} vs {}", l.total, oracle);
    }

    #[test]
    fn f1_identity(tp in 0usize..500, fp in 0usize..500, fn_ in 0usize..500, tn in 0usize..500) {
        let m = metrics(&ConfusionCounts { tp, fp, fn_, tn });
        let direct = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        prop_assert!((m.f1 - direct).abs() < 1e-12);
        prop_assert!((f1_from(m.precision, m.recall).f1 - m.f1).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.f1));
    }

    #[test]
    fn edit_similarity_is_a_bounded_symmetric_score(a in "[a-c ]{0,8}", b in "[a-c ]{0,8}") {
        let s = edit_similarity(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, edit_similarity(&b, &a));
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert_eq!(s == 1.0, a == b);
    }

    #[test]
    fn baseline_is_monotone_in_threshold(seed in any::<u64>(), lo in 0.0..1.0f64, step in 0.0..0.5f64) {
        let corpus = generate_synthetic(15, &CorruptionConfig::moderate(seed)).unwrap();
        let pairs = block_candidates(&corpus, &Stopwords::default());
        let strict = field_similarity_baseline(&pairs, &corpus, "title", lo + step).unwrap();
        let loose = field_similarity_baseline(&pairs, &corpus, "title", lo).unwrap();
        for (s, l) in strict.iter().zip(&loose) {
            prop_assert!(!s.duplicate || l.duplicate);
        }
    }

    #[test]
    fn csv_round_trips(rows in prop::collection::btree_map("[a-z0-9]{1,6}", prop::collection::vec(".{0,12}", 2), 1..20), truth in any::<bool>()) {
        let schema = Schema::new(["name", "note, quoted \"x\""]).unwrap();
        let records: Vec<Record> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (id, values))| Record { id, values, cluster_id: truth.then(|| format!("c{}", i / 2)) })
            .collect();
        let corpus = Corpus::new(schema, records, truth).unwrap();
        let mut buf = Vec::new();
        corpus.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), "id", truth.then_some("cluster_id")).unwrap();
        prop_assert_eq!(back, corpus);
    }
}

#[test]
fn candidate_pairs_are_canonical() {
    let a = CandidatePair::new("b", "a").unwrap();
    assert_eq!((a.left_id.as_str(), a.right_id.as_str(), a.pair_id.as_str()), ("a", "b", "a|b"));
    assert!(CandidatePair::new("a", "a").is_none());
}
