use std::collections::BTreeSet;

use proptest::prelude::*;
use tracerag::corpus::{Domain, EvalQuery, TraceRecord};
use tracerag::decontam::{decontaminate, jaccard, ngram_set, DecontamConfig, DefaultNormalizer};
use tracerag::exec::Exec;

fn text() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![Just("alpha"), Just("beta"), Just("Gamma"), Just("delta"), Just("eps")],
        0..30,
    )
    .prop_map(|w| w.join(" "))
}

fn record(id: usize, problem: String) -> TraceRecord {
    TraceRecord {
        id: format!("r{id}"),
        problem,
        trace: String::new(),
        final_output: None,
        domain: Domain::Math,
        source_model: "m".into(),
        metadata: Default::default(),
    }
}

proptest! {
    #[test]
    fn jaccard_is_a_bounded_symmetric_similarity(a in text(), b in text(), n in 1usize..5) {
        let (sa, sb) = (ngram_set(&a, n, &DefaultNormalizer), ngram_set(&b, n, &DefaultNormalizer));
        let j = jaccard(&sa, &sb);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, jaccard(&sb, &sa));
        if !sa.is_empty() {
            prop_assert_eq!(jaccard(&sa, &sa), 1.0);
        }
    }

    #[test]
    fn case_and_punctuation_do_not_matter(a in text(), n in 1usize..4) {
        let shouted = a.to_uppercase().replace(' ', ", ");
        prop_assert_eq!(ngram_set(&a, n, &DefaultNormalizer), ngram_set(&shouted, n, &DefaultNormalizer));
    }

    #[test]
    fn raising_the_threshold_never_removes_more(
        problems in proptest::collection::vec(text(), 1..12),
        questions in proptest::collection::vec(text(), 1..4),
        n in 1usize..4,
    ) {
        let corpus: Vec<TraceRecord> = problems.into_iter().enumerate().map(|(i, p)| record(i, p)).collect();
        let queries: Vec<EvalQuery> = questions
            .into_iter()
            .enumerate()
            .map(|(i, q)| EvalQuery { id: format!("q{i}"), question: q, gold_answer: "1".into(), benchmark: "b".into(), samples_required: 1 })
            .collect();
        let mut prev: Option<BTreeSet<String>> = None;
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let cfg = DecontamConfig { n, threshold: t };
            let out = decontaminate(&corpus, &queries, &cfg, &DefaultNormalizer, Exec::default()).unwrap();
            let removed: BTreeSet<String> = out.report.removed.iter().map(|r| r.record_id.clone()).collect();
            prop_assert_eq!(out.kept.len() + removed.len(), corpus.len());
            if let Some(p) = &prev {
                prop_assert!(removed.is_subset(p));
            }
            prev = Some(removed);
        }
        // Nothing exceeds a perfect score.
        prop_assert!(prev.unwrap().is_empty());
    }
}
