use flowrag_core::evaluation::score;
use flowrag_core::features::{describe, parse_last_description, FlowFeatures, Standardizer};
use flowrag_core::gbdt::{self, GbdtModel, GbdtParams};
use flowrag_core::kb::{Exemplar, KbMetadata, KnowledgeBase, Space};
use flowrag_core::label::{ClassLabel, LabelMap, NUM_CLASSES};
use flowrag_core::pipeline::Prediction;
use flowrag_core::prompting::{build_prompt, parse_answer, PromptConfig, Regime};
use proptest::prelude::*;

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn arb_flow() -> impl Strategy<Value = FlowFeatures> {
    (
        prop_oneof![Just(1u8), Just(6u8), Just(17u8), any::<u8>()],
        0.0..1e5f64,
        0.0..1e4f64,
        0.0..1500.0f64,
        any::<[bool; 5]>(),
    )
        .prop_map(|(p, r, i, l, f)| FlowFeatures::new(p, r, i, l, f).unwrap())
}

fn arb_label() -> impl Strategy<Value = ClassLabel> {
    (0..NUM_CLASSES).prop_map(|i| ClassLabel::ALL[i])
}

fn arb_prediction() -> impl Strategy<Value = Prediction> {
    prop_oneof![
        1 => Just(Prediction::ParseFailure),
        6 => arb_label().prop_map(Prediction::Label),
    ]
}

fn exemplar(id: usize, flow: &FlowFeatures, label: ClassLabel) -> Exemplar {
    Exemplar {
        id,
        features_std: flow.to_vector(),
        signature: None,
        description: describe(flow),
        label,
        rationale: Some(format!("Reasoning for {id}. The answer is {label}.")),
    }
}

proptest! {
    #[test]
    fn description_roundtrips_at_three_decimals(f in arb_flow()) {
        let back = parse_last_description(&describe(&f)).unwrap();
        prop_assert_eq!(back.proto, f.proto);
        prop_assert_eq!(back.flags(), f.flags());
        for (a, b) in [(back.rate, f.rate), (back.iat_ms, f.iat_ms), (back.payload_len, f.payload_len)] {
            prop_assert!((a - round3(b)).abs() <= 1e-9 * b.max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn standardizer_inverts(flows in prop::collection::vec(arb_flow(), 1..40)) {
        let s = Standardizer::fit(&flows).unwrap();
        for f in &flows {
            let x = f.to_vector();
            let back = s.invert(&s.apply(f));
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn retrieval_is_sorted_and_sized(
        flows in prop::collection::vec(arb_flow(), 1..60),
        query in arb_flow(),
        k in 0usize..80,
    ) {
        let exemplars = flows.iter().enumerate().map(|(i, f)| exemplar(i, f, ClassLabel::Benign)).collect();
        let kb = KnowledgeBase::new(exemplars, KbMetadata::default()).unwrap();
        let hits = kb.retrieve(&query.to_vector(), Space::Feature, k).unwrap();
        prop_assert_eq!(hits.len(), k.min(flows.len()));
        for w in hits.windows(2) {
            prop_assert!(
                w[0].distance < w[1].distance
                    || (w[0].distance == w[1].distance && w[0].exemplar.id < w[1].exemplar.id)
            );
        }
        // nothing left out is strictly closer than the farthest hit
        if let Some(last) = hits.last() {
            let chosen: Vec<usize> = hits.iter().map(|n| n.exemplar.id).collect();
            for all in kb.retrieve(&query.to_vector(), Space::Feature, flows.len()).unwrap() {
                if !chosen.contains(&all.exemplar.id) {
                    prop_assert!(all.distance >= last.distance);
                }
            }
        }
    }

    #[test]
    fn metrics_are_bounded_and_order_free(
        mut pairs in prop::collection::vec((arb_label(), arb_prediction()), 1..200),
    ) {
        let r = score(&pairs).unwrap();
        for c in &r.per_class {
            for v in [c.precision, c.recall, c.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(c.f1 <= c.precision.max(c.recall) + 1e-12);
        }
        let mean = r.per_class.iter().map(|c| c.f1).sum::<f64>() / NUM_CLASSES as f64;
        prop_assert!((r.macro_f1 - mean).abs() < 1e-12);
        prop_assert_eq!(r.confusion.total(), pairs.len() as u64);
        pairs.reverse();
        prop_assert_eq!(score(&pairs).unwrap(), r);
    }

    #[test]
    fn last_answer_wins(first in arb_label(), last in arb_label(), noise in "[a-z ,.]{0,40}") {
        let vocab = LabelMap::new();
        let text = format!("{noise} The answer is {first}. {noise}\nthe ANSWER is {last}.");
        prop_assert_eq!(parse_answer(&text, &vocab), Ok(last));
        prop_assert!(parse_answer(&noise, &vocab).is_err());
    }

    #[test]
    fn few_shot_prompt_layout(
        flows in prop::collection::vec(arb_flow(), 3),
        query in arb_flow(),
        k in 1usize..=3,
    ) {
        let ex: Vec<Exemplar> = flows.iter().enumerate().map(|(i, f)| exemplar(i, f, ClassLabel::Tcp)).collect();
        let refs: Vec<&Exemplar> = ex.iter().take(k).collect();
        let desc = describe(&query);
        let p = build_prompt(&PromptConfig::new(Regime::FewShot, k).unwrap(), &desc, &refs).unwrap();
        prop_assert!(p.text.ends_with(&desc));
        for n in 1..=k {
            let header = format!("Example {n}:\n");
            prop_assert!(p.text.contains(&header));
        }
        let extra = format!("Example {}:", k + 1);
        prop_assert!(!p.text.contains(&extra));
        prop_assert_eq!(parse_last_description(&p.text).unwrap().proto, query.proto);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gbdt_json_roundtrip_preserves_predictions(
        data in prop::collection::vec((arb_flow(), arb_label()), 6..40),
        rounds in 0usize..6,
    ) {
        let rows: Vec<_> = data.iter().map(|(f, y)| (f.to_vector(), *y)).collect();
        let params = GbdtParams { rounds, max_depth: 3, ..GbdtParams::default() };
        let model = gbdt::train(&rows, &params).unwrap();
        let back = GbdtModel::from_json(&model.to_json()).unwrap();
        prop_assert_eq!(back.fingerprint(), model.fingerprint());
        for (x, _) in &rows {
            prop_assert_eq!(back.predict_proba(x).unwrap(), model.predict_proba(x).unwrap());
        }
    }
}
