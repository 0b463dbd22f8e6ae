mod common;

use std::collections::{BTreeSet, HashSet};

use mdr_core::data::{
    build_pools, build_pools_with, generate, prefix_augment, read_jsonl, write_jsonl, BatchStream, Dataset,
    DialogueExample, JointMix, Modality, Objective, PoolOptions, Response, SyntheticGenConfig, POOL_SIZE,
};
use mdr_core::encoders::ImageResponse;
use proptest::prelude::*;
use rand::Rng;

fn config(noise: f64, seed: u64) -> SyntheticGenConfig {
    SyntheticGenConfig {
        train_dialogues: 200,
        dev_dialogues: 300,
        test_dialogues: 60,
        alignment_noise: noise,
        seed,
        ..Default::default()
    }
}

fn jaccard(a: &BTreeSet<u32>, b: &BTreeSet<u32>) -> f64 {
    a.intersection(b).count() as f64 / a.union(b).count() as f64
}

/// Non-learned retriever scoring candidates by token-set Jaccard overlap with
/// the context; ties count against the gold.
fn topic_oracle_r1(split: &Dataset, modality: Modality, seed: u64) -> f64 {
    let pools = build_pools(split, seed).unwrap();
    let tokens = |ex: &DialogueExample| -> BTreeSet<u32> {
        match &ex.response {
            Response::Text(t) => t.iter().copied().collect(),
            Response::Image(img) => img.labels.iter().copied().collect(),
        }
    };
    let golds = split.indices_of(modality);
    let hits = golds
        .iter()
        .filter(|&&i| {
            let ctx: BTreeSet<u32> = split.examples[i].context.iter().flatten().copied().collect();
            let gold = jaccard(&ctx, &tokens(&split.examples[i]));
            pools.for_modality(modality)[i]
                .iter()
                .all(|&c| c == i || jaccard(&ctx, &tokens(&split.examples[c])) < gold)
        })
        .count();
    hits as f64 / golds.len() as f64
}

#[test]
fn noiseless_topic_oracle_is_perfect() {
    let splits = generate(&config(0.0, 4)).unwrap();
    assert_eq!(topic_oracle_r1(&splits.dev, Modality::Text, 0), 1.0);
    assert_eq!(topic_oracle_r1(&splits.dev, Modality::Image, 0), 1.0);
}

#[test]
fn oracle_accuracy_never_rises_with_noise() {
    let levels = [0.0, 0.05, 0.2, 0.5];
    let mean_r1: Vec<f64> = levels
        .iter()
        .map(|&sigma| {
            let runs: Vec<f64> = (0..3)
                .flat_map(|seed| {
                    let dev = generate(&config(sigma, seed)).unwrap().dev;
                    [
                        topic_oracle_r1(&dev, Modality::Text, seed),
                        topic_oracle_r1(&dev, Modality::Image, seed),
                    ]
                })
                .collect();
            runs.iter().sum::<f64>() / runs.len() as f64
        })
        .collect();
    for w in mean_r1.windows(2) {
        assert!(w[1] <= w[0], "{mean_r1:?}");
    }
    assert!(mean_r1[3] < mean_r1[0], "{mean_r1:?}");
}

#[test]
fn splits_share_no_example_or_image_ids() {
    let splits = generate(&SyntheticGenConfig::default()).unwrap();
    let mut seen_examples = HashSet::new();
    let mut seen_images = HashSet::new();
    for split in [&splits.train, &splits.dev, &splits.test] {
        for ex in &split.examples {
            assert!(seen_examples.insert(ex.id.clone()), "{}", ex.id);
            if let Some(img) = ex.image_response() {
                assert!(seen_images.insert(img.id.clone()), "{}", img.id);
            }
        }
    }
}

#[test]
fn joint_batches_follow_dataset_ratio() {
    let train = generate(&SyntheticGenConfig::default()).unwrap().train;
    let ratio = train.count(Modality::Image) as f64 / train.len() as f64;
    let stream = BatchStream::new(&train, Objective::Joint, 64, 5, JointMix::Proportional).unwrap();
    for epoch in 0..3 {
        let batches = stream.epoch_batches(epoch);
        let images: usize = batches
            .iter()
            .flatten()
            .filter(|&&i| train.examples[i].gold_modality() == Modality::Image)
            .count();
        let total: usize = batches.iter().map(Vec::len).sum();
        assert_eq!(total, train.len());
        assert!((images as f64 / total as f64 - ratio).abs() <= 0.02);

        let full: Vec<f64> = batches
            .iter()
            .filter(|b| b.len() == 64)
            .map(|b| b.iter().filter(|&&i| train.examples[i].gold_modality() == Modality::Image).count() as f64 / 64.0)
            .collect();
        let mean = full.iter().sum::<f64>() / full.len() as f64;
        assert!((mean - ratio).abs() <= 0.02, "epoch {epoch}: {mean} vs {ratio}");
    }
}

#[test]
fn random_scores_hit_at_one_with_chance_rate() {
    // 10k unimodal pools of 50 with i.i.d. scores, gold at a random slot
    let mut rng = common::rng(77);
    let trials = 10_000;
    let hits = (0..trials)
        .filter(|_| {
            let scores: Vec<f64> = (0..POOL_SIZE).map(|_| rng.random()).collect();
            let gold = rng.random_range(0..POOL_SIZE);
            scores.iter().enumerate().all(|(j, &s)| j == gold || s < scores[gold])
        })
        .count();
    let r1 = hits as f64 / trials as f64;
    assert!((r1 - 1.0 / POOL_SIZE as f64).abs() < 0.005, "{r1}");
}

#[test]
fn jsonl_round_trip_of_a_thousand_examples() {
    let cfg = SyntheticGenConfig {
        train_dialogues: 1000,
        dev_dialogues: 8,
        test_dialogues: 8,
        ..Default::default()
    };
    let train = generate(&cfg).unwrap().train;
    let mut buf = Vec::new();
    write_jsonl(&train, &mut buf).unwrap();
    assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1000);
    let back = read_jsonl(buf.as_slice(), std::path::Path::new("mem")).unwrap();
    assert_eq!(back, train);
}

#[test]
fn augmented_size_is_sum_of_context_lengths() {
    let train = generate(&config(0.05, 2)).unwrap().train;
    let aug = prefix_augment(&train);
    assert_eq!(aug.len(), train.examples.iter().map(|e| e.context.len()).sum::<usize>());
    assert_eq!(aug.count(Modality::Image), train.examples.iter().filter(|e| e.gold_modality() == Modality::Image).map(|e| e.context.len()).sum::<usize>());
}

fn arb_example() -> impl Strategy<Value = DialogueExample> {
    let tokens = prop::collection::vec(0u32..5000, 1..12);
    let context = prop::collection::vec(tokens.clone(), 1..5);
    let grid = prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, 12);
    let image = (grid, prop::collection::vec(0u32..5000, 1..6)).prop_map(|(grid, labels)| {
        Response::Image(ImageResponse {
            id: "img".into(),
            height: 2,
            width: 2,
            channels: 3,
            grid,
            labels,
        })
    });
    let response = prop_oneof![tokens.prop_map(Response::Text), image];
    (any::<u32>(), context, response, prop::option::of(0usize..16)).prop_map(|(n, context, response, topic)| {
        DialogueExample {
            id: format!("ex-{n}"),
            context,
            response,
            topic,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jsonl_round_trip_is_exact(examples in prop::collection::vec(arb_example(), 0..20)) {
        let data = Dataset::new(examples);
        let mut buf = Vec::new();
        write_jsonl(&data, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn pools_are_pure_and_contain_gold(seed in any::<u64>(), shared in any::<bool>()) {
        let dev = generate(&config(0.05, 1)).unwrap().dev;
        let opts = PoolOptions { shared, ..Default::default() };
        let a = build_pools_with(&dev, seed, opts).unwrap();
        prop_assert_eq!(&a, &build_pools_with(&dev, seed, opts).unwrap());
        for (i, ex) in dev.examples.iter().enumerate() {
            let m = ex.gold_modality();
            let pool = &a.for_modality(m)[i];
            prop_assert_eq!(pool.len(), POOL_SIZE);
            prop_assert_eq!(pool.iter().filter(|&&c| c == i).count(), 1);
            prop_assert!(pool.iter().all(|&c| dev.examples[c].gold_modality() == m));
        }
    }

    #[test]
    fn generation_is_seed_deterministic(seed in 0u64..1000) {
        let cfg = SyntheticGenConfig { train_dialogues: 30, dev_dialogues: 10, test_dialogues: 10, seed, ..Default::default() };
        prop_assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }
}
