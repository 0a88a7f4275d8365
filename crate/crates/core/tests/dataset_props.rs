use std::collections::{BTreeMap, HashSet};

mod common;

use adnet::dataset::{
    area_fraction, build_manifest, classify_sample, format_annotations, parse_annotations,
    AnnotatedImage, Classification, DatasetManifest, Label, Split,
};
use common::{oracle_fraction, oracle_on_screen, sample, to_images, Sample};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn inclusion_rule_matches_oracle(samples in prop::collection::vec(sample(), 1000)) {
        let images = to_images(&samples);
        for (s, img) in samples.iter().zip(&images) {
            let fraction = oracle_fraction(s);
            prop_assert!((area_fraction(img) - fraction).abs() <= 1e-12 * fraction.max(1.0));
            let positive = !s.shapes.is_empty() && oracle_on_screen(s) && fraction > 0.10;
            let class = classify_sample(img);
            prop_assert_eq!(class == Classification::Positive, positive, "{:?}", s);
            prop_assert_eq!(class == Classification::Negative, s.shapes.is_empty());
        }
    }

    #[test]
    fn manifest_partitions_and_stratifies(
        samples in prop::collection::vec(sample(), 1000),
        seed in any::<u64>(),
        fraction in 0.5..0.9f64,
    ) {
        let images = to_images(&samples);
        let manifest = build_manifest(&images, fraction, seed).unwrap();

        let mut seen = HashSet::new();
        for id in manifest.records.iter().map(|r| &r.image_id).chain(manifest.excluded.iter().map(|e| &e.image_id)) {
            prop_assert!(seen.insert(id.clone()), "{} listed twice", id);
        }
        prop_assert_eq!(seen.len(), images.len());

        let mut strata: BTreeMap<(Label, String), (usize, usize)> = BTreeMap::new();
        for r in &manifest.records {
            let e = strata.entry((r.label, r.source.clone())).or_default();
            match r.split {
                Split::Train => e.0 += 1,
                Split::Test => e.1 += 1,
            }
        }
        for ((label, source), (train, test)) in strata {
            let ideal = (train + test) as f64 * fraction;
            prop_assert!((train as f64 - ideal).abs() <= 1.0, "{label}/{source}: {train} train of {}", train + test);
        }

        let again = build_manifest(&images, fraction, seed).unwrap();
        prop_assert_eq!(manifest.to_text(), again.to_text());
        let reparsed = DatasetManifest::parse(&manifest.to_text()).unwrap();
        prop_assert_eq!(reparsed.to_text(), manifest.to_text());
    }

    #[test]
    fn annotations_round_trip(samples in prop::collection::vec(sample(), 1..50)) {
        let images = to_images(&samples);
        prop_assert_eq!(parse_annotations(&format_annotations(&images)).unwrap(), images);
    }
}

#[test]
fn exactly_ten_percent_is_excluded() {
    let img = AnnotatedImage::new(
        "a",
        1000,
        100,
        "s",
        vec![vec![(0.0, 0.0), (100.0, 0.0), (100.0, 100.0), (0.0, 100.0)]],
    )
    .unwrap();
    assert_eq!(area_fraction(&img), 0.1);
    assert_ne!(classify_sample(&img), Classification::Positive);
}

#[test]
fn different_seeds_give_different_splits() {
    let samples: Vec<Sample> = (0..200)
        .map(|i| Sample {
            width: 100,
            height: 100,
            source: i % 3,
            shapes: Vec::new(),
        })
        .collect();
    let images = to_images(&samples);
    let a = build_manifest(&images, 0.8, 1).unwrap();
    let b = build_manifest(&images, 0.8, 2).unwrap();
    assert_eq!(a.counts(), b.counts());
    assert_ne!(a.to_text(), b.to_text());
}
