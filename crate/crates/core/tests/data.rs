use std::path::Path;

use hkd_core::data::{generate_dataset, generate_scene, DatasetParams, SceneParams};
use hkd_core::eval::{format_annotations, parse_annotations, Subset};

#[test]
fn heights_cover_both_subset_ranges() {
    let p = SceneParams::default();
    let scale = hkd_core::config::EvalConfig::default().scale;
    let (mut reasonable, mut small, mut total) = (0usize, 0usize, 0usize);
    for i in 0..500 {
        for a in generate_scene(&p, 42, i).annotations {
            let h = a.height();
            total += 1;
            if h > 50.0 * scale {
                reasonable += 1;
            }
            if h > 50.0 * scale && h < 75.0 * scale {
                small += 1;
            }
        }
    }
    let frac = |n: usize| n as f64 / total as f64;
    assert!(frac(reasonable) >= 0.2, "reasonable heights {:.3}", frac(reasonable));
    assert!(frac(small) >= 0.2, "small heights {:.3}", frac(small));
}

#[test]
fn both_subsets_are_populated_by_default() {
    let data = generate_dataset(&DatasetParams::default()).unwrap();
    let scale = hkd_core::config::EvalConfig::default().scale;
    for subset in Subset::ALL {
        let n = data
            .test
            .iter()
            .flat_map(|s| &s.annotations)
            .filter(|g| subset.contains(g, scale))
            .count();
        assert!(n >= 10, "{} has {n} test boxes", subset.name());
    }
}

#[test]
fn annotations_round_trip_through_text() {
    let data = generate_dataset(&DatasetParams {
        train: 0,
        test: 30,
        seed: 4,
        ..DatasetParams::default()
    })
    .unwrap();
    let text = format_annotations(data.test.iter().enumerate().map(|(i, s)| (i, s.annotations.as_slice())));
    let back = parse_annotations(&text, Path::new("gt.txt")).unwrap();
    for (i, s) in data.test.iter().enumerate() {
        let parsed = back.get(&i).cloned().unwrap_or_default();
        assert_eq!(parsed, s.annotations);
    }
}

#[test]
fn scenes_are_bit_identical_across_calls() {
    let p = DatasetParams {
        train: 5,
        test: 5,
        seed: 77,
        ..DatasetParams::default()
    };
    assert_eq!(generate_dataset(&p).unwrap(), generate_dataset(&p).unwrap());
    let other = DatasetParams { seed: 78, ..p };
    assert_ne!(generate_dataset(&p).unwrap(), generate_dataset(&other).unwrap());
}
