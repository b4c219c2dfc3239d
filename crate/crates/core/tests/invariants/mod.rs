//! Randomized invariants shared by the property tests and the acceptance run.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use coverage_qc::baseline::FnClassifier;
use coverage_qc::cascade::{improve_predictions, CascadeMode, FnRegion};
use coverage_qc::dataprep::{make_folds, Label, Task, TripletSample};
use coverage_qc::explainer::{perturbation_weight, slic, SlicParams};
use coverage_qc::harness::{auc, LeakageAudit};
use coverage_qc::segmenter::{dice, jaccard};
use coverage_qc::{Mask, Stack};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub const CASES: u32 = 1000;

fn check<S: Strategy>(
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn bool_vec(k: std::ops::Range<usize>) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), k)
}

pub const ALL: [(&str, fn() -> Result<(), String>); 7] = [
    (
        "weights_stay_in_unit_interval",
        weights_stay_in_unit_interval,
    ),
    ("weights_grow_with_agreement", weights_grow_with_agreement),
    (
        "superpixels_partition_the_image",
        superpixels_partition_the_image,
    ),
    (
        "dice_is_a_function_of_jaccard",
        dice_is_a_function_of_jaccard,
    ),
    (
        "auc_ignores_monotone_rescaling",
        auc_ignores_monotone_rescaling,
    ),
    ("folds_never_share_volumes", folds_never_share_volumes),
    (
        "cascade_never_adds_false_negatives",
        cascade_never_adds_false_negatives,
    ),
];

pub fn weights_stay_in_unit_interval() -> Result<(), String> {
    check((bool_vec(1..60), 0.01f64..5.0), |(z, width)| {
        let w = perturbation_weight(&z, width);
        let on = z.iter().filter(|&&b| b).count();
        if on == 0 {
            prop_assert_eq!(w, 0.0);
        }
        // narrow kernels underflow to exactly 0
        prop_assert!((0.0..=1.0).contains(&w), "w = {}", w);
        prop_assert_eq!(
            w == 1.0,
            on == z.len(),
            "w = {} with {} of {} on",
            w,
            on,
            z.len()
        );
        Ok(())
    })
}

pub fn weights_grow_with_agreement() -> Result<(), String> {
    check(
        (bool_vec(2..60), 0.01f64..5.0, any::<prop::sample::Index>()),
        |(z, width, pick)| {
            let off: Vec<usize> = (0..z.len()).filter(|&i| !z[i]).collect();
            prop_assume!(!off.is_empty());
            let mut more = z.clone();
            more[off[pick.index(off.len())]] = true;
            prop_assert!(perturbation_weight(&more, width) >= perturbation_weight(&z, width));
            let mut shuffled = z.clone();
            shuffled.reverse();
            prop_assert_eq!(
                perturbation_weight(&shuffled, width),
                perturbation_weight(&z, width)
            );
            Ok(())
        },
    )
}

pub fn superpixels_partition_the_image() -> Result<(), String> {
    check(
        (4usize..20, any::<u64>(), 1usize..40, 0.01f64..2.0),
        |(size, seed, n_segments, compactness)| {
            // piecewise-smooth random image
            let mut state = seed | 1;
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 40) as f32 / (1u64 << 24) as f32
            };
            let (a, b, c) = (next(), next(), next());
            let img: Vec<f32> = (0..size * size)
                .map(|i| {
                    let (y, x) = ((i / size) as f32, (i % size) as f32);
                    (a * x + b * y) / size as f32
                        + if (x + y * c) as usize % 5 == 0 {
                            0.5
                        } else {
                            0.0
                        }
                        + 0.1 * next()
                })
                .collect();
            let params = SlicParams {
                n_segments,
                compactness,
                max_iter: 20,
            };
            let map = slic(&img, size, &params);
            prop_assert_eq!(map.labels.len(), size * size);
            prop_assert!(map.num_segments >= 1);
            prop_assert!(map.labels.iter().all(|&l| l < map.num_segments));
            let sizes = map.segment_sizes();
            prop_assert!(sizes.iter().all(|&s| s > 0), "empty segment id");
            prop_assert_eq!(sizes.iter().sum::<usize>(), size * size);
            // each id is one 4-connected region
            let mut seen = vec![false; size * size];
            let mut components = 0;
            for start in 0..size * size {
                if seen[start] {
                    continue;
                }
                components += 1;
                let l = map.labels[start];
                seen[start] = true;
                let mut q = VecDeque::from([start]);
                while let Some(p) = q.pop_front() {
                    let (y, x) = (p / size, p % size);
                    let mut nb = Vec::with_capacity(4);
                    if y > 0 {
                        nb.push(p - size);
                    }
                    if y + 1 < size {
                        nb.push(p + size);
                    }
                    if x > 0 {
                        nb.push(p - 1);
                    }
                    if x + 1 < size {
                        nb.push(p + 1);
                    }
                    for n in nb {
                        if !seen[n] && map.labels[n] == l {
                            seen[n] = true;
                            q.push_back(n);
                        }
                    }
                }
            }
            prop_assert_eq!(components, map.num_segments);
            Ok(())
        },
    )
}

pub fn dice_is_a_function_of_jaccard() -> Result<(), String> {
    check(
        ((1usize..8).prop_flat_map(|s| {
            (
                Just(s),
                bool_vec(3 * s * s..3 * s * s + 1),
                bool_vec(3 * s * s..3 * s * s + 1),
            )
        }),),
        |((size, a, b),)| {
            let ma = Mask::new(size, a).unwrap();
            let mb = Mask::new(size, b).unwrap();
            let d = dice(&ma, &mb).unwrap();
            let j = jaccard(&ma, &mb).unwrap();
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12, "d {} j {}", d, j);
            prop_assert!((0.0..=1.0).contains(&d) && j <= d + 1e-12);
            Ok(())
        },
    )
}

pub fn auc_ignores_monotone_rescaling() -> Result<(), String> {
    check(
        (
            prop::collection::vec((any::<bool>(), 0u8..20), 2..80),
            0.01f64..100.0,
            -10.0f64..10.0,
        ),
        |(pairs, scale, shift)| {
            let labels: Vec<Label> = pairs
                .iter()
                .map(|&(p, _)| if p { Label::P } else { Label::N })
                .collect();
            let scores: Vec<f64> = pairs.iter().map(|&(_, s)| s as f64 / 20.0).collect();
            let base = auc(&labels, &scores).unwrap();
            let transforms: [Box<dyn Fn(f64) -> f64>; 3] = [
                Box::new(|s| scale * s + shift),
                Box::new(|s| (3.0 * s).exp()),
                Box::new(|s| 1.0 / (1.0 + (-(s - 0.5) * 7.0).exp())),
            ];
            for f in &transforms {
                let moved: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
                match (base, auc(&labels, &moved).unwrap()) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y),
                    (None, None) => {}
                    other => prop_assert!(false, "{:?}", other),
                }
            }
            if let Some(a) = base {
                prop_assert!((0.0..=1.0).contains(&a));
            }
            Ok(())
        },
    )
}

pub fn folds_never_share_volumes() -> Result<(), String> {
    check(
        (2usize..60, 2usize..8, any::<u64>()),
        |(volumes, k, seed)| {
            prop_assume!(volumes >= k);
            let samples: Vec<TripletSample> = (0..volumes)
                .flat_map(|v| {
                    [Label::P, Label::N].map(|label| TripletSample {
                        id: format!("v{v}-{label:?}"),
                        stack: Stack::zeros(1),
                        label,
                        task: Task::Basal,
                        source_volume_id: format!("v{v}"),
                        slice_indices: [1, 2, 3],
                    })
                })
                .collect();
            let ds = make_folds(samples, k, seed).unwrap();
            let mut fold_of_volume: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
            for (s, &f) in ds.samples.iter().zip(&ds.folds) {
                fold_of_volume
                    .entry(&s.source_volume_id)
                    .or_default()
                    .insert(f);
            }
            prop_assert!(fold_of_volume.values().all(|f| f.len() == 1));
            let sizes: Vec<usize> = (0..k).map(|f| ds.fold_samples(f).len()).collect();
            prop_assert!(sizes.iter().all(|&s| s > 0));
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 2);
            for f in 0..k {
                let train = ds.training_samples(f);
                let test = ds.fold_samples(f);
                prop_assert_eq!(train.len() + test.len(), 2 * volumes);
                prop_assert!(LeakageAudit::of(&train, &test).is_clean());
            }
            Ok(())
        },
    )
}

pub fn cascade_never_adds_false_negatives() -> Result<(), String> {
    check(
        (
            prop::collection::vec((any::<bool>(), 0u8..=255), 1..40),
            prop::collection::vec(any::<bool>(), 12),
            any::<bool>(),
        ),
        |(items, keep, conditioned)| {
            let samples: Vec<TripletSample> = items
                .iter()
                .enumerate()
                .map(|(i, &(p, v))| {
                    let mut data = vec![0.0; 3 * 2 * 2];
                    data[0] = v as f32 / 255.0;
                    data[1 + i % 11] += (i % 7) as f32 / 7.0;
                    TripletSample {
                        id: format!("s{i}"),
                        stack: Stack::new(2, data).unwrap(),
                        label: if p { Label::P } else { Label::N },
                        task: Task::Apex,
                        source_volume_id: format!("v{i}"),
                        slice_indices: [1, 2, 3],
                    }
                })
                .collect();
            let refs: Vec<&TripletSample> = samples.iter().collect();
            // score mixes the first voxel with everything else, so masking can move it either way
            let clf = FnClassifier(|s: &Stack| {
                let d = s.data();
                (d[0] as f64 * 1.3 - d[1..].iter().sum::<f32>() as f64 * 0.2 + 0.1).clamp(0.0, 1.0)
            });
            let keep = keep.clone();
            let region = FnRegion(move |s: &Stack| Mask::new(s.size(), keep.clone()).unwrap());
            let mode = if conditioned {
                CascadeMode::LabelConditioned
            } else {
                CascadeMode::LabelFree
            };
            let decisions = improve_predictions(&refs, &clf, &region, mode).unwrap();
            prop_assert_eq!(decisions.len(), samples.len());
            let ids: BTreeSet<&str> = decisions.iter().map(|d| d.sample_id.as_str()).collect();
            prop_assert_eq!(ids.len(), samples.len());
            let (mut fn_before, mut fn_after) = (0, 0);
            for (s, d) in samples.iter().zip(&decisions) {
                prop_assert_eq!(&d.sample_id, &s.id);
                if d.initial_label == Label::P {
                    prop_assert!(!d.reprediction_applied);
                    prop_assert_eq!(d.final_label, Label::P);
                }
                if conditioned && s.label == Label::N {
                    prop_assert!(!d.reprediction_applied);
                }
                fn_before += usize::from(s.label == Label::P && d.initial_label == Label::N);
                fn_after += usize::from(s.label == Label::P && d.final_label == Label::N);
            }
            prop_assert!(fn_after <= fn_before);
            Ok(())
        },
    )
}
