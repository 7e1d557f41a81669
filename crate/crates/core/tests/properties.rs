mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use proptest::prelude::*;

use foodtrend::corpus::{assign_splits, Fold, N_FOLDS};
use foodtrend::evalkit::{confusion_matrix, topk_accuracy};
use foodtrend::fusion::{FeatureTable, Modality, Prediction};
use foodtrend::geogrid::{enumerate_grid, GeoBoundingBox, GridSpec, Polygon, Region, RegionSet};
use foodtrend::text::{normalize, strip_food_name_hashtags, KeywordList};
use foodtrend::trends::{analyze_trends, Detection, DetectionFile, TrendConfig, TrendReport};

fn arb_box(stride_lat: f64, stride_lon: f64) -> impl Strategy<Value = GeoBoundingBox> {
    (
        -800i32..800,
        -1700i32..1700,
        0usize..12,
        0usize..12,
        prop_oneof![Just(0.0), 0.1f64..0.9],
        prop_oneof![Just(0.0), 0.1f64..0.9],
    )
        .prop_map(move |(lat, lon, n_lat, n_lon, r_lat, r_lon)| {
            let min_lat = lat as f64 * 0.01;
            let min_lon = lon as f64 * 0.01;
            GeoBoundingBox::new(
                min_lat,
                min_lat + (n_lat as f64 + r_lat) * stride_lat,
                min_lon,
                min_lon + (n_lon as f64 + r_lon) * stride_lon,
            )
        })
}

fn arb_grid_case() -> impl Strategy<Value = (Vec<GeoBoundingBox>, f64, f64)> {
    (1u32..50, 1u32..50).prop_flat_map(|(a, b)| {
        let (sl, so) = (a as f64 * 0.005, b as f64 * 0.005);
        (proptest::collection::vec(arb_box(sl, so), 1..4), Just(sl), Just(so))
    })
}

/// Winding number of a closed ring around `p`.
fn winding(ring: &[(f64, f64)], p: (f64, f64)) -> i32 {
    let mut w = 0;
    for i in 0..ring.len() {
        let a = ring[i];
        let b = ring[(i + 1) % ring.len()];
        let side = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if a.0 <= p.0 {
            if b.0 > p.0 && side > 0.0 {
                w += 1;
            }
        } else if b.0 <= p.0 && side < 0.0 {
            w -= 1;
        }
    }
    w
}

fn segment_distance(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((a.0 + t * dx - p.0).powi(2) + (a.1 + t * dy - p.1).powi(2)).sqrt()
}

/// A simple star-shaped ring around the origin.
fn arb_star() -> impl Strategy<Value = Vec<(f64, f64)>> {
    proptest::collection::vec((0.0f64..1.0, 0.2f64..2.0), 3..12).prop_map(|mut spokes| {
        let n = spokes.len() as f64;
        spokes.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        spokes
            .iter()
            .enumerate()
            .map(|(i, &(jitter, r))| {
                let theta = (i as f64 + 0.8 * jitter) / n * std::f64::consts::TAU;
                (r * theta.sin(), r * theta.cos())
            })
            .collect()
    })
}

fn prediction(id: String, probabilities: Vec<f64>) -> Prediction {
    let top_label = foodtrend::fusion::argmax(&probabilities);
    Prediction {
        example_id: id,
        confidence: probabilities[top_label],
        top_label,
        probabilities,
    }
}

fn arb_probabilities(n_classes: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.001f64..1.0, n_classes).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn trend_classes() -> Vec<String> {
    ["cake", "ugali", "pilau", "chapati"].map(String::from).to_vec()
}

fn trend_regions() -> RegionSet {
    let square = |lat0: f64| Polygon::new(vec![(lat0, 0.0), (lat0, 1.0), (lat0 + 1.0, 1.0), (lat0 + 1.0, 0.0)]);
    RegionSet::new(vec![
        Region {
            name: "South".into(),
            polygons: vec![square(0.0)],
        },
        Region {
            name: "North".into(),
            polygons: vec![square(1.0)],
        },
    ])
    .unwrap()
}

type TrendInput = (Vec<Prediction>, DetectionFile, HashMap<String, (f64, f64)>);

fn arb_trend_input() -> impl Strategy<Value = TrendInput> {
    let preds = proptest::collection::vec(arb_probabilities(4), 0..30);
    let dets = proptest::collection::vec((0usize..40, 0usize..5, 0.0f64..=1.0, 0usize..2), 0..20);
    let geo = proptest::collection::vec((0.0f64..2.5, 0.0f64..1.0), 40);
    (preds, dets, geo).prop_map(|(preds, dets, geo)| {
        let preds: Vec<Prediction> = preds
            .into_iter()
            .enumerate()
            .map(|(i, p)| prediction(format!("img{i}"), p))
            .collect();
        let names = ["cake", "ugali", "pilau", "chapati", "fruit"];
        let rows = dets
            .into_iter()
            .map(|(i, l, c, s)| Detection {
                example_id: format!("img{i}"),
                label: names[l].into(),
                confidence: c,
                source: ["yolo", "manual"][s].into(),
            })
            .collect();
        let geo = geo
            .into_iter()
            .enumerate()
            .filter(|(i, _)| i % 3 != 0)
            .map(|(i, g)| (format!("img{i}"), g))
            .collect();
        (preds, DetectionFile { rows }, geo)
    })
}

fn trends_at(input: &TrendInput, threshold: f64) -> TrendReport {
    let cfg = TrendConfig {
        confidence_threshold: threshold,
        ..TrendConfig::default()
    };
    analyze_trends(&input.0, &trend_classes(), &input.1, &input.2, &trend_regions(), &cfg).unwrap()
}

fn dominated(high: &TrendReport, low: &TrendReport) -> bool {
    let le = |a: &BTreeMap<String, u64>, b: &BTreeMap<String, u64>| {
        a.iter().all(|(k, v)| *v <= b.get(k).copied().unwrap_or(0))
    };
    let nested_le = |a: &BTreeMap<String, BTreeMap<String, u64>>,
                     b: &BTreeMap<String, BTreeMap<String, u64>>| {
        a.iter().all(|(k, inner)| b.get(k).is_some_and(|other| le(inner, other)))
    };
    le(&high.per_food_counts, &low.per_food_counts)
        && nested_le(&high.per_source_counts, &low.per_source_counts)
        && nested_le(&high.per_region_counts, &low.per_region_counts)
        && high.n_images_with_food <= low.n_images_with_food
}

proptest! {
    #[test]
    fn grid_matches_nested_loop_oracle((boxes, sl, so) in arb_grid_case()) {
        let spec = GridSpec::new(boxes.clone()).with_stride(sl, so);
        let got: Vec<(f64, f64)> = enumerate_grid(&spec).unwrap().into_iter().map(|p| (p.lat, p.lon)).collect();
        prop_assert_eq!(got, common::grid_oracle(&boxes, sl, so));
    }

    #[test]
    fn grid_points_lie_in_some_box((boxes, sl, so) in arb_grid_case()) {
        let spec = GridSpec::new(boxes.clone()).with_stride(sl, so);
        for p in enumerate_grid(&spec).unwrap() {
            prop_assert!(boxes.iter().any(|b| b.contains(p.lat, p.lon, 1e-9)));
        }
    }

    #[test]
    fn even_odd_agrees_with_winding_number(
        ring in arb_star(),
        points in proptest::collection::vec((-2.5f64..2.5, -2.5f64..2.5), 50),
    ) {
        let poly = Polygon::new(ring.clone());
        for p in points {
            let near_edge = (0..ring.len()).any(|i| segment_distance(ring[i], ring[(i + 1) % ring.len()], p) < 1e-9);
            if near_edge {
                continue;
            }
            prop_assert_eq!(poly.contains(p.0, p.1), winding(&ring, p) != 0, "{:?}", p);
        }
    }

    #[test]
    fn vertices_count_as_inside(ring in arb_star()) {
        let poly = Polygon::new(ring.clone());
        for v in ring {
            prop_assert!(poly.contains(v.0, v.1));
        }
    }

    #[test]
    fn normalize_is_idempotent(raw in "[ -~\\u{00e0}-\\u{00ff}#]{0,80}") {
        let once = normalize(&raw);
        let twice = normalize(&once.detokenize());
        prop_assert_eq!(&once.tokens, &twice.tokens);
        prop_assert_eq!(&once.hashtags, &twice.hashtags);
    }

    #[test]
    fn stripping_removes_every_food_hashtag(
        words in proptest::collection::vec(prop_oneof![
            "[a-z]{1,8}".prop_map(|w| w),
            (0usize..38).prop_map(|i| format!("#{}", KeywordList::kiswahili_default().keywords()[i].concatenated)),
            (0usize..38).prop_map(|i| format!("#{}", KeywordList::kiswahili_default().keywords()[i].concatenated.to_uppercase())),
            (0usize..38).prop_map(|i| KeywordList::kiswahili_default().keywords()[i].name.clone()),
        ], 0..15),
    ) {
        let kw = KeywordList::kiswahili_default();
        let foods: HashSet<&str> = kw.keywords().iter().map(|k| k.concatenated.as_str()).collect();
        let caption = words.join(" ");
        let stripped = strip_food_name_hashtags(&caption, &kw);
        let doc = normalize(&stripped);
        prop_assert!(doc.hashtags.iter().all(|h| !foods.contains(h.as_str())), "{}", stripped);
        prop_assert_eq!(doc.tokens, normalize(&caption).tokens);
    }

    #[test]
    fn topk_is_monotone_in_k(
        rows in proptest::collection::vec((arb_probabilities(6), 0usize..6), 1..60),
    ) {
        let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let preds: Vec<Prediction> = rows.into_iter().enumerate().map(|(i, r)| prediction(i.to_string(), r.0)).collect();
        let mut last = 0.0;
        for k in 1..=6 {
            let acc = topk_accuracy(&preds, &labels, k).unwrap();
            prop_assert!(acc >= last);
            last = acc;
        }
        prop_assert_eq!(last, 100.0);
    }

    #[test]
    fn confusion_rows_sum_to_support(
        rows in proptest::collection::vec((arb_probabilities(4), 0usize..4), 1..80),
    ) {
        let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let preds: Vec<Prediction> = rows.into_iter().enumerate().map(|(i, r)| prediction(i.to_string(), r.0)).collect();
        let classes: Vec<String> = (0..4).map(|c| c.to_string()).collect();
        let cm = confusion_matrix(&preds, &labels, &classes).unwrap();
        for (c, row) in cm.counts.iter().enumerate() {
            let support = labels.iter().filter(|&&l| l == c).count() as u64;
            prop_assert_eq!(row.iter().sum::<u64>(), support);
        }
        prop_assert_eq!(cm.total(), labels.len() as u64);
    }

    #[test]
    fn split_invariants(counts in proptest::collection::vec(10usize..120, 1..6), seed: u64) {
        let names: Vec<String> = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let m = common::manifest_with_counts(&refs, &counts);
        let split = assign_splits(&m, seed).unwrap();
        prop_assert_eq!(split.examples.len(), m.examples.len());
        prop_assert_eq!(&split, &assign_splits(&m, seed).unwrap());
        for (c, &n) in counts.iter().enumerate() {
            let of_class: Vec<Fold> = split.examples.iter().filter(|e| e.label == c).map(|e| e.fold).collect();
            let holdout = of_class.iter().filter(|f| **f == Fold::Holdout).count();
            prop_assert_eq!(holdout, (n / 10).max(1));
            let sizes: Vec<usize> = (0..N_FOLDS).map(|k| of_class.iter().filter(|f| **f == Fold::Fold(k)).count()).collect();
            prop_assert_eq!(holdout + sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn feature_table_round_trips(
        dim in 0usize..9,
        rows in proptest::collection::btree_map("[a-z0-9#]{1,12}", proptest::collection::vec(-1e6f32..1e6, 8), 0..20),
    ) {
        let mut t = FeatureTable::new(Modality::Text, dim);
        for (id, v) in &rows {
            t.insert(id.clone(), v[..dim].to_vec()).unwrap();
        }
        let back = FeatureTable::from_bytes(&t.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (id, v) in &rows {
            let got: Vec<u32> = back.get(id).unwrap().iter().map(|x| x.to_bits()).collect();
            let want: Vec<u32> = v[..dim].iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn raising_the_threshold_never_raises_a_count(input in arb_trend_input(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(dominated(&trends_at(&input, hi), &trends_at(&input, lo)));
    }

    #[test]
    fn trends_ignore_input_order(input in arb_trend_input(), seed: u64) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = input.clone();
        shuffled.0.shuffle(&mut rng);
        shuffled.1.rows.shuffle(&mut rng);
        prop_assert_eq!(trends_at(&input, 0.7), trends_at(&shuffled, 0.7));
    }

    #[test]
    fn disabled_sources_are_not_counted(input in arb_trend_input()) {
        let cfg = TrendConfig {
            sources_enabled: Some(BTreeSet::from(["yolo".to_string()])),
            ..TrendConfig::default()
        };
        let r = analyze_trends(&input.0, &trend_classes(), &input.1, &input.2, &trend_regions(), &cfg).unwrap();
        prop_assert!(r.per_source_counts.keys().all(|s| s == "yolo"));
    }
}
