//! End-to-end acceptance checks. Each test prints one line:
//!
//! ```text
//! [PASS] 07 trainability (24.1 s / 60 s): train 100.00%, holdout 99.85%
//! ```
//!
//! Tests are serialized so their runtimes are measured without contention.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{sim_grid, sim_world, tree_bytes, Crashing, Recording, REFERENCE_CLASS_COUNTS};
use foodtrend::corpus::{assign_splits, build_food_type_manifest, CorpusStore, DatasetManifest, Fold, ReviewDecisions, N_FOLDS};
use foodtrend::evalkit::{confusion_matrix, mean_std, misclassification_rate, topk_accuracy, ConfusionMatrix};
use foodtrend::fusion::stub::StubExtractor;
use foodtrend::fusion::{
    argmax, loss_and_gradients, train, FeatureSource, FeatureTable, FusionHeadParams, Modality, ModalityMask, Prediction,
    Sample, TrainConfig,
};
use foodtrend::geogrid::{enumerate_grid, GeoBoundingBox, GridSpec, Polygon, Region, RegionSet};
use foodtrend::scrape::{scrape_by_location, ScrapeError, ScrapeLimits};
use foodtrend::text::{normalize, strip_food_name_hashtags, KeywordList};
use foodtrend::trends::{analyze_trends, Detection, DetectionFile, TrendConfig, TrendReport};

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs `body`, prints its verdict line and fails the test on a failed
/// check or an exceeded time budget.
fn criterion(id: u8, name: &str, budget_s: f64, body: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(body))
        .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
    let secs = started.elapsed().as_secs_f64();
    let (pass, detail) = match outcome {
        Ok(d) if secs <= budget_s => (true, d),
        Ok(d) => (false, format!("{d}; over time budget")),
        Err(e) => (false, e),
    };
    println!(
        "[{}] {id:02} {name} ({secs:.1} s / {budget_s} s): {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{id:02} {name}: {detail}");
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fast_limits(workers: usize) -> ScrapeLimits {
    ScrapeLimits {
        max_requests_per_second: 10_000.0,
        max_retries: 2,
        backoff_base: 0.001,
        max_concurrent_fetchers: workers,
        ..ScrapeLimits::default()
    }
}

#[test]
fn grid_matches_oracle() {
    criterion(1, "grid oracle", 5.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..50 {
            let stride_lat = rng.gen_range(1..40) as f64 * 0.005;
            let stride_lon = rng.gen_range(1..40) as f64 * 0.005;
            let boxes: Vec<GeoBoundingBox> = (0..rng.gen_range(1..4))
                .map(|_| {
                    let min_lat = rng.gen_range(-80.0..80.0);
                    let min_lon = rng.gen_range(-170.0..170.0);
                    GeoBoundingBox::new(
                        min_lat,
                        min_lat + rng.gen_range(0.0..0.5),
                        min_lon,
                        min_lon + rng.gen_range(0.0..0.5),
                    )
                })
                .collect();
            let spec = GridSpec::new(boxes.clone()).with_stride(stride_lat, stride_lon);
            let got: Vec<(f64, f64)> = enumerate_grid(&spec)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|p| (p.lat, p.lon))
                .collect();
            ensure(got == common::grid_oracle(&boxes, stride_lat, stride_lon), || format!("case {case} differs"))?;
        }
        let unit = enumerate_grid(&GridSpec::new(vec![GeoBoundingBox::new(-1.0, 0.0, 36.0, 37.0)])).unwrap();
        ensure(unit.len() == 2601, || format!("1 degree box gave {} points", unit.len()))?;
        Ok("50 random cases match; 1x1 degree box at 0.02 gives 2601 points".into())
    });
}

#[test]
fn scrape_is_complete_idempotent_and_resumable() {
    criterion(2, "scrape completeness and resume", 30.0, || {
        let world = sim_world(3, 100, 2);
        let clean = tempfile::tempdir().unwrap();
        let mut store = CorpusStore::open(clean.path()).unwrap();
        scrape_by_location(&sim_grid(), &world, &mut store, &fast_limits(4)).map_err(|e| e.to_string())?;
        ensure(store.len() == 200, || format!("first run stored {} posts", store.len()))?;
        let before = store.len();
        let again = scrape_by_location(&sim_grid(), &world, &mut store, &fast_limits(4)).map_err(|e| e.to_string())?;
        let new = store.len() - before;
        ensure(new == 0 && again.images_fetched == 0, || format!("second run ingested {new} posts"))?;
        drop(store);
        let expected = tree_bytes(clean.path());

        for budget in [25, 180, 420] {
            let dir = tempfile::tempdir().unwrap();
            let mut store = CorpusStore::open(dir.path()).unwrap();
            let crashing = Crashing::new(&world, budget);
            match scrape_by_location(&sim_grid(), &crashing, &mut store, &fast_limits(4)) {
                Err(ScrapeError::Aborted { .. }) => {}
                other => return Err(format!("crash after {budget} calls: unexpected {other:?}")),
            }
            drop(store);
            let mut store = CorpusStore::open(dir.path()).unwrap();
            scrape_by_location(&sim_grid(), &world, &mut store, &fast_limits(4)).map_err(|e| e.to_string())?;
            drop(store);
            ensure(tree_bytes(dir.path()) == expected, || format!("resume after {budget} calls differs"))?;
        }
        Ok("200/200 posts, rerun adds 0, resumes after 25/180/420 calls are byte-identical".into())
    });
}

#[test]
fn rate_limit_holds_over_ten_seconds() {
    criterion(3, "rate limit", 15.0, || {
        let world = sim_world(4, 400, 2);
        let recording = Recording::new(&world, Some(Duration::from_secs(10)));
        let limits = ScrapeLimits {
            max_requests_per_second: 20.0,
            ..fast_limits(8)
        };
        let dir = tempfile::tempdir().unwrap();
        let mut store = CorpusStore::open(dir.path()).unwrap();
        let _ = scrape_by_location(&sim_grid(), &recording, &mut store, &limits);
        let calls = recording.calls.lock().unwrap().len();
        let peak = recording.max_per_second();
        ensure(calls >= 150, || format!("only {calls} requests in 10 s"))?;
        ensure(peak <= 20, || format!("{peak} requests in one second"))?;
        Ok(format!("{calls} requests, busiest 1 s window {peak}"))
    });
}

#[test]
fn splits_are_stratified() {
    criterion(4, "split invariants", 5.0, || {
        let names: Vec<&str> = REFERENCE_CLASS_COUNTS.iter().map(|c| c.0).collect();
        let counts: Vec<usize> = REFERENCE_CLASS_COUNTS.iter().map(|c| c.1).collect();
        let m = common::manifest_with_counts(&names, &counts);
        ensure(m.examples.len() == 8174, || format!("{} examples", m.examples.len()))?;
        let s = assign_splits(&m, 42).map_err(|e| e.to_string())?;
        ensure(s.examples.len() == 8174, || "example count changed".into())?;
        let mut ids: Vec<&str> = s.examples.iter().map(|e| e.example_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        ensure(ids.len() == 8174, || "an example appears twice".into())?;
        for (c, &n) in counts.iter().enumerate() {
            let folds: Vec<Fold> = s.examples.iter().filter(|e| e.label == c).map(|e| e.fold).collect();
            let holdout = folds.iter().filter(|f| **f == Fold::Holdout).count();
            ensure(holdout == n / 10, || format!("{}: holdout {holdout} of {n}", names[c]))?;
            let sizes: Vec<usize> = (0..N_FOLDS).map(|k| folds.iter().filter(|f| **f == Fold::Fold(k)).count()).collect();
            ensure(holdout + sizes.iter().sum::<usize>() == n, || format!("{}: unassigned examples", names[c]))?;
            let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
            ensure(spread <= 1, || format!("{}: fold sizes {sizes:?}", names[c]))?;
        }
        Ok(format!("8174 examples, holdout {}", s.holdout_examples().count()))
    });
}

fn labeled_store(counts: &[(&str, usize)]) -> (tempfile::TempDir, CorpusStore) {
    let dir = tempfile::tempdir().unwrap();
    let mut store = CorpusStore::open(dir.path()).unwrap();
    for (name, n) in counts {
        let tag = name.replace(' ', "");
        for i in 0..*n {
            store.ingest_post(common::post(&format!("{tag}{i}"), &format!("dinner #{tag}"), 1)).unwrap();
        }
    }
    (dir, store)
}

#[test]
fn manifest_drops_small_classes() {
    criterion(5, "manifest thresholding", 2.0, || {
        let kw = KeywordList::kiswahili_default();
        let none = ReviewDecisions::new();
        let (_d1, store) = labeled_store(&[("ugali", 260), ("pilau", 200), ("githeri", 199), ("mukimo", 12)]);
        let m = build_food_type_manifest(&store, &kw, 200, &none).map_err(|e| e.to_string())?;
        ensure(m.classes == ["ugali", "pilau"], || format!("classes {:?}", m.classes))?;
        ensure(m.class_counts().iter().all(|&c| c >= 200), || format!("counts {:?}", m.class_counts()))?;
        let (_d2, store) = labeled_store(&[("ugali", 260), ("pilau", 199)]);
        let m = build_food_type_manifest(&store, &kw, 200, &none).map_err(|e| e.to_string())?;
        ensure(m.classes == ["ugali"], || format!("pilau at 199 kept: {:?}", m.classes))?;
        Ok("classes at 200 kept, at 199 dropped".into())
    });
}

#[test]
fn gradients_match_finite_differences() {
    criterion(6, "gradient check", 5.0, || {
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for point in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + point);
            let head = FusionHeadParams::init(8, 4, 16, 3, point);
            let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let batch: Vec<Sample> = xs
                .iter()
                .map(|x| Sample {
                    x,
                    label: rng.gen_range(0..3),
                })
                .collect();
            let (_, grads) = loss_and_gradients(&head, &batch).map_err(|e| e.to_string())?;
            let analytic: Vec<f64> = grads.values().copied().collect();
            for (i, &a) in analytic.iter().enumerate() {
                let shifted = |delta: f64| {
                    let mut h = head.clone();
                    *h.values_mut().nth(i).unwrap() += delta;
                    loss_and_gradients(&h, &batch).unwrap().0
                };
                let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        ensure(worst < 1e-4, || format!("worst relative error {worst:.2e}"))?;
        Ok(format!("worst relative error {worst:.2e} over 20 points"))
    });
}

fn accuracy(preds: &[Prediction], labels: &[usize]) -> f64 {
    topk_accuracy(preds, labels, 1).unwrap_or(0.0)
}

fn score(src: &FeatureSource<'_>, head: &FusionHeadParams, m: &DatasetManifest, holdout: bool) -> f64 {
    let examples: Vec<_> = m.examples.iter().filter(|e| (e.fold == Fold::Holdout) == holdout).collect();
    let preds = src.predict_all(head, examples.iter().copied()).unwrap();
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    accuracy(&preds, &labels)
}

#[test]
fn fused_head_trains_on_separable_features() {
    criterion(7, "trainability", 60.0, || {
        let classes: Vec<String> = (0..13).map(|c| format!("food{c}")).collect();
        let names: Vec<&str> = classes.iter().map(String::as_str).collect();
        let m = assign_splits(&common::manifest_with_counts(&names, &[500; 13]), 7).unwrap();
        let stub = StubExtractor {
            seed: 7,
            separation: 1.5,
            ..StubExtractor::default()
        };
        let rows: Vec<(String, String, String)> = m
            .examples
            .iter()
            .map(|e| (e.example_id.clone(), classes[e.label].clone(), format!("lunch {}", classes[e.label])))
            .collect();
        let (images, texts) = stub
            .tables(rows.iter().map(|(id, l, c)| (id.as_str(), Some(l.as_str()), c.as_str())))
            .unwrap();
        let src = FeatureSource::new(&images, Some(&texts)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            momentum: 0.9,
            epochs: 12,
            batch_size: 32,
            hidden: 10_000,
            seed: 7,
            ..TrainConfig::default()
        };
        let (head, _) = train(&m, &src, None, &cfg).map_err(|e| e.to_string())?;
        let train_acc = score(&src, &head, &m, false);
        let holdout_acc = score(&src, &head, &m, true);
        let detail = format!("train {train_acc:.2}%, holdout {holdout_acc:.2}%");
        ensure(train_acc >= 99.0 && holdout_acc >= 95.0, || detail.clone())?;
        Ok(detail)
    });
}

#[test]
fn fusion_beats_either_modality() {
    criterion(8, "multimodal gain", 90.0, || {
        // The label is the (image cluster, caption cluster) pair, so either
        // modality alone can tell apart at most a third of the classes.
        let (n_img, n_txt, per_class) = (3, 3, 200);
        let classes: Vec<String> = (0..n_img * n_txt).map(|c| format!("pair{c}")).collect();
        let names: Vec<&str> = classes.iter().map(String::as_str).collect();
        let m = assign_splits(&common::manifest_with_counts(&names, &vec![per_class; classes.len()]), 8).unwrap();
        let stub = StubExtractor {
            seed: 8,
            image_dim: 32,
            text_dim: 16,
            separation: 1.0,
        };
        let text_stub = StubExtractor {
            image_dim: 16,
            ..stub.derive("caption")
        };
        let mut images = FeatureTable::new(Modality::Image, 32);
        let mut texts = FeatureTable::new(Modality::Text, 16);
        for e in &m.examples {
            let (a, b) = (e.label / n_txt, e.label % n_txt);
            images.insert(e.example_id.clone(), stub.image_vector(&e.example_id, Some(&format!("img{a}")))).unwrap();
            texts.insert(e.example_id.clone(), text_stub.image_vector(&e.example_id, Some(&format!("txt{b}")))).unwrap();
        }
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 20,
            hidden: 256,
            seed: 8,
            ..TrainConfig::default()
        };
        let mut acc = BTreeMap::new();
        for (name, mask) in [
            ("fused", ModalityMask::Fused),
            ("image", ModalityMask::ImageOnly),
            ("caption", ModalityMask::TextOnly),
        ] {
            let src = FeatureSource::new(&images, Some(&texts)).unwrap().with_mask(mask);
            let (head, _) = train(&m, &src, None, &cfg).map_err(|e| e.to_string())?;
            acc.insert(name, score(&src, &head, &m, true));
        }
        let detail = format!(
            "holdout fused {:.1}%, image {:.1}%, caption {:.1}%",
            acc["fused"], acc["image"], acc["caption"]
        );
        ensure(acc["fused"] >= 90.0 && acc["image"] <= 45.0 && acc["caption"] <= 45.0, || detail.clone())?;
        Ok(detail)
    });
}

fn prediction(id: usize, probabilities: Vec<f64>) -> Prediction {
    let top_label = argmax(&probabilities);
    Prediction {
        example_id: id.to_string(),
        confidence: probabilities[top_label],
        top_label,
        probabilities,
    }
}

#[test]
fn metric_algebra() {
    criterion(9, "metric algebra", 5.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let classes: Vec<String> = (0..5).map(|c| c.to_string()).collect();
        for set in 0..1000 {
            let n = rng.gen_range(1..40);
            let preds: Vec<Prediction> = (0..n)
                .map(|i| prediction(i, (0..5).map(|_| rng.gen::<f64>()).collect()))
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let top1 = topk_accuracy(&preds, &labels, 1).unwrap();
            let top3 = topk_accuracy(&preds, &labels, 3).unwrap();
            ensure(top1 <= top3, || format!("set {set}: top1 {top1} > top3 {top3}"))?;
            let cm = confusion_matrix(&preds, &labels, &classes).unwrap();
            for (c, row) in cm.counts.iter().enumerate() {
                let support = labels.iter().filter(|&&l| l == c).count() as u64;
                ensure(row.iter().sum::<u64>() == support, || format!("set {set}: row {c} does not sum to support"))?;
            }
        }
        let mut cm = ConfusionMatrix::new(vec!["a".into(), "b".into()]);
        cm.counts = vec![vec![8, 2], vec![3, 7]];
        let rate = misclassification_rate(&cm, 0, 1).unwrap();
        ensure((rate - 0.2).abs() < 1e-12, || format!("rate {rate}"))?;
        let (mean, std) = mean_std(&[80.0, 81.0, 82.0, 83.0, 84.0]);
        ensure((mean - 82.0).abs() < 1e-12 && (std - 1.5811).abs() < 1e-4, || format!("mean {mean}, std {std}"))?;
        Ok(format!("1000 sets ok, rate {rate}, mean {mean}, std {std:.4}"))
    });
}

#[test]
fn caption_stripping_removes_food_hashtags() {
    criterion(10, "caption stripping", 5.0, || {
        let kw = KeywordList::kiswahili_default();
        ensure(kw.len() == 38, || format!("{} shipped names", kw.len()))?;
        let foods: Vec<&str> = kw.keywords().iter().map(|k| k.concatenated.as_str()).collect();
        let filler = ["lunch", "with", "friends", "nairobi", "#kenya", "#foodie", "so", "good", "#weekend"];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for i in 0..10_000 {
            let mut words: Vec<String> = Vec::new();
            let mut plain = Vec::new();
            for _ in 0..rng.gen_range(1..10) {
                let k = &kw.keywords()[rng.gen_range(0..kw.len())];
                match rng.gen_range(0..5) {
                    0 => words.push(format!("#{}", k.concatenated)),
                    1 => words.push(format!("#{}", k.concatenated.to_uppercase())),
                    2 => {
                        words.push(k.name.clone());
                        plain.push(k.name.clone());
                    }
                    _ => words.push(filler[rng.gen_range(0..filler.len())].to_string()),
                }
            }
            let caption = words.join(" ");
            let stripped = strip_food_name_hashtags(&caption, &kw);
            let doc = normalize(&stripped);
            if let Some(h) = doc.hashtags.iter().find(|h| foods.contains(&h.as_str())) {
                return Err(format!("caption {i}: #{h} survived in {stripped:?}"));
            }
            let joined = doc.tokens.join(" ");
            for name in &plain {
                ensure(joined.contains(name.as_str()), || format!("caption {i}: plain {name:?} lost"))?;
            }
        }
        Ok("10000 captions clean, plain names kept".into())
    });
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

fn counts_le(a: &TrendReport, b: &TrendReport) -> bool {
    let le = |x: &BTreeMap<String, u64>, y: &BTreeMap<String, u64>| x.iter().all(|(k, v)| *v <= y.get(k).copied().unwrap_or(0));
    le(&a.per_food_counts, &b.per_food_counts)
        && a.n_images_with_food <= b.n_images_with_food
        && a.per_region_counts
            .iter()
            .all(|(r, c)| b.per_region_counts.get(r).is_some_and(|d| le(c, d)))
}

#[test]
fn trend_threshold_is_monotone() {
    criterion(11, "trend threshold", 5.0, || {
        let classes: Vec<String> = ["cake", "ugali", "pilau"].map(String::from).to_vec();
        let worked = [
            prediction(0, vec![0.9, 0.05, 0.05]),
            prediction(1, vec![0.5, 0.3, 0.2]),
            prediction(2, vec![0.2, 0.71, 0.09]),
        ];
        let cfg = TrendConfig::default();
        ensure(cfg.confidence_threshold == 0.70, || "default threshold".into())?;
        let r = analyze_trends(&worked, &classes, &DetectionFile::default(), &HashMap::new(), &trend_regions(), &cfg)
            .map_err(|e| e.to_string())?;
        let want = BTreeMap::from([("cake".to_string(), 1), ("ugali".to_string(), 1)]);
        ensure(r.per_food_counts == want, || format!("worked example gave {:?}", r.per_food_counts))?;

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for set in 0..100 {
            let preds: Vec<Prediction> = (0..rng.gen_range(0..40))
                .map(|i| prediction(i, (0..3).map(|_| rng.gen::<f64>()).collect()))
                .map(|mut p| {
                    let s: f64 = p.probabilities.iter().sum();
                    p.probabilities.iter_mut().for_each(|x| *x /= s);
                    p.confidence = p.probabilities[p.top_label];
                    p
                })
                .collect();
            let detections = DetectionFile {
                rows: (0..rng.gen_range(0..20))
                    .map(|_| Detection {
                        example_id: rng.gen_range(0..50usize).to_string(),
                        label: classes[rng.gen_range(0..3)].clone(),
                        confidence: rng.gen(),
                        source: "yolo".into(),
                    })
                    .collect(),
            };
            let geo: HashMap<String, (f64, f64)> =
                (0..50).map(|i| (i.to_string(), (rng.gen_range(0.0..2.5), rng.gen_range(0.0..1.0)))).collect();
            let mut thresholds: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
            thresholds.sort_by(f64::total_cmp);
            let reports: Vec<TrendReport> = thresholds
                .iter()
                .map(|&t| {
                    let cfg = TrendConfig {
                        confidence_threshold: t,
                        ..TrendConfig::default()
                    };
                    analyze_trends(&preds, &classes, &detections, &geo, &trend_regions(), &cfg).unwrap()
                })
                .collect();
            for w in reports.windows(2) {
                ensure(counts_le(&w[1], &w[0]), || format!("set {set}: a higher threshold raised a count"))?;
            }
        }
        Ok("worked example {cake: 1, ugali: 1}; 100 random sets monotone".into())
    });
}

#[test]
fn pipeline_dry_run() {
    criterion(12, "end-to-end dry run", 180.0, || {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        common::dry_run(a.path());
        common::dry_run(b.path());
        let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
        ensure(ta.keys().eq(tb.keys()), || "artifact sets differ".into())?;
        if let Some(k) = ta.keys().find(|k| ta[*k] != tb[*k]) {
            return Err(format!("{k} differs between runs"));
        }
        for artifact in ["work/head.bin", "work/eval/eval_report.json", "work/trends/report.json", "work/trends/choropleth.svg"] {
            ensure(ta.contains_key(artifact), || format!("missing {artifact}"))?;
        }
        Ok(format!("{} steps, {} files identical across two runs", common::DRY_RUN_STEPS.len(), ta.len()))
    });
}
