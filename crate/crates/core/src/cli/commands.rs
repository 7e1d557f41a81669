use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{BuildKind, Cli, CliError, Command, ManifestIo, MaskArg, PipelineConfig, ProviderKind, ScrapeMode};
use crate::corpus::{
    assign_splits, bootstrap_binary_manifest, build_food_type_manifest, fetched_images, CorpusStore, DatasetManifest,
    FoodDetector, ReviewDecisions,
};
use crate::evalkit::{ablate, cross_validate, split_sizes};
use crate::fusion::{predict, read_feature_file, train, FeatureSource, FeatureTable, FusionHeadParams, ModalityMask};
use crate::geogrid::{enumerate_grid, GridSpec, RegionSet};
use crate::scrape::{
    scrape_by_keywords, scrape_by_location, simulate_world, HttpProvider, PostProvider, SimWorldConfig,
};
use crate::seed::derive_seed;
use crate::text::{default_stopwords, load_stopwords, sorted_frequencies, strip_food_name_hashtags, word_frequencies, KeywordList};
use crate::trends::{analyze_trends, export_report, export_word_frequencies, DetectionFile};

struct Ctx {
    cfg: PipelineConfig,
    seed: u64,
}

impl Ctx {
    fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    fn grid(&self) -> Result<&GridSpec, CliError> {
        self.cfg
            .grid
            .as_ref()
            .ok_or_else(|| CliError::Validation("config has no [grid] section".into()))
    }

    fn keywords(&self) -> Result<KeywordList, CliError> {
        match &self.cfg.paths.keywords {
            Some(p) => Ok(KeywordList::load(p)?),
            None => Ok(KeywordList::kiswahili_default()),
        }
    }

    fn decisions(&self) -> Result<ReviewDecisions, CliError> {
        match &self.cfg.paths.decisions {
            Some(p) => Ok(ReviewDecisions::load(p)?),
            None => Ok(ReviewDecisions::new()),
        }
    }

    fn store(&self) -> Result<CorpusStore, CliError> {
        Ok(CorpusStore::open(&self.cfg.paths.store)?)
    }

    fn manifest_path(&self, given: Option<PathBuf>) -> PathBuf {
        given.unwrap_or_else(|| self.cfg.work_path("food_types.jsonl"))
    }

    fn manifest(&self, given: Option<PathBuf>) -> Result<(PathBuf, DatasetManifest), CliError> {
        let path = self.manifest_path(given);
        let m = DatasetManifest::load(&path)?;
        Ok((path, m))
    }

    fn features(&self) -> Result<(FeatureTable, Option<FeatureTable>), CliError> {
        let images = read_feature_file(self.cfg.image_features())?;
        let text_path = self.cfg.text_features();
        let texts = if text_path.exists() {
            Some(read_feature_file(text_path)?)
        } else {
            log::warn!("no text features at {}; captions are read as zeros", text_path.display());
            None
        };
        Ok((images, texts))
    }

    fn regions(&self) -> Result<RegionSet, CliError> {
        match &self.cfg.paths.regions {
            Some(p) => Ok(RegionSet::from_geojson_file(p)?),
            None => Ok(RegionSet::new(Vec::new())?),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn save_manifest(path: &Path, m: &DatasetManifest) -> Result<(), CliError> {
    ensure_parent(path)?;
    Ok(m.save(path)?)
}

fn json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub(super) fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let cfg = PipelineConfig::default();
            cfg.validate()?;
            cfg
        }
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    let ctx = Ctx { cfg, seed };
    match cli.command {
        Command::Grid { out } => grid(&ctx, out),
        Command::Scrape { mode, provider } => scrape(&ctx, mode, provider),
        Command::Build { kind } => match kind {
            BuildKind::FoodTypes { out } => build_food_types(&ctx, out),
            BuildKind::Binary { head, positives, out } => build_binary(&ctx, &head, positives, out),
        },
        Command::Split(io) => split(&ctx, io),
        Command::StubFeatures { manifests } => stub_features(&ctx, &manifests),
        Command::Train { manifest, fold, mask, out } => train_cmd(&ctx, manifest, fold, mask, out),
        Command::Eval { manifest, out } => eval(&ctx, manifest, out),
        Command::Ablate { manifest, out } => ablate_cmd(&ctx, manifest, out),
        Command::Trends { head, manifest, out } => trends(&ctx, head, manifest, out),
        Command::StripCaptions(io) => strip_captions(&ctx, io),
        Command::Wordfreq { manifest, out } => wordfreq(&ctx, manifest, out),
    }
}

fn grid(ctx: &Ctx, out: Option<PathBuf>) -> Result<(), CliError> {
    let points = enumerate_grid(ctx.grid()?)?;
    let round = |v: f64| (v * 1e6).round() / 1e6;
    let text: String = points
        .iter()
        .map(|p| format!("{},{}\n", round(p.lat), round(p.lon)))
        .collect();
    match out {
        Some(path) => write_text(&path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn scrape(ctx: &Ctx, mode: ScrapeMode, provider: ProviderKind) -> Result<(), CliError> {
    let keywords = ctx.keywords()?;
    let provider: Box<dyn PostProvider> = match provider {
        ProviderKind::Sim => {
            let sim = &ctx.cfg.sim;
            let world = SimWorldConfig {
                seed: ctx.stage_seed("sim"),
                n_locations: sim.n_locations,
                posts_per_location: sim.posts_per_location,
                keyword_caption_probability: sim.keyword_caption_probability,
                boxes: ctx.grid()?.boxes.clone(),
                keywords: if sim.keywords.is_empty() {
                    keywords.names().map(str::to_string).collect()
                } else {
                    sim.keywords.clone()
                },
                page_size: sim.page_size,
            };
            Box::new(simulate_world(&world).map_err(CliError::Validation)?)
        }
        ProviderKind::Env => Box::new(HttpProvider::from_env().map_err(CliError::Io)?),
    };
    let mut store = ctx.store()?;
    let stats = match mode {
        ScrapeMode::Location => scrape_by_location(ctx.grid()?, provider.as_ref(), &mut store, &ctx.cfg.scrape)?,
        ScrapeMode::Keywords => {
            let names: Vec<String> = keywords.names().map(str::to_string).collect();
            scrape_by_keywords(&names, provider.as_ref(), &mut store, &ctx.cfg.scrape)?
        }
    };
    print!("{}", json(&stats));
    Ok(())
}

fn print_counts(m: &DatasetManifest) {
    for (name, count) in m.classes.iter().zip(m.class_counts()) {
        println!("{name}\t{count}");
    }
}

fn build_food_types(ctx: &Ctx, out: Option<PathBuf>) -> Result<(), CliError> {
    let store = ctx.store()?;
    let m = build_food_type_manifest(&store, &ctx.keywords()?, ctx.cfg.build.min_class_size, &ctx.decisions()?)?;
    save_manifest(&ctx.manifest_path(out), &m)?;
    print_counts(&m);
    Ok(())
}

fn build_binary(ctx: &Ctx, head: &Path, positives: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let head = FusionHeadParams::load(head)?;
    let (_, positives) = ctx.manifest(positives)?;
    let (images, texts) = ctx.features()?;
    let detector = FoodDetector {
        head: &head,
        image_features: &images,
        text_features: texts.as_ref(),
        food_class: 0,
    };
    let b = &ctx.cfg.build;
    let m = bootstrap_binary_manifest(
        &positives,
        &ctx.store()?,
        &detector,
        b.food_threshold,
        &ctx.decisions()?,
        b.target_per_class,
        ctx.stage_seed("binary"),
    )?;
    save_manifest(&out.unwrap_or_else(|| ctx.cfg.work_path("food_nonfood.jsonl")), &m)?;
    print_counts(&m);
    Ok(())
}

fn split(ctx: &Ctx, io: ManifestIo) -> Result<(), CliError> {
    let (path, m) = ctx.manifest(io.manifest)?;
    let m = assign_splits(&m, ctx.stage_seed("split"))?;
    save_manifest(&io.out.unwrap_or(path), &m)?;
    for (name, n) in split_sizes(&m) {
        println!("{name}\t{n}");
    }
    Ok(())
}

fn stub_features(ctx: &Ctx, manifests: &[PathBuf]) -> Result<(), CliError> {
    let mut labels: HashMap<String, String> = HashMap::new();
    for path in manifests {
        let m = DatasetManifest::load(path)?;
        for e in &m.examples {
            labels.insert(e.example_id.clone(), m.classes[e.label].clone());
        }
    }
    let keywords = ctx.keywords()?;
    let store = ctx.store()?;
    let rows: Vec<(String, Option<String>, String)> = store
        .sorted_records()
        .into_iter()
        .flat_map(|post| {
            let caption = strip_food_name_hashtags(post.caption.as_deref().unwrap_or(""), &keywords);
            let labels = &labels;
            fetched_images(post).map(move |(id, _)| {
                let label = labels.get(&id).cloned();
                (id, label, caption.clone())
            })
        })
        .collect();
    let stub = ctx.cfg.stub.clone();
    let stub = crate::fusion::stub::StubExtractor {
        seed: ctx.stage_seed("stub"),
        ..stub
    };
    let (images, texts) = stub.tables(rows.iter().map(|(i, l, c)| (i.as_str(), l.as_deref(), c.as_str())))?;
    for (table, path) in [(&images, ctx.cfg.image_features()), (&texts, ctx.cfg.text_features())] {
        ensure_parent(&path)?;
        table.write(&path)?;
    }
    println!("{} images, image dim {}, text dim {}", images.len(), images.dim(), texts.dim());
    Ok(())
}

fn mask(arg: MaskArg) -> ModalityMask {
    match arg {
        MaskArg::Fused => ModalityMask::Fused,
        MaskArg::Image => ModalityMask::ImageOnly,
        MaskArg::Caption => ModalityMask::TextOnly,
    }
}

fn train_config(ctx: &Ctx) -> crate::fusion::TrainConfig {
    crate::fusion::TrainConfig {
        seed: ctx.stage_seed("train"),
        ..ctx.cfg.train.clone()
    }
}

fn train_cmd(
    ctx: &Ctx,
    manifest: Option<PathBuf>,
    fold: Option<u8>,
    mask_arg: MaskArg,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (_, m) = ctx.manifest(manifest)?;
    let (images, texts) = ctx.features()?;
    let src = FeatureSource::new(&images, texts.as_ref())?;
    let cfg = crate::fusion::TrainConfig {
        mask: mask(mask_arg),
        ..train_config(ctx)
    };
    let (head, history) = train(&m, &src, fold, &cfg)?;
    let out = out.unwrap_or_else(|| ctx.cfg.work_path("head.bin"));
    ensure_parent(&out)?;
    head.save(&out)?;
    write_text(&out.with_extension("history.json"), &json(&history))?;
    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "kept epoch {} of {}; final train loss {:.5}",
        history.best_epoch,
        history.epochs.len(),
        last.train_loss
    );
    Ok(())
}

fn eval(ctx: &Ctx, manifest: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let (_, m) = ctx.manifest(manifest)?;
    let (images, texts) = ctx.features()?;
    let src = FeatureSource::new(&images, texts.as_ref())?;
    let report = cross_validate(&m, &src, &train_config(ctx))?;
    let dir = out.unwrap_or_else(|| ctx.cfg.work_path("eval"));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    report.write(&dir)?;
    println!(
        "top-1 {:.2} ± {:.2}  top-{} {:.2} ± {:.2}",
        report.top1_mean, report.top1_std, report.top3_k, report.top3_mean, report.top3_std
    );
    Ok(())
}

fn ablate_cmd(ctx: &Ctx, manifest: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let (_, m) = ctx.manifest(manifest)?;
    let (images, texts) = ctx.features()?;
    let src = FeatureSource::new(&images, texts.as_ref())?;
    let pairs: Vec<(String, String)> = ctx
        .cfg
        .eval
        .confusion_pairs
        .iter()
        .map(|[a, b]| (a.clone(), b.clone()))
        .collect();
    let report = ablate(&m, &src, &train_config(ctx), &pairs)?;
    let dir = out.unwrap_or_else(|| ctx.cfg.work_path("ablation"));
    let csv = report.to_csv();
    write_text(&dir.join("ablation.csv"), &csv)?;
    write_text(&dir.join("ablation.json"), &json(&report))?;
    print!("{csv}");
    Ok(())
}

fn trends(ctx: &Ctx, head: Option<PathBuf>, manifest: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let head = FusionHeadParams::load(head.unwrap_or_else(|| ctx.cfg.work_path("head.bin")))?;
    let (_, m) = ctx.manifest(manifest)?;
    if m.n_classes() != head.n_classes {
        return Err(CliError::Validation(format!(
            "manifest has {} classes but the head outputs {}",
            m.n_classes(),
            head.n_classes
        )));
    }
    let (images, texts) = ctx.features()?;
    let store = ctx.store()?;
    let mut predictions = Vec::new();
    let mut geo = HashMap::new();
    for post in store.sorted_records() {
        for (id, _) in fetched_images(post) {
            let Some(img) = images.get(&id) else { continue };
            let txt = texts.as_ref().and_then(|t| t.get(&id));
            predictions.push(predict(&head, &id, img, txt)?);
            if let Some(g) = &post.geo {
                geo.insert(id, (g.lat, g.lon));
            }
        }
    }
    let detections = match &ctx.cfg.paths.detections {
        Some(p) => DetectionFile::load(p)?,
        None => DetectionFile::default(),
    };
    let regions = ctx.regions()?;
    let report = analyze_trends(&predictions, &m.classes, &detections, &geo, &regions, &ctx.cfg.trends)?;
    export_report(&report, &regions, out.unwrap_or_else(|| ctx.cfg.work_path("trends")))?;
    for (label, count) in &report.per_food_counts {
        println!("{label}\t{count}");
    }
    Ok(())
}

fn strip_captions(ctx: &Ctx, io: ManifestIo) -> Result<(), CliError> {
    let keywords = ctx.keywords()?;
    let (path, mut m) = ctx.manifest(io.manifest)?;
    for e in &mut m.examples {
        e.caption = strip_food_name_hashtags(&e.caption, &keywords);
    }
    save_manifest(&io.out.unwrap_or(path), &m)
}

fn wordfreq(ctx: &Ctx, manifest: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let captions: Vec<String> = match manifest {
        Some(path) => DatasetManifest::load(path)?
            .examples
            .into_iter()
            .map(|e| e.caption)
            .collect(),
        None => ctx
            .store()?
            .sorted_records()
            .into_iter()
            .filter_map(|p| p.caption.clone())
            .collect(),
    };
    let stopwords = match &ctx.cfg.paths.stopwords {
        Some(p) => load_stopwords(p)?,
        None => default_stopwords(),
    };
    let sorted = sorted_frequencies(&word_frequencies(&captions, &stopwords));
    let path = out.unwrap_or_else(|| ctx.cfg.work_path("wordfreq.csv"));
    ensure_parent(&path)?;
    export_word_frequencies(&sorted, &path)?;
    for (word, count) in sorted.iter().take(20) {
        println!("{word}\t{count}");
    }
    Ok(())
}
