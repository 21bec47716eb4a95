use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use swire_core::baseline::{BaselineConfig, BowBaseline, Codebook};
use swire_core::dataset::{
    generate_corpus, load_manifest, locate_page, postprocess, save_manifest, CorpusConfig, DEFAULT_BINARIZE_THRESHOLD,
};
use swire_core::encoder::{Encoder, EncoderConfig};
use swire_core::eval::{run_eval, TestSet};
use swire_core::imaging::{load_gray, save_png, CannyParams};
use swire_core::pipeline::{build_index, load_pair_images, manifest_screens, run_query, QueryInput, DEFAULT_GRID};
use swire_core::trainer::{
    carve_validation, split, train, write_trace_csv, LrSchedule, SplitPolicy, TrainConfig, TrainSet,
};
use swire_service::config::{parse_grid, Config};
use swire_service::http::{serve, AppState, TOKEN_ENV};
use swire_service::snapshot::{load_index, load_weights, SnapshotError};
use swire_service::{Snapshot, Sources};

#[derive(Parser)]
#[command(name = "swire", version, about = "Sketch-based UI retrieval")]
struct Cli {
    /// TOML file with defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rectify and binarize raw sketch photos listed in a manifest.
    Preprocess(PreprocessArgs),
    /// Write a synthetic corpus.
    Generate(GenerateArgs),
    /// Train both encoder branches.
    Train(TrainArgs),
    /// Embed screenshots into an index file.
    BuildIndex(BuildIndexArgs),
    /// Top-k report for chance, BoW-HOG and the encoder on the test split.
    Evaluate(EvaluateArgs),
    /// Rank indexed screens for sketch images.
    Query(QueryArgs),
    /// Run the HTTP query service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINARIZE_THRESHOLD)]
    threshold: f32,
    /// Output page width in pixels.
    #[arg(long, default_value_t = 72)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Find corners from the fiducial markers even when the manifest has them.
    #[arg(long)]
    detect: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    designers: usize,
    #[arg(long, default_value_t = 30)]
    apps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    trace_len: usize,
    /// Also write simulated page photos with fiducial markers.
    #[arg(long)]
    raw_photos: bool,
}

#[derive(Args, Clone, Default)]
struct SplitArgs {
    /// Designer whose sketches form the test split.
    #[arg(long)]
    held_out: Option<String>,
    /// Cap on test apps (first N in sorted order).
    #[arg(long)]
    max_test_apps: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output weights file.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    normalize_output: bool,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs without validation gain before stopping; 0 disables.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// constant or cosine.
    #[arg(long)]
    lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Per-step loss CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output index file.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Segments grid, e.g. 3x3, or none.
    #[arg(long)]
    grid: Option<String>,
    /// Index only the test split's screenshots.
    #[arg(long)]
    test_only: bool,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Codebook file; fitted on the training split and written here when absent.
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Also write the JSON report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    no_baseline: bool,
    #[arg(long)]
    baseline_k: Option<usize>,
    #[arg(long)]
    baseline_iters: Option<usize>,
    #[arg(long)]
    canny_sigma: Option<f64>,
    #[arg(long)]
    canny_low: Option<f64>,
    #[arg(long)]
    canny_high: Option<f64>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    mode: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Active cells, row-major, as 0/1 characters (segments mode).
    #[arg(long)]
    segments: Option<String>,
    /// One sketch for full/segments, two or more in order for flow.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    /// Manifest used to serve screenshot thumbnails.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
}

fn pick(flag: Option<PathBuf>, cfg: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| cfg.clone()).ok_or_else(|| anyhow!("--{name} is required (flag or config)"))
}

fn policy(a: &SplitArgs, cfg: &Config) -> SplitPolicy {
    SplitPolicy {
        held_out: a.held_out.clone().or_else(|| cfg.split.held_out.clone()),
        max_test_apps: a.max_test_apps.or(cfg.split.max_test_apps),
    }
}

fn emit(json_mode: bool, value: serde_json::Value, text: impl FnOnce() -> String) {
    if json_mode {
        println!("{value}");
    } else {
        print!("{}", text());
    }
}

fn cmd_generate(a: GenerateArgs, json_mode: bool) -> Result<()> {
    let cfg = CorpusConfig {
        n: a.n,
        designers: a.designers,
        apps: a.apps,
        seed: a.seed,
        trace_len: a.trace_len,
        raw_photos: a.raw_photos,
        ..CorpusConfig::default()
    };
    let m = generate_corpus(&cfg, &a.out).with_context(|| format!("generating into {}", a.out.display()))?;
    emit(json_mode, json!({ "pairs": m.pairs.len(), "dir": a.out }), || {
        format!("wrote {} pairs to {}\n", m.pairs.len(), a.out.display())
    });
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs, cfg: &Config, json_mode: bool) -> Result<()> {
    let path = pick(a.manifest, &cfg.manifest, "manifest")?;
    let mut m = load_manifest(&path)?;
    let out_dir = m.root.join("sketches");
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut done = 0;
    let root = m.root.clone();
    for r in m.pairs.iter_mut() {
        let Some(raw) = &r.sketch_raw else { continue };
        let photo = load_gray(root.join(raw)).with_context(|| format!("pair {}: reading {}", r.key(), raw.display()))?;
        let corners = match (&r.corners, a.detect) {
            (Some(c), false) => *c,
            _ => locate_page(&photo, a.width, a.height).with_context(|| format!("pair {}: locating page", r.key()))?,
        };
        let clean = postprocess(&photo, &corners, a.width, a.height, a.threshold)
            .with_context(|| format!("pair {}", r.key()))?;
        let rel = r.sketch.clone().unwrap_or_else(|| PathBuf::from(format!("sketches/{}.png", r.key())));
        save_png(&clean, root.join(&rel))?;
        r.sketch = Some(rel);
        r.corners = Some(corners);
        done += 1;
    }
    save_manifest(&m, &path)?;
    emit(json_mode, json!({ "processed": done }), || format!("processed {done} sketches\n"));
    Ok(())
}

fn encoder_config(a: &TrainArgs, cfg: &Config) -> Result<EncoderConfig> {
    let name = a.profile.clone().or_else(|| cfg.encoder.profile.clone()).unwrap_or_else(|| "desk".into());
    let mut ec = EncoderConfig::by_name(&name)?;
    ec.normalize_output = a.normalize_output || cfg.encoder.normalize_output.unwrap_or(false);
    Ok(ec)
}

fn cmd_train(a: TrainArgs, cfg: &Config, json_mode: bool) -> Result<()> {
    let manifest = pick(a.manifest.clone(), &cfg.manifest, "manifest")?;
    let out = pick(a.weights.clone(), &cfg.weights, "weights")?;
    let m = load_manifest(&manifest)?;
    let t = &cfg.train;
    let defaults = TrainConfig::default();
    let patience = a.patience.or(t.patience).or(defaults.patience).filter(|&p| p > 0);
    let tc = TrainConfig {
        batch_size: a.batch_size.or(t.batch_size).unwrap_or(defaults.batch_size),
        lr: a.lr.or(t.lr).unwrap_or(defaults.lr),
        margin: a.margin.or(t.margin).unwrap_or(defaults.margin),
        epochs: a.epochs.or(t.epochs).unwrap_or(defaults.epochs),
        seed: a.seed.or(t.seed).unwrap_or(defaults.seed),
        patience,
        val_fraction: a.val_fraction.or(t.val_fraction).unwrap_or(defaults.val_fraction),
        schedule: a.lr_schedule.or(t.lr_schedule).unwrap_or(defaults.schedule),
    };
    let ec = encoder_config(&a, cfg)?;
    let s = split(&m, &policy(&a.split, cfg))?;
    let (tr, va) = carve_validation(s.train, tc.val_fraction, tc.seed);
    let train_set = TrainSet::new(&ec, &load_pair_images(&m, &tr)?)?;
    let val_set = TrainSet::new(&ec, &load_pair_images(&m, &va)?)?;
    let init = Encoder::build(&ec, a.init_seed.or(cfg.encoder.seed).unwrap_or(0))?;
    eprintln!("training on {} pairs, validating on {}", train_set.len(), val_set.len());
    let outcome = train(&tc, init, &train_set, Some(&val_set), a.checkpoints.as_deref(), |e| {
        let val = match (e.val_top1, e.val_top10) {
            (Some(t1), Some(t10)) => format!(" val top1 {t1:.3} top10 {t10:.3}"),
            _ => String::new(),
        };
        eprintln!("epoch {:>4} loss {:.4}{val} ({:.1}s)", e.epoch, e.mean_loss, e.seconds);
    })?;
    outcome.encoder.save(&out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(p) = &a.trace {
        write_trace_csv(&outcome.trace, p)?;
    }
    let last = outcome.epochs.last();
    emit(
        json_mode,
        json!({
            "weights": out,
            "epochs_run": outcome.epochs.len(),
            "best_epoch": outcome.best_epoch,
            "stopped_early": outcome.stopped_early,
            "final_loss": last.map(|e| e.mean_loss),
        }),
        || format!("wrote {} after {} epochs (best {:?})\n", out.display(), outcome.epochs.len(), outcome.best_epoch),
    );
    Ok(())
}

fn cmd_build_index(a: BuildIndexArgs, cfg: &Config, json_mode: bool) -> Result<()> {
    let manifest = pick(a.manifest, &cfg.manifest, "manifest")?;
    let weights = pick(a.weights, &cfg.weights, "weights")?;
    let out = pick(a.index, &cfg.index, "index")?;
    let grid = match a.grid.or_else(|| cfg.grid.clone()) {
        Some(g) => parse_grid(&g)?,
        None => Some(DEFAULT_GRID),
    };
    let enc = load_weights(&weights)?;
    let mut m = load_manifest(&manifest)?;
    if a.test_only {
        m.pairs = split(&m, &policy(&a.split, cfg))?.test;
    }
    let idx = build_index(&enc, &manifest_screens(&m)?, grid)?;
    idx.save(&out).with_context(|| format!("writing {}", out.display()))?;
    emit(json_mode, json!({ "index": out, "items": idx.len(), "fingerprint": idx.fingerprint() }), || {
        format!("indexed {} screens into {} ({})\n", idx.len(), out.display(), idx.fingerprint())
    });
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, cfg: &Config, json_mode: bool) -> Result<()> {
    let weights = pick(a.weights, &cfg.weights, "weights")?;
    let enc = load_weights(&weights)?;
    let manifest = pick(a.manifest, &cfg.manifest, "manifest")?;
    let m = load_manifest(&manifest)?;
    let s = split(&m, &policy(&a.split, cfg))?;
    let test = load_pair_images(&m, &s.test)?;
    let b = &cfg.baseline;
    let d = BaselineConfig::default();
    let bc = BaselineConfig {
        k: a.baseline_k.or(b.k).unwrap_or(d.k),
        iters: a.baseline_iters.or(b.iters).unwrap_or(d.iters),
        seed: b.seed.unwrap_or(d.seed),
        canny: CannyParams {
            sigma: a.canny_sigma.or(b.canny_sigma).unwrap_or(d.canny.sigma),
            low: a.canny_low.or(b.canny_low).unwrap_or(d.canny.low),
            high: a.canny_high.or(b.canny_high).unwrap_or(d.canny.high),
        },
        ..d
    };
    let codebook_path = a.codebook.or_else(|| cfg.codebook.clone());
    let baseline = if a.no_baseline {
        None
    } else {
        Some(fit_or_load_baseline(bc, codebook_path.as_deref(), &m, &s.train)?)
    };
    let set = TestSet {
        ids: test.iter().map(|t| t.0.clone()).collect(),
        sketches: test.iter().map(|t| &t.1).collect(),
        screenshots: test.iter().map(|t| &t.2).collect(),
    };
    let report = run_eval(&set, Some(&enc), baseline.as_ref())?;
    if let Some(p) = &a.report {
        report.save(p)?;
    }
    if json_mode {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn fit_or_load_baseline(
    bc: BaselineConfig,
    path: Option<&Path>,
    m: &swire_core::dataset::Manifest,
    train_recs: &[swire_core::dataset::PairRecord],
) -> Result<BowBaseline> {
    if let Some(p) = path.filter(|p| p.is_file()) {
        return Ok(BowBaseline { config: bc, codebook: Codebook::load(p)? });
    }
    let pairs = load_pair_images(m, train_recs)?;
    let sketches: Vec<_> = pairs.iter().map(|p| p.1.clone()).collect();
    let shots: Vec<_> = pairs.iter().map(|p| p.2.clone()).collect();
    eprintln!("fitting {}-word codebook on {} training pairs", bc.k, pairs.len());
    let b = BowBaseline::fit(bc, &sketches, &shots)?;
    if let Some(p) = path {
        b.codebook.save(p)?;
    }
    Ok(b)
}

fn parse_mask(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .filter(|c| !matches!(c, ',' | ' '))
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => bail!("--segments: expected 0/1 characters, found {c:?}"),
        })
        .collect()
}

fn cmd_query(a: QueryArgs, cfg: &Config, json_mode: bool) -> Result<()> {
    if !(1..=100).contains(&a.k) {
        bail!("--k must be in [1, 100], got {}", a.k);
    }
    let weights = pick(a.weights, &cfg.weights, "weights")?;
    let index = pick(a.index, &cfg.index, "index")?;
    let enc = load_weights(&weights)?;
    let idx = load_index(&index)?;
    let load = |p: &PathBuf| load_gray(p).with_context(|| format!("reading {}", p.display()));
    let one = || -> Result<_> {
        match a.images.as_slice() {
            [p] => load(p),
            _ => bail!("{} mode takes exactly one image, got {}", a.mode, a.images.len()),
        }
    };
    let input = match a.mode.as_str() {
        "full" => QueryInput::Full(one()?),
        "segments" => {
            let mask = a.segments.as_deref().ok_or_else(|| anyhow!("--segments is required in segments mode"))?;
            QueryInput::Segments { image: one()?, mask: parse_mask(mask)? }
        }
        "flow" => QueryInput::Flow(a.images.iter().map(load).collect::<Result<_>>()?),
        other => bail!("--mode must be full, segments or flow, got {other:?}"),
    };
    if a.segments.is_some() && a.mode != "segments" {
        bail!("--segments only applies to segments mode");
    }
    let ranked = run_query(&enc, &idx, &input, a.k)?;
    if json_mode {
        let results: Vec<_> = ranked.0.iter().map(|r| json!({ "id": r.id, "distance": r.distance })).collect();
        println!("{}", json!({ "results": results, "index_fingerprint": idx.fingerprint() }));
    } else {
        for r in &ranked.0 {
            println!("{} {}", r.id, r.distance);
        }
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs, cfg: &Config) -> Result<()> {
    let sources = Sources {
        weights: pick(a.weights, &cfg.weights, "weights")?,
        index: pick(a.index, &cfg.index, "index")?,
        manifest: a.manifest.or_else(|| cfg.manifest.clone()),
    };
    let snap = Snapshot::load(&sources)?;
    let token = std::env::var(TOKEN_ENV).ok();
    if token.is_none() {
        eprintln!("{TOKEN_ENV} not set; POST /index/reload is disabled");
    }
    let state = Arc::new(AppState::new(snap, Some(sources), token));
    let port = a.port.or(cfg.port).unwrap_or(8080);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(state, port))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a, cli.json),
        Cmd::Preprocess(a) => cmd_preprocess(a, &cfg, cli.json),
        Cmd::Train(a) => cmd_train(a, &cfg, cli.json),
        Cmd::BuildIndex(a) => cmd_build_index(a, &cfg, cli.json),
        Cmd::Evaluate(a) => cmd_evaluate(a, &cfg, cli.json),
        Cmd::Query(a) => cmd_query(a, &cfg, cli.json),
        Cmd::Serve(a) => cmd_serve(a, &cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // missing artifacts are a usage problem, like a bad flag
            let missing = matches!(
                e.downcast_ref::<SnapshotError>(),
                Some(SnapshotError::WeightsMissing(_) | SnapshotError::IndexMissing(_))
            );
            ExitCode::from(if missing { 2 } else { 1 })
        }
    }
}
