use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gala_core::api::{Engine, QueryRequest, BACKGROUND_CHECKPOINT, DEFAULT_K, FOREGROUND_CHECKPOINT};
use gala_core::dataset::{ingest, load_pairs, FilterConfig, IngestConfig, PairRecord, Split};
use gala_core::encoder::checkpoint::{load_checkpoint, save_checkpoint};
use gala_core::evaluation::{
    k_for_fraction, map_at_n, placement_eval, recall_at_k, sensitivity_eval, EvalReport, RelevanceJudgment,
    SensitivityConfig,
};
use gala_core::placement::{heatmap_png, place, place_object, PlacementConfig};
use gala_core::retrieval::{build_index, load_index, query_topk, save_index};
use gala_core::synthetic::{write_synthetic_corpus, SynthConfig};
use gala_core::training::{alternating_train, pretrain, LogEntry, PretrainConfig, TrainConfig, TrainData, Towers};
use gala_core::transforms::TransformKind;
use gala_core::{BoundingBox, EncoderConfig, ForegroundInstance, ImageTensor, TowerWeights};
use gala_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "gala", version, about = "Geometry- and lighting-aware foreground object search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic annotated corpus.
    Synth(SynthArgs),
    /// Filter a corpus and extract background/foreground pairs.
    Ingest(IngestArgs),
    /// Self-supervised initialization shared by both towers.
    Pretrain(PretrainArgs),
    /// Train the background and foreground towers.
    Train(TrainArgs),
    /// Embed foregrounds into a gallery index.
    Embed(EmbedArgs),
    /// Rank the gallery for a background image.
    Query(QueryArgs),
    /// Predict object, location and scale for a background without a box.
    Place(PlaceArgs),
    /// Retrieval, sensitivity and placement metrics.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    size: u32,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Manifest path; pair images are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.6)]
    min_conf: f32,
    #[arg(long, default_value_t = 0.05)]
    area_min: f64,
    #[arg(long, default_value_t = 0.5)]
    area_max: f64,
    /// Train fraction.
    #[arg(long, default_value_t = 0.9)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Encoder input side.
    #[arg(long, default_value_t = 32)]
    input_size: usize,
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ContrastiveStage {
    Both,
    Background,
    Foreground,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for background.ckpt and foreground.ckpt.
    #[arg(long)]
    out: PathBuf,
    /// Pretrained checkpoint copied into both towers; random init otherwise.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, default_value_t = 0.3)]
    margin_t: f32,
    #[arg(long, default_value_t = 0.1)]
    margin_c: f32,
    #[arg(long, default_value_t = 8e-5)]
    lr: f32,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 40)]
    batch_size: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    no_contrastive: bool,
    /// Stages in which the contrastive term is active.
    #[arg(long, value_enum, default_value_t = ContrastiveStage::Both)]
    contrastive_stage: ContrastiveStage,
    #[arg(long)]
    no_alternating: bool,
    #[arg(long)]
    reverse_order: bool,
    #[arg(long)]
    hardest_negative: bool,
    #[arg(long)]
    no_mask_aug: bool,
    #[arg(long)]
    compose_transforms: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Line-delimited JSON training log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Encoder input side when training from random init.
    #[arg(long, default_value_t = 32)]
    input_size: usize,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Eval,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Foreground checkpoint or a directory holding foreground.ckpt.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// Background checkpoint or a directory holding background.ckpt.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    bg: PathBuf,
    /// `l,t,w,h`; omitted means the placement search picks one.
    #[arg(long = "box")]
    bbox: Option<BoundingBox>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    grid: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlaceArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    bg: PathBuf,
    #[arg(long, default_value_t = 10)]
    grid: usize,
    /// Place this object instead of running seed selection.
    #[arg(long)]
    object: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    /// Directory holding background.ckpt and foreground.ckpt.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "map,recall,sensitivity,placement")]
    metrics: Vec<String>,
    #[arg(long, default_value_t = 50)]
    m_transforms: usize,
    #[arg(long, default_value_t = 10)]
    grid: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "GALA_INDEX")]
    index: PathBuf,
    #[arg(long, env = "GALA_WEIGHTS")]
    weights: PathBuf,
    #[arg(long, env = "GALA_PORT", default_value_t = gala_service::DEFAULT_PORT)]
    port: u16,
    #[arg(long, env = "GALA_GRID_K", default_value_t = 10)]
    grid_k: usize,
}

fn checkpoint_in(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn write_output(out: Option<&Path>, json: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(json)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn split_pairs(pairs: Vec<PairRecord>, split: SplitArg) -> Vec<PairRecord> {
    pairs
        .into_iter()
        .filter(|p| match split {
            SplitArg::All => true,
            SplitArg::Train => p.split == Split::Train,
            SplitArg::Eval => p.split == Split::Eval,
        })
        .collect()
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        size: a.size,
        ..SynthConfig::default()
    };
    let records = write_synthetic_corpus(&a.out, a.n, a.seed, &cfg)?;
    let instances: usize = records.iter().map(|r| r.instances.len()).sum();
    log::info!("wrote {} scenes with {instances} instances to {}", records.len(), a.out.display());
    Ok(())
}

fn run_ingest(a: IngestArgs) -> Result<()> {
    let cfg = IngestConfig {
        filter: FilterConfig {
            min_confidence: a.min_conf,
            area_min: a.area_min,
            area_max: a.area_max,
        },
        train_fraction: a.split,
        seed: a.seed,
    };
    let manifest = ingest(&a.corpus, &a.out, &cfg)?;
    let (train, eval) = manifest.split_counts();
    log::info!("{} pairs ({train} train, {eval} eval) -> {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn run_pretrain(a: PretrainArgs) -> Result<()> {
    let pairs = split_pairs(load_pairs(&a.manifest)?, SplitArg::Train);
    let images: Vec<ImageTensor> = pairs
        .iter()
        .flat_map(|p| [p.foreground.image.clone(), p.background.image.clone()])
        .collect();
    let enc = EncoderConfig {
        input_size: a.input_size,
        embed_dim: a.embed_dim,
        ..EncoderConfig::default()
    };
    let cfg = PretrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        ..PretrainConfig::default()
    };
    let weights = pretrain(&images, &enc, &cfg, a.seed, &mut |e| log::debug!("pretrain step {} loss {:.4}", e.step, e.total))?;
    save_checkpoint(&weights, &a.out)?;
    log::info!("pretrained on {} images -> {}", images.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let pairs = split_pairs(load_pairs(&a.manifest)?, SplitArg::Train);
    let data = TrainData::new(pairs)?;
    let init = match &a.init {
        Some(p) => Towers::from_pretrained(&load_checkpoint(p)?),
        None => Towers::init(
            &EncoderConfig {
                input_size: a.input_size,
                ..EncoderConfig::default()
            },
            a.seed,
        )?,
    };
    let mut cfg = TrainConfig {
        margin_t: a.margin_t,
        margin_c: a.margin_c,
        lr: a.lr,
        batch_size: a.batch_size,
        rounds: a.rounds,
        epochs: a.epochs,
        max_steps: a.max_steps,
        hardest_negative: a.hardest_negative,
        alternating: !a.no_alternating,
        reverse_order: a.reverse_order,
        mask_augmentation: !a.no_mask_aug,
        ..TrainConfig::default()
    };
    cfg.transforms.compose = a.compose_transforms;
    match a.contrastive_stage {
        ContrastiveStage::Both => cfg.set_contrastive(true),
        ContrastiveStage::Background => cfg.contrastive_foreground = false,
        ContrastiveStage::Foreground => cfg.contrastive_background = false,
    }
    if a.no_contrastive {
        cfg.set_contrastive(false);
    }
    let mut log_file = match &a.log {
        Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => None,
    };
    let mut write_err = None;
    let mut on_step = |e: &LogEntry| {
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(e).expect("log entry serializes");
            if let Err(err) = writeln!(f, "{line}") {
                write_err.get_or_insert(err);
            }
        }
    };
    let towers = alternating_train(&init, &data, &cfg, a.seed, &mut on_step)?;
    if let Some(e) = write_err {
        return Err(e).context("writing the training log");
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_checkpoint(&towers.background, &a.out.join(BACKGROUND_CHECKPOINT))?;
    save_checkpoint(&towers.foreground, &a.out.join(FOREGROUND_CHECKPOINT))?;
    log::info!("trained on {} pairs -> {}", data.len(), a.out.display());
    Ok(())
}

fn run_embed(a: EmbedArgs) -> Result<()> {
    let tower = load_checkpoint(&checkpoint_in(&a.weights, FOREGROUND_CHECKPOINT))?;
    let pairs = split_pairs(load_pairs(&a.manifest)?, a.split);
    if pairs.is_empty() {
        bail!("no pairs in the selected split");
    }
    let gallery: Vec<ForegroundInstance> = pairs.into_iter().map(|p| p.foreground).collect();
    let mut index = build_index(&gallery, &tower)?;
    // Assets live next to the index so the service can resolve them.
    let root = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let objects = root.join("objects");
    fs::create_dir_all(&objects).with_context(|| format!("creating {}", objects.display()))?;
    for (i, fg) in gallery.iter().enumerate() {
        let stem: String = fg
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let (thumb, mask) = (format!("objects/{stem}.png"), format!("objects/{stem}_mask.png"));
        fg.image.save(root.join(&thumb))?;
        fg.mask.save(root.join(&mask))?;
        let meta = index.meta_mut(i);
        meta.thumbnail_path = Some(thumb);
        meta.mask_path = Some(mask);
    }
    save_index(&index, &a.out)?;
    log::info!("indexed {} objects -> {}", index.len(), a.out.display());
    Ok(())
}

fn run_query(a: QueryArgs) -> Result<()> {
    let placement = PlacementConfig {
        grid_k: a.grid,
        ..PlacementConfig::default()
    };
    let engine = Engine::load(&a.index, &checkpoint_in(&a.weights, BACKGROUND_CHECKPOINT), placement)?;
    let bytes = fs::read(&a.bg).with_context(|| format!("reading {}", a.bg.display()))?;
    let req = QueryRequest {
        image: B64.encode(bytes),
        bbox: a.bbox.map(|b| [b.left, b.top, b.width, b.height]),
        k: a.k,
    };
    let resp = engine.query(&req)?;
    write_output(a.out.as_deref(), &serde_json::to_value(resp)?)
}

fn run_place(a: PlaceArgs) -> Result<()> {
    let cfg = PlacementConfig {
        grid_k: a.grid,
        ..PlacementConfig::default()
    };
    let index = load_index(&a.index)?;
    let tower = load_checkpoint(&checkpoint_in(&a.weights, BACKGROUND_CHECKPOINT))?;
    let image = ImageTensor::load(&a.bg)?;
    let result = match &a.object {
        Some(id) => place_object(&image, &index, id, &tower, &cfg)?,
        None => place(&image, &index, &tower, &cfg)?,
    };
    let png = heatmap_png(&result.heatmap, result.heatmap_width, result.heatmap_height)?;
    let json = serde_json::json!({
        "object_id": result.object_id,
        "box": result.bbox,
        "heatmap_png_b64": B64.encode(png),
        "grid_scores": result.grid_scores,
        "scale_scores": result.scale_scores,
        "degenerate": result.degenerate,
    });
    write_output(a.out.as_deref(), &json)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let background = load_checkpoint(&checkpoint_in(&a.weights, BACKGROUND_CHECKPOINT))?;
    let foreground: TowerWeights = load_checkpoint(&a.weights.join(FOREGROUND_CHECKPOINT))?;
    let index = load_index(&a.index)?;
    let all = load_pairs(&a.manifest)?;
    let donors = TrainData::new(all.clone())?;
    let eval = split_pairs(all, SplitArg::Eval);
    if eval.is_empty() {
        bail!("manifest has no eval pairs");
    }
    let refs: Vec<&PairRecord> = eval.iter().collect();
    let want = |m: &str| a.metrics.iter().any(|x| x == m);
    for m in &a.metrics {
        if !["map", "recall", "sensitivity", "placement"].contains(&m.as_str()) {
            bail!("unknown metric `{m}`");
        }
    }
    let mut report = EvalReport::default();
    if want("map") || want("recall") {
        let mut results = Vec::new();
        let mut judgments = Vec::new();
        let mut truth = std::collections::BTreeMap::new();
        for p in &eval {
            results.push(query_topk(&p.background, &index, index.len(), &background)?);
            judgments.push(RelevanceJudgment::own_object(&p.pair_id, &p.pair_id, p.category()));
            truth.insert(p.pair_id.clone(), p.pair_id.clone());
        }
        if want("map") {
            report.add_map("mAP", &map_at_n(&results, &judgments, None));
            report.add_map("mAP-100", &map_at_n(&results, &judgments, Some(100)));
        }
        if want("recall") {
            for k in [1, 5, 10] {
                report.overall.insert(format!("R@{k}"), recall_at_k(&results, &truth, k));
            }
            let k = k_for_fraction(index.len(), 0.01);
            report.overall.insert("R@1%".into(), recall_at_k(&results, &truth, k));
        }
    }
    if want("sensitivity") {
        let cfg = SensitivityConfig {
            m_transforms: a.m_transforms,
            ..SensitivityConfig::default()
        };
        for kind in [TransformKind::Geometry, TransformKind::Lighting] {
            report.add_sensitivity(&sensitivity_eval(&refs, &background, &foreground, donors.pool(), kind, &cfg)?);
        }
    }
    if want("placement") {
        let cfg = PlacementConfig {
            grid_k: a.grid,
            ..PlacementConfig::default()
        };
        report.add_placement(&placement_eval(&refs, &background, &foreground, &cfg)?);
    }
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    write_output(a.out.as_deref(), &serde_json::to_value(&report)?)
}

fn run_serve(a: ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::new(a.index, a.weights);
    cfg.port = a.port;
    cfg.grid_k = a.grid_k;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(gala_service::serve(cfg))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => run_ingest(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Train(a) => run_train(a),
        Command::Embed(a) => run_embed(a),
        Command::Query(a) => run_query(a),
        Command::Place(a) => run_place(a),
        Command::Eval(a) => run_eval(a),
        Command::Serve(a) => run_serve(a),
    }
}
