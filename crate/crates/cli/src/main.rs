//! `aisf`: synthesize data, train, evaluate, ablate and inspect attention.

use std::fmt::Display;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aisformer::ablation::{ablation_table, rows_to_json, run_ablation, AblationOptions};
use aisformer::checkpoint::{Checkpoint, RngState};
use aisformer::data::{
    box_pixel_range, derive_seed, gray_from_values, load_annotations, rle_encode, synth_dataset, Dataset, Image,
    SynthOptions,
};
use aisformer::eval::{coco_iou_thresholds, evaluate, Detection, DEFAULT_MAX_DETS};
use aisformer::infer::{detect, thread_limit};
use aisformer::run::RunConfig;
use aisformer::train::{train, TrainSet, LOSS_CSV_HEADER};
use aisformer::{AisFormer, BoundingBox, Error, MaskKind};

#[derive(Parser)]
#[command(name = "aisf", version, about = "Transformer amodal mask head: train, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic occluded-shapes dataset (PPM images + annotation JSON).
    Synth(SynthArgs),
    /// Train the head on ground-truth boxes; writes a checkpoint and a CSV loss log.
    Train(TrainArgs),
    /// Score a checkpoint with mask AP/AR on a dataset.
    Eval(EvalArgs),
    /// Dump per-query cross-attention maps for one box as PGM images.
    VizAttention(VizArgs),
    /// Train and score the six query-set configurations.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    images: usize,
    /// Canvas side length in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    min_shapes: usize,
    #[arg(long, default_value_t = 4)]
    max_shapes: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

/// Run settings. Flags override values read from `--config`.
#[derive(Args, Default)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// ROIAlign output side; masks are twice this size.
    #[arg(long)]
    roi_size: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// Drop the occluder query.
    #[arg(long)]
    no_occluder: bool,
    /// Drop the visible query (requires --no-invisible).
    #[arg(long)]
    no_visible: bool,
    /// Drop the invisible embedding.
    #[arg(long)]
    no_invisible: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Annotation JSON; images are read from its directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    synth_images: Option<usize>,
    #[arg(long)]
    synth_seed: Option<u64>,
    #[arg(long)]
    synth_size: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Any config key, `KEY=VALUE`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint path, rewritten at every interval and at the end.
    #[arg(long)]
    out: PathBuf,
    /// CSV loss log (default: the checkpoint path with a .csv extension).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint; its config wins except for --iterations.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Annotation JSON; without it a held-out synthetic split is generated.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    synth_seed: Option<u64>,
    #[arg(long)]
    synth_images: Option<usize>,
    /// Directory for report.json and report.txt.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Score the ground-truth amodal masks themselves (sanity check).
    #[arg(long)]
    gt_as_predictions: bool,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM (or PGM) image.
    #[arg(long)]
    image: PathBuf,
    /// Box in image pixels as `x,y,w,h`.
    #[arg(long = "box", value_name = "X,Y,W,H")]
    bbox: String,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Held-out synthetic images for scoring.
    #[arg(long, default_value_t = 8)]
    eval_images: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// A message plus the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => 2,
            Error::Diverged { .. } => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn mismatch(e: impl Display) -> Failure {
    Failure {
        code: 4,
        message: e.to_string(),
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::VizAttention(a) => cmd_viz(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run_config(a: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut pairs: Vec<(&str, String)> = Vec::new();
    let mut opt = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k, v));
        }
    };
    opt("embed_dim", a.embed_dim.map(|v| v.to_string()));
    opt("roi_h", a.roi_size.map(|v| v.to_string()));
    opt("roi_w", a.roi_size.map(|v| v.to_string()));
    opt("heads", a.heads.map(|v| v.to_string()));
    opt("encoder_layers", a.encoder_layers.map(|v| v.to_string()));
    opt("decoder_layers", a.decoder_layers.map(|v| v.to_string()));
    opt("ffn_dim", a.ffn_dim.map(|v| v.to_string()));
    opt("learning_rate", a.lr.map(|v| v.to_string()));
    opt("batch_size", a.batch_size.map(|v| v.to_string()));
    opt("iterations", a.iterations.map(|v| v.to_string()));
    opt("seed", a.seed.map(|v| v.to_string()));
    opt("dataset", a.dataset.as_ref().map(|v| v.display().to_string()));
    opt("synth_images", a.synth_images.map(|v| v.to_string()));
    opt("synth_seed", a.synth_seed.map(|v| v.to_string()));
    opt("synth_size", a.synth_size.map(|v| v.to_string()));
    opt("checkpoint_interval", a.checkpoint_interval.map(|v| v.to_string()));
    opt("occluder", a.no_occluder.then(|| "false".into()));
    opt("visible", a.no_visible.then(|| "false".into()));
    opt("invisible", a.no_invisible.then(|| "false".into()));
    for (k, v) in pairs {
        cfg.set(k, &v)?;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure {
            code: 1,
            message: format!("--set expects KEY=VALUE, got {kv:?}"),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth_options(size: usize) -> SynthOptions {
    SynthOptions {
        width: size,
        height: size,
        ..SynthOptions::default()
    }
}

/// Annotation file plus the images next to it.
fn load_dataset(path: &Path) -> Result<(Dataset, Vec<Image>), Failure> {
    let ds = load_annotations(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let images = ds
        .images
        .iter()
        .map(|e| Image::load(&dir.join(&e.info.file)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((ds, images))
}

fn training_data(cfg: &RunConfig) -> Result<(Dataset, Vec<Image>), Failure> {
    match &cfg.dataset {
        Some(p) => load_dataset(p),
        None => Ok(synth_dataset(cfg.synth_seed, cfg.synth_images, &synth_options(cfg.synth_size))?),
    }
}

/// Synthetic split disjoint from the training scenes of `cfg`.
fn held_out(cfg: &RunConfig, seed: Option<u64>, images: usize) -> Result<(Dataset, Vec<Image>), Failure> {
    let seed = seed.unwrap_or_else(|| derive_seed(cfg.synth_seed, u64::MAX));
    Ok(synth_dataset(seed, images, &synth_options(cfg.synth_size))?)
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, bytes).map_err(|e| io_fail(path, e))
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    if a.images == 0 || a.size < 16 || a.min_shapes == 0 || a.max_shapes < a.min_shapes {
        return Err(Failure {
            code: 1,
            message: "need images > 0, size >= 16 and 1 <= min_shapes <= max_shapes".into(),
        });
    }
    let opts = SynthOptions {
        min_shapes: a.min_shapes,
        max_shapes: a.max_shapes,
        ..synth_options(a.size)
    };
    let (ds, images) = synth_dataset(a.seed, a.images, &opts)?;
    create_dir(&a.out)?;
    for (entry, img) in ds.images.iter().zip(&images) {
        img.save(&a.out.join(&entry.info.file))?;
    }
    ds.save(&a.out.join("annotations.json"))?;
    println!(
        "wrote {} images, {} instances to {}",
        ds.images.len(),
        ds.instance_count(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let (cfg, params, start) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut cfg = ck.config.clone();
            if let Some(n) = a.run.iterations {
                cfg.iterations = n;
            }
            let model = AisFormer::new(cfg.head.clone())?;
            ck.check_against(&model).map_err(mismatch)?;
            (cfg, ck.params, ck.iteration)
        }
        None => {
            let cfg = run_config(&a.run)?;
            let params = AisFormer::new(cfg.head.clone())?.init_params(cfg.seed)?;
            (cfg, params, 0)
        }
    };
    let model = AisFormer::new(cfg.head.clone())?;
    let (ds, images) = training_data(&cfg)?;
    let set = TrainSet::build(&ds, &images, &cfg.head).map_err(mismatch)?;

    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut log = open_log(&log_path, start > 0)?;
    let save = |params: &aisformer::ParameterSet, iteration: u64| -> Result<(), Error> {
        Checkpoint {
            config: cfg.clone(),
            params: params.clone(),
            iteration,
            rng: RngState { seed: cfg.seed },
        }
        .save(&a.out)
    };
    let interval = cfg.checkpoint_interval as u64;
    let end = cfg.iterations as u64;
    let mut last = None;
    let params = train(
        &model,
        params,
        &set,
        cfg.seed,
        cfg.learning_rate,
        cfg.batch_size,
        start,
        end,
        |it, p, loss| {
            writeln!(log, "{}", loss.csv_row(it)).map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            if interval > 0 && (it + 1) % interval == 0 {
                save(p, it + 1)?;
            }
            last = Some(loss.total);
            Ok(())
        },
    )
    .map_err(|e| match e {
        Error::Diverged { iteration } => Failure {
            code: 3,
            message: format!("training diverged: non-finite loss at iteration {iteration}"),
        },
        other => other.into(),
    })?;
    log.flush().map_err(|e| io_fail(&log_path, e))?;
    save(&params, end.max(start))?;
    println!(
        "trained iterations {start}..{end} on {} ROIs; last loss {}; checkpoint {}",
        set.rois.len(),
        last.map_or("n/a".to_string(), |v| format!("{v:.6}")),
        a.out.display()
    );
    Ok(())
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>, Failure> {
    let exists = path.exists();
    let file = if append {
        OpenOptions::new().create(true).append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(|e| io_fail(path, e))?;
    let mut w = BufWriter::new(file);
    if !append || !exists {
        writeln!(w, "{LOSS_CSV_HEADER}").map_err(|e| io_fail(path, e))?;
    }
    Ok(w)
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = AisFormer::new(ck.config.head.clone())?;
    ck.check_against(&model).map_err(mismatch)?;
    let (ds, images) = match &a.dataset {
        Some(p) => load_dataset(p)?,
        None => held_out(&ck.config, a.synth_seed, a.synth_images.unwrap_or(8))?,
    };
    let gts: Vec<_> = ds.instances().cloned().collect();
    let dets = if a.gt_as_predictions {
        gts.iter()
            .map(|g| Detection {
                image_id: g.image_id,
                category_id: g.category_id,
                score: 1.0,
                mask: rle_encode(&g.amodal),
            })
            .collect()
    } else {
        let set = TrainSet::build(&ds, &images, &model.config).map_err(mismatch)?;
        detect(&model, &ck.params, &ds, &set, thread_limit())?
    };
    let mut report = evaluate(&dets, &gts, &coco_iou_thresholds(), DEFAULT_MAX_DETS)?;
    report.label = Some(ck.config.head.queries.label());
    create_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("report.json"), report.to_json())?;
    write_file(&a.out_dir.join("report.txt"), report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn parse_box(s: &str) -> Result<BoundingBox, Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| mismatch(format!("box {s:?} is not x,y,w,h")))?;
    let [x, y, w, h] = v[..] else {
        return Err(mismatch(format!("box {s:?} is not x,y,w,h")));
    };
    BoundingBox::from_xywh([x, y, w, h]).map_err(mismatch)
}

fn cmd_viz(a: &VizArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = AisFormer::new(ck.config.head.clone())?;
    ck.check_against(&model).map_err(mismatch)?;
    let image = Image::load(&a.image)?;
    let bbox = parse_box(&a.bbox)?;
    if bbox.x0 < 0.0 || bbox.y0 < 0.0 || bbox.x1 > image.width as f64 || bbox.y1 > image.height as f64 {
        return Err(mismatch(format!(
            "box {:?} lies outside the {}x{} image",
            bbox.to_xywh(),
            image.width,
            image.height
        )));
    }
    if image.channels != model.config.input_channels {
        return Err(mismatch(format!(
            "image has {} channels, model expects {}",
            image.channels, model.config.input_channels
        )));
    }
    let params = ck.params.frozen();
    let features = model.features(&params, &image.to_tensor())?;
    let out = model.forward_roi(&params, &features, &bbox)?;
    create_dir(&a.out_dir)?;
    let (x0, y0, x1, y1) = box_pixel_range(&bbox, image.width, image.height);
    image.crop(x0, y0, x1, y1)?.save(&a.out_dir.join("roi.ppm"))?;
    let (h, w) = (model.config.mask_h(), model.config.mask_w());
    for kind in [MaskKind::Occluder, MaskKind::Visible, MaskKind::Amodal] {
        if let Some(row) = out.attention.row(kind) {
            let path = a.out_dir.join(format!("attn_{}.pgm", kind.name()));
            gray_from_values(row, h, w)?.save(&path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> CmdResult {
    let cfg = run_config(&a.run)?;
    let (train_ds, train_images) = training_data(&cfg)?;
    let (eval_ds, eval_images) = held_out(&cfg, None, a.eval_images)?;
    let train_set = TrainSet::build(&train_ds, &train_images, &cfg.head).map_err(mismatch)?;
    let eval_set = TrainSet::build(&eval_ds, &eval_images, &cfg.head).map_err(mismatch)?;
    let opts = AblationOptions {
        iterations: cfg.iterations as u64,
        learning_rate: cfg.learning_rate,
        batch: cfg.batch_size,
        seed: cfg.seed,
        threads: thread_limit(),
    };
    create_dir(&a.out_dir)?;
    let mut write_err = None;
    let rows = run_ablation(&cfg.head, &train_set, &eval_set, &eval_ds, &opts, |row| {
        eprintln!("exp #{} ({}) amodal IoU {:.4}", row.experiment, row.heads, row.amodal_iou);
        let path = a.out_dir.join(format!("exp{}_report.json", row.experiment));
        if let Err(e) = fs::write(&path, row.report.to_json()) {
            write_err.get_or_insert(io_fail(&path, e));
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let table = ablation_table(&rows);
    let json = rows_to_json(&rows);
    write_file(&a.out_dir.join("ablation.txt"), &table)?;
    write_file(&a.out_dir.join("ablation.json"), json)?;
    print!("{table}");
    Ok(())
}
