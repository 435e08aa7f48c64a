//! Command-line entry points: `train`, `eval`, `flops`, `inspect-merge`.
//!
//! Configuration precedence is flags > config file > defaults. The config
//! file is flat `key=value` text using the long flag names. Exit codes:
//! 0 success, 1 usage or configuration error, 2 runtime failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::dataset::{Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::flops;
use crate::merging::{group_ppm, group_text, SplitPattern};
use crate::trainer::{self, TrainConfig};
use crate::vit::{
    compose_groups, renumber_groups, token_schedule, AdapterKind, MergeMethod, Vit, VitConfig,
};
use crate::Elem;

#[derive(Parser)]
#[command(
    name = "tokmerge",
    version,
    about = "token-merged transformer encoders: training, evaluation, cost model, merge maps"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train adapters and head, frozen backbone
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Analytic multiply-accumulate cost report
    Flops(FlopsArgs),
    /// Render the merge-group map for one sample
    InspectMerge(InspectArgs),
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// Encoder depth
    #[arg(long)]
    depth: Option<usize>,
    /// Embedding width
    #[arg(long)]
    dim: Option<usize>,
    /// Attention heads
    #[arg(long)]
    heads: Option<usize>,
    /// Patch grid as HxW
    #[arg(long)]
    grid: Option<String>,
    /// Keep a cls token (default)
    #[arg(long, overrides_with = "no_cls")]
    cls: bool,
    /// Classify on mean pooling instead of a cls token
    #[arg(long = "no-cls", overrides_with = "cls")]
    no_cls: bool,
    /// none | bdm | bsm[:R] | bsm-per-layer:R | avg | max
    #[arg(long)]
    merge: Option<String>,
    /// Block the one-shot merge runs in (0-based)
    #[arg(long = "merge-layer")]
    merge_layer: Option<usize>,
    /// none | lora:H | adaptformer:H
    #[arg(long)]
    adapter: Option<String>,
    /// Adapter and key-refinement scaling factor
    #[arg(long)]
    scale: Option<Elem>,
    /// stripe | checkerboard token split for bsm
    #[arg(long)]
    split: Option<String>,
    /// Hidden width of the key-refinement adapter (bdm)
    #[arg(long = "refine-rank")]
    refine_rank: Option<usize>,
    /// Seed for init, data generation and shuffling
    #[arg(long)]
    seed: Option<u64>,
    /// Start from a named geometry (vitb16)
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Clone, Default)]
struct DataFlags {
    /// TKDS dataset path
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic task spec, e.g. grid=8x8,patch=4,classes=4,n=256,sigma=0.1,seed=7
    #[arg(long)]
    synth: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    data: DataFlags,
    /// Validation TKDS path; synthetic runs derive one when absent
    #[arg(long = "val-data")]
    val_data: Option<PathBuf>,
    /// Peak learning rate
    #[arg(long)]
    lr: Option<Elem>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Warmup epochs
    #[arg(long)]
    warmup: Option<usize>,
    /// Batch size
    #[arg(long)]
    batch: Option<usize>,
    /// Output directory for metrics.csv and checkpoints
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by train
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    data: DataFlags,
    /// Checkpoint to restore before inspecting
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Sample index
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Directory for the PPM rendering
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut argv = Vec::with_capacity(args.len() + 1);
    argv.push("tokmerge".to_string());
    argv.extend_from_slice(args);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e);
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e);
                    1
                }
            };
        }
    };
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a, out),
        Cmd::Eval(a) => cmd_eval(a, out),
        Cmd::Flops(a) => cmd_flops(a, out),
        Cmd::InspectMerge(a) => cmd_inspect_merge(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e);
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                _ => 2,
            }
        }
    }
}

// ---- config file -----------------------------------------------------

const FILE_KEYS: &[&str] = &[
    "depth", "dim", "heads", "grid", "cls", "merge", "merge-layer", "adapter", "scale", "split",
    "refine-rank", "seed", "preset", "data", "synth", "val-data", "lr", "epochs", "warmup",
    "batch", "out",
];

struct FileMap(BTreeMap<String, String>);

impl FileMap {
    fn load(path: Option<&Path>) -> Result<FileMap> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::config(format!("cannot read config file {}: {}", path.display(), e))
            })?;
            for (ln, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::config(format!("{}:{}: expected key=value", path.display(), ln + 1))
                })?;
                let key = key.trim();
                if !FILE_KEYS.contains(&key) {
                    return Err(Error::config(format!(
                        "{}:{}: unknown key '{}'",
                        path.display(),
                        ln + 1,
                        key
                    )));
                }
                map.insert(key.to_string(), value.trim().to_string());
            }
        }
        Ok(FileMap(map))
    }

    fn get<T>(&self, key: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
        self.0.get(key).map(|v| parse(v)).transpose()
    }
}

// ---- parsers ---------------------------------------------------------

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::config(format!("expected an integer, got '{}'", s)))
}

fn parse_u64(s: &str) -> Result<u64> {
    s.parse().map_err(|_| Error::config(format!("expected an integer, got '{}'", s)))
}

fn parse_elem(s: &str) -> Result<Elem> {
    s.parse().map_err(|_| Error::config(format!("expected a number, got '{}'", s)))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("expected true/false, got '{}'", s))),
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::config(format!("grid must be HxW, got '{}'", s)))?;
    Ok((parse_usize(h)?, parse_usize(w)?))
}

fn parse_split(s: &str) -> Result<SplitPattern> {
    match s {
        "stripe" => Ok(SplitPattern::Stripe),
        "checkerboard" => Ok(SplitPattern::Checkerboard),
        _ => Err(Error::config(format!("split must be stripe or checkerboard, got '{}'", s))),
    }
}

fn parse_merge(s: &str, split: Option<SplitPattern>) -> Result<MergeMethod> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let no_arg = |m: MergeMethod| match arg {
        Some(_) => Err(Error::config(format!("merge method '{}' takes no :R argument", name))),
        None => Ok(m),
    };
    let method = match name {
        "none" => no_arg(MergeMethod::None)?,
        "bdm" => no_arg(MergeMethod::Bdm)?,
        "avg" => no_arg(MergeMethod::AvgPool)?,
        "max" => no_arg(MergeMethod::MaxPool)?,
        "bsm" => MergeMethod::Bsm {
            r: arg.map(parse_usize).transpose()?,
            pattern: split.unwrap_or(SplitPattern::Stripe),
        },
        "bsm-per-layer" => MergeMethod::BsmPerLayer {
            r: arg
                .map(parse_usize)
                .transpose()?
                .ok_or_else(|| Error::config("bsm-per-layer needs :R, e.g. bsm-per-layer:8"))?,
        },
        _ => return Err(Error::config(format!("unknown merge method '{}'", s))),
    };
    if split.is_some() && !matches!(method, MergeMethod::Bsm { .. }) {
        return Err(Error::config("--split only applies to bsm"));
    }
    Ok(method)
}

fn parse_adapter(s: &str) -> Result<AdapterKind> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    match (name, arg) {
        ("none", None) => Ok(AdapterKind::None),
        ("lora", Some(h)) => Ok(AdapterKind::Lora { rank: parse_usize(h)? }),
        ("adaptformer", Some(h)) => Ok(AdapterKind::AdaptFormer { rank: parse_usize(h)? }),
        ("lora", None) | ("adaptformer", None) => {
            Err(Error::config(format!("adapter '{}' needs a rank, e.g. {}:8", name, name)))
        }
        _ => Err(Error::config(format!("unknown adapter '{}'", s))),
    }
}

// ---- model construction ----------------------------------------------

/// Flag and config-file values that override the base configuration.
struct ModelOverlay {
    depth: Option<usize>,
    dim: Option<usize>,
    heads: Option<usize>,
    grid: Option<(usize, usize)>,
    use_cls: Option<bool>,
    merge: Option<String>,
    merge_layer: Option<usize>,
    adapter: Option<String>,
    scale: Option<Elem>,
    split: Option<SplitPattern>,
    refine_rank: Option<usize>,
    seed: Option<u64>,
    preset: Option<String>,
}

impl ModelOverlay {
    fn resolve(flags: &ModelFlags, file: &FileMap) -> Result<ModelOverlay> {
        let use_cls = if flags.cls {
            Some(true)
        } else if flags.no_cls {
            Some(false)
        } else {
            file.get("cls", parse_bool)?
        };
        let grid = match &flags.grid {
            Some(s) => Some(parse_grid(s)?),
            None => file.get("grid", parse_grid)?,
        };
        let split = match &flags.split {
            Some(s) => Some(parse_split(s)?),
            None => file.get("split", parse_split)?,
        };
        Ok(ModelOverlay {
            depth: flags.depth.or(file.get("depth", parse_usize)?),
            dim: flags.dim.or(file.get("dim", parse_usize)?),
            heads: flags.heads.or(file.get("heads", parse_usize)?),
            grid,
            use_cls,
            merge: flags.merge.clone().or_else(|| file.0.get("merge").cloned()),
            merge_layer: flags.merge_layer.or(file.get("merge-layer", parse_usize)?),
            adapter: flags.adapter.clone().or_else(|| file.0.get("adapter").cloned()),
            scale: flags.scale.or(file.get("scale", parse_elem)?),
            split,
            refine_rank: flags.refine_rank.or(file.get("refine-rank", parse_usize)?),
            seed: flags.seed.or(file.get("seed", parse_u64)?),
            preset: flags.preset.clone().or_else(|| file.0.get("preset").cloned()),
        })
    }

    fn any_set(&self) -> bool {
        self.depth.is_some()
            || self.dim.is_some()
            || self.heads.is_some()
            || self.grid.is_some()
            || self.use_cls.is_some()
            || self.merge.is_some()
            || self.merge_layer.is_some()
            || self.adapter.is_some()
            || self.scale.is_some()
            || self.split.is_some()
            || self.refine_rank.is_some()
            || self.seed.is_some()
            || self.preset.is_some()
    }

    /// Base config from the preset, geometry from the data source, then
    /// scalar overrides, then validation.
    fn build(&self, geom: Option<&DataGeometry>) -> Result<VitConfig> {
        let mut cfg = match self.preset.as_deref() {
            None => VitConfig::default(),
            // tolerate separator spelling: vitb16, vit-b16, vit_b16
            Some(p) if p.replace(['-', '_'], "") == "vitb16" => VitConfig::vit_b16(),
            Some(p) => return Err(Error::config(format!("unknown preset '{}'", p))),
        };
        if let Some(g) = geom {
            cfg.in_channels = g.channels;
            cfg.num_classes = g.classes;
            let grid = match (self.grid, g.synth_grid) {
                (Some(f), Some(s)) if f != s => {
                    return Err(Error::config(format!(
                        "--grid {}x{} conflicts with the synth spec grid {}x{}",
                        f.0, f.1, s.0, s.1
                    )))
                }
                (Some(f), _) => f,
                (None, Some(s)) => s,
                (None, None) => cfg.grid,
            };
            if grid.0 == 0 || grid.1 == 0 || g.height % grid.0 != 0 || g.width % grid.1 != 0 {
                return Err(Error::config(format!(
                    "{}x{} images do not divide into a {}x{} grid",
                    g.height, g.width, grid.0, grid.1
                )));
            }
            let (ph, pw) = (g.height / grid.0, g.width / grid.1);
            if ph != pw {
                return Err(Error::config(format!(
                    "patches must be square, got {}x{} pixels",
                    ph, pw
                )));
            }
            cfg.grid = grid;
            cfg.patch_size = ph;
        } else if let Some(grid) = self.grid {
            cfg.grid = grid;
        }
        if let Some(v) = self.depth {
            cfg.depth = v;
        }
        if let Some(v) = self.dim {
            cfg.dim = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.use_cls {
            cfg.use_cls = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.scale {
            cfg.adapter_scale = v;
            cfg.refine_scale = v;
        }
        if let Some(v) = self.refine_rank {
            cfg.refine_rank = v;
        }
        match &self.merge {
            Some(s) => cfg.merge = parse_merge(s, self.split)?,
            None if self.split.is_some() => {
                return Err(Error::config("--split only applies to bsm"))
            }
            None => {}
        }
        if let Some(v) = self.merge_layer {
            cfg.merge_layer = Some(v);
        }
        if let Some(s) = &self.adapter {
            cfg.adapter = parse_adapter(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct DataGeometry {
    channels: usize,
    classes: usize,
    height: usize,
    width: usize,
    synth_grid: Option<(usize, usize)>,
}

impl DataGeometry {
    fn of_dataset(ds: &Dataset) -> DataGeometry {
        DataGeometry {
            channels: ds.channels,
            classes: ds.num_classes,
            height: ds.height,
            width: ds.width,
            synth_grid: None,
        }
    }

    fn of_spec(spec: &SyntheticSpec) -> DataGeometry {
        DataGeometry {
            channels: 1,
            classes: spec.classes,
            height: spec.grid.0 * spec.patch_px,
            width: spec.grid.1 * spec.patch_px,
            synth_grid: Some(spec.grid),
        }
    }
}

enum DataSource {
    File(PathBuf),
    Synth(SyntheticSpec),
}

impl DataSource {
    fn resolve(flags: &DataFlags, file: &FileMap) -> Result<DataSource> {
        let data = flags.data.clone().or_else(|| file.0.get("data").map(PathBuf::from));
        let synth = flags.synth.clone().or_else(|| file.0.get("synth").cloned());
        match (data, synth) {
            (Some(_), Some(_)) => Err(Error::config("choose one of --data and --synth")),
            (Some(p), None) => Ok(DataSource::File(p)),
            (None, Some(s)) => Ok(DataSource::Synth(SyntheticSpec::parse(&s).map_err(
                |e| Error::config(format!("bad synth spec: {}", e)),
            )?)),
            (None, None) => Err(Error::config("a data source is required: --data or --synth")),
        }
    }

    fn geometry(&self) -> Result<(DataGeometry, Dataset)> {
        match self {
            DataSource::File(p) => {
                let ds = Dataset::load(p)?;
                Ok((DataGeometry::of_dataset(&ds), ds))
            }
            DataSource::Synth(spec) => Ok((DataGeometry::of_spec(spec), spec.generate()?)),
        }
    }
}

/// A dataset must match the geometry the model was built for.
fn check_data(cfg: &VitConfig, ds: &Dataset, which: &str) -> Result<()> {
    let (h, w) = (cfg.grid.0 * cfg.patch_size, cfg.grid.1 * cfg.patch_size);
    if ds.channels != cfg.in_channels || ds.height != h || ds.width != w {
        return Err(Error::config(format!(
            "{} data is {}x{}x{}, the model expects {}x{}x{}",
            which, ds.channels, ds.height, ds.width, cfg.in_channels, h, w
        )));
    }
    if ds.num_classes != cfg.num_classes {
        return Err(Error::config(format!(
            "{} data has {} classes, the model head has {}",
            which, ds.num_classes, cfg.num_classes
        )));
    }
    Ok(())
}

fn describe_merge(cfg: &VitConfig) -> String {
    let at = |l: Option<usize>| l.map_or(String::new(), |l| format!(" at layer {}", l));
    match cfg.merge {
        MergeMethod::None => "none".to_string(),
        MergeMethod::Bdm => format!("bdm{}", at(cfg.merge_layer)),
        MergeMethod::Bsm { r, pattern } => format!(
            "bsm ({:?} split, r={}){}",
            pattern,
            r.map_or("all".to_string(), |r| r.to_string()),
            at(cfg.merge_layer)
        ),
        MergeMethod::BsmPerLayer { r } => format!("bsm-per-layer r={}", r),
        MergeMethod::AvgPool => format!("avg pool{}", at(cfg.merge_layer)),
        MergeMethod::MaxPool => format!("max pool{}", at(cfg.merge_layer)),
    }
}

fn describe_adapter(cfg: &VitConfig) -> String {
    match cfg.adapter {
        AdapterKind::None => "none".to_string(),
        AdapterKind::Lora { rank } => format!("lora rank {} scale {}", rank, cfg.adapter_scale),
        AdapterKind::AdaptFormer { rank } => {
            format!("adaptformer rank {} scale {}", rank, cfg.adapter_scale)
        }
    }
}

// ---- subcommands -----------------------------------------------------

fn cmd_train(args: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let file = FileMap::load(args.config.as_deref())?;
    let source = DataSource::resolve(&args.data, &file)?;
    let (geom, train_ds) = source.geometry()?;

    let overlay = ModelOverlay::resolve(&args.model, &file)?;
    let cfg = overlay.build(Some(&geom))?;
    check_data(&cfg, &train_ds, "training")?;

    let val_path = args.val_data.clone().or_else(|| file.0.get("val-data").map(PathBuf::from));
    let val_ds = match (&val_path, &source) {
        (Some(p), _) => Dataset::load(p)?,
        // held-out draw from the same task: next seed, a quarter the size
        (None, DataSource::Synth(spec)) => SyntheticSpec {
            seed: spec.seed.wrapping_add(1),
            count: (spec.count / 4).max(1),
            ..spec.clone()
        }
        .generate()?,
        (None, DataSource::File(_)) => train_ds.clone(),
    };
    check_data(&cfg, &val_ds, "validation")?;

    let out_dir = args
        .out
        .clone()
        .or_else(|| file.0.get("out").map(PathBuf::from))
        .ok_or_else(|| Error::config("train needs --out for metrics and checkpoints"))?;

    let tcfg = TrainConfig {
        epochs: args.epochs.or(file.get("epochs", parse_usize)?).unwrap_or(100),
        warmup_epochs: args.warmup.or(file.get("warmup", parse_usize)?).unwrap_or(10),
        batch_size: args.batch.or(file.get("batch", parse_usize)?).unwrap_or(64),
        lr: args.lr.or(file.get("lr", parse_elem)?).unwrap_or(1e-3),
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    tcfg.validate()?;

    let schedule = token_schedule(&cfg)?;
    let _ = writeln!(
        out,
        "model: depth {} dim {} heads {} grid {}x{}{}",
        cfg.depth,
        cfg.dim,
        cfg.heads,
        cfg.grid.0,
        cfg.grid.1,
        if cfg.use_cls { " cls" } else { "" }
    );
    let _ = writeln!(out, "merge: {}", describe_merge(&cfg));
    let _ = writeln!(out, "adapter: {}", describe_adapter(&cfg));
    let _ = writeln!(
        out,
        "data: {} train / {} val samples, {} classes",
        train_ds.len(),
        val_ds.len(),
        train_ds.num_classes
    );

    let mut model = Vit::new(cfg)?;
    let (loss0, _) = trainer::evaluate(&model, &train_ds, tcfg.batch_size)?;
    let _ = writeln!(out, "step-0 loss: {:.12}", loss0);

    let outcome = trainer::train(&mut model, &train_ds, &val_ds, &tcfg, Some(&out_dir), |m| {
        let _ = writeln!(
            out,
            "epoch {:>3} {:<5} loss {:.6} acc {:.4} lr {:.8}",
            m.epoch, m.split, m.loss, m.acc, m.lr
        );
    })?;

    let final_val = outcome.history.iter().rev().find(|m| m.split == "val").unwrap();
    let counts: Vec<String> = schedule.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(out, "tokens per layer: {}", counts.join(" "));
    let _ = writeln!(
        out,
        "tokens: {} -> {}",
        schedule.first().unwrap(),
        schedule.last().unwrap()
    );
    let _ = writeln!(out, "final val acc: {:.4}", final_val.acc);
    let _ = writeln!(
        out,
        "best val acc: {:.4} (epoch {})",
        outcome.best_val_acc, outcome.best_epoch
    );
    let _ = writeln!(
        out,
        "wrote metrics.csv, ckpt_best.fpet, ckpt_final.fpet to {}",
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let file = FileMap::load(args.config.as_deref())?;
    let entries = checkpoint::load(&args.ckpt)?;
    let cfg = checkpoint::config_from_echo(&entries)?;
    let mut model = Vit::new(cfg)?;
    checkpoint::apply(&mut model, &entries)?;

    let source = DataSource::resolve(&args.data, &file)?;
    let (_, ds) = source.geometry()?;
    check_data(&model.cfg, &ds, "eval")?;

    let batch = args.batch.or(file.get("batch", parse_usize)?).unwrap_or(64);
    let (loss, acc) = trainer::evaluate(&model, &ds, batch)?;
    let schedule = token_schedule(&model.cfg)?;
    let _ = writeln!(out, "samples: {}", ds.len());
    let _ = writeln!(
        out,
        "tokens: {} -> {}",
        schedule.first().unwrap(),
        schedule.last().unwrap()
    );
    let _ = writeln!(out, "loss: {:.6}", loss);
    let _ = writeln!(out, "top-1 accuracy: {:.4}", acc);
    Ok(())
}

fn cmd_flops(args: FlopsArgs, out: &mut dyn Write) -> Result<()> {
    let file = FileMap::load(args.config.as_deref())?;
    let overlay = ModelOverlay::resolve(&args.model, &file)?;
    let cfg = overlay.build(None)?;
    let report = flops::model_flops(&cfg)?;
    let _ = writeln!(out, "{}", report.human_summary());
    let _ = writeln!(out, "{}", report.machine_kv());
    Ok(())
}

fn cmd_inspect_merge(args: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let file = FileMap::load(args.config.as_deref())?;
    let overlay = ModelOverlay::resolve(&args.model, &file)?;
    let source = DataSource::resolve(&args.data, &file)?;
    let (geom, ds) = source.geometry()?;
    let model = match &args.ckpt {
        Some(path) => {
            if overlay.any_set() {
                return Err(Error::config(
                    "model flags conflict with --ckpt; the checkpoint fixes the architecture",
                ));
            }
            let entries = checkpoint::load(path)?;
            let cfg = checkpoint::config_from_echo(&entries)?;
            let mut model = Vit::new(cfg)?;
            checkpoint::apply(&mut model, &entries)?;
            model
        }
        None => Vit::new(overlay.build(Some(&geom))?)?,
    };
    check_data(&model.cfg, &ds, "inspect")?;
    if args.index >= ds.len() {
        return Err(Error::config(format!(
            "sample index {} out of range ({} samples)",
            args.index,
            ds.len()
        )));
    }

    let images = ds.image_batch(&[args.index])?;
    let tape = crate::autodiff::Tape::new();
    let fwd = model.forward(&tape, &images, &Default::default())?;
    let n0 = fwd.token_counts[0];
    let groups = compose_groups(n0, &fwd.traces, 0);
    let cls = usize::from(model.cfg.use_cls);
    let patch_groups = renumber_groups(&groups[cls..]);
    let n_groups = patch_groups.iter().max().map_or(0, |m| m + 1);

    let _ = writeln!(out, "sample {}: label {}", args.index, ds.labels[args.index]);
    let _ = writeln!(out, "merge: {}", describe_merge(&model.cfg));
    let _ = writeln!(
        out,
        "tokens: {} -> {} ({} patch groups)",
        n0,
        fwd.token_counts.last().unwrap(),
        n_groups
    );
    let _ = write!(out, "{}", group_text(model.cfg.grid, &patch_groups));
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("groups.ppm");
        std::fs::write(&path, group_ppm(model.cfg.grid, &patch_groups, 16))?;
        let _ = writeln!(out, "wrote {}", path.display());
    }
    Ok(())
}
