use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use fdtr_core::config::{declares_seed, parse_bool, RunConfig};
use fdtr_core::data::{generate_dataset, load_split, write_split, AnnotatedImage, Split};
use fdtr_core::detector::Detector;
use fdtr_core::eval::{detections_from_outputs, feature_norm_image, overlay, EvalReport, MAX_DETS};
use fdtr_core::foundation::QueryStrategy;
use fdtr_core::pretrain::{pretrain as run_pretrain, save_encoder, PretrainOptions};
use fdtr_core::train::{build_detector, evaluate_detector, EpochRecord, TrainOptions, Trainer};
use fdtr_core::{checkpoint, pnm, Error, Result, Tape};

use crate::Global;

const RUN_INI: &str = "run.ini";
const MANIFEST: &str = "manifest.json";
const DETECTOR_CKPT: &str = "detector.fdtr";
const METRICS_HEADER: &str = "epoch,loss,loss_cls,loss_l1,loss_giou,ap,ap50,ap75,aps,apm,apl,loc,cls,bg,fn";

/// File, then FDTR_SEED, then `--set`, then dedicated flags.
fn resolve(g: &Global, need_seed: bool) -> Result<RunConfig> {
    let (mut c, mut seeded) = match &g.config {
        Some(p) => {
            require_exists(p)?;
            let text = fs::read_to_string(p)?;
            (RunConfig::load(p)?, declares_seed(&text)?)
        }
        None => (RunConfig::default(), false),
    };
    if let Ok(s) = std::env::var("FDTR_SEED") {
        c.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("FDTR_SEED is not an integer: {s:?}")))?;
        seeded = true;
    }
    for kv in &g.set {
        let (lhs, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects section.key=value, got {kv:?}")))?;
        let (section, key) = lhs
            .split_once('.')
            .ok_or_else(|| Error::config(format!("--set expects section.key=value, got {kv:?}")))?;
        c.set(section.trim(), key.trim(), value)?;
        seeded |= section.trim() == "run" && key.trim() == "seed";
    }
    if let Some(s) = g.seed {
        c.seed = s;
        seeded = true;
    }
    if let Some(w) = g.workers {
        c.workers = w.max(1);
    }
    if need_seed && !seeded {
        return Err(Error::config(
            "no seed given; set [run] seed in the config, FDTR_SEED or --seed",
        ));
    }
    Ok(c)
}

fn require_exists(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} does not exist", p.display())).into())
    }
}

fn write_run_ini(dir: &Path, c: &RunConfig) -> Result<()> {
    fs::write(dir.join(RUN_INI), c.to_ini())?;
    Ok(())
}

fn load_run_ini(dir: &Path) -> Result<RunConfig> {
    let p = dir.join(RUN_INI);
    require_exists(&p)?;
    RunConfig::load(&p)
}

#[derive(Debug, Clone)]
struct Manifest {
    canvas: usize,
    num_classes: usize,
    n_train: usize,
    n_val: usize,
}

fn read_manifest(data: &Path) -> Result<Manifest> {
    let p = data.join(MANIFEST);
    require_exists(&p)?;
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p)?).map_err(|e| Error::Parse {
        path: p.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let field = |k: &str| {
        v.get(k).and_then(|x| x.as_u64()).map(|x| x as usize).ok_or_else(|| Error::Parse {
            path: p.clone(),
            line: 0,
            msg: format!("missing integer field {k:?}"),
        })
    };
    Ok(Manifest {
        canvas: field("canvas")?,
        num_classes: field("num_classes")?,
        n_train: field("n_train")?,
        n_val: field("n_val")?,
    })
}

fn check_classes(data: &Path, num_classes: usize, images: &[AnnotatedImage]) -> Result<()> {
    let m = read_manifest(data)?;
    let max_label = images.iter().flat_map(|i| i.gt.labels.iter().copied()).max();
    if m.num_classes != num_classes || max_label.is_some_and(|l| l >= num_classes) {
        return Err(Error::contract(format!(
            "class count mismatch: model predicts {num_classes} classes, dataset has {}",
            m.num_classes
        )));
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(Error::config(format!("unknown split {other:?}; use train or val"))),
    }
}

// ---------------------------------------------------------------- gen

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training images.
    #[arg(long)]
    n: Option<usize>,
    /// Validation images.
    #[arg(long)]
    n_val: Option<usize>,
    /// Canvas size in pixels.
    #[arg(long)]
    canvas: Option<usize>,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

pub fn gen(g: &Global, a: &GenArgs) -> Result<()> {
    let mut c = resolve(g, true)?;
    if let Some(n) = a.n {
        c.n_train = n;
    }
    if let Some(n) = a.n_val {
        c.n_val = n;
    }
    if let Some(s) = a.canvas {
        c.scene.canvas = s;
    }
    let spec = c.scene_spec();
    spec.validate()?;
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() {
        if !a.force {
            return Err(Error::contract(format!(
                "{} is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
        for split in [Split::Train, Split::Val] {
            let d = a.out.join(split.name());
            if d.exists() {
                fs::remove_dir_all(&d)?;
            }
            let f = fdtr_core::data::annotation_path(&a.out, split);
            if f.exists() {
                fs::remove_file(f)?;
            }
        }
    }
    fs::create_dir_all(&a.out)?;
    let mut skipped = Vec::new();
    for (split, n) in [(Split::Train, c.n_train), (Split::Val, c.n_val)] {
        if n == 0 {
            skipped.push(0);
            continue;
        }
        let (images, s) = generate_dataset(&spec, split, n, c.workers)?;
        write_split(&a.out, split, &images)?;
        skipped.push(s);
    }
    let manifest = serde_json::json!({
        "seed": c.seed,
        "canvas": spec.canvas,
        "num_classes": spec.num_classes(),
        "classes": spec.classes,
        "n_train": c.n_train,
        "n_val": c.n_val,
        "skipped_objects": { "train": skipped[0], "val": skipped[1] },
        "config": RUN_INI,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(a.out.join(MANIFEST), format!("{text}\n"))?;
    write_run_ini(&a.out, &c)?;
    println!(
        "wrote {} train and {} val images to {} (seed {})",
        c.n_train,
        c.n_val,
        a.out.display(),
        c.seed
    );
    Ok(())
}

// ---------------------------------------------------------------- pretrain

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the architecture goes to `<out>.ini`.
    #[arg(long)]
    out: PathBuf,
    /// Skip training and save the random initialization, frozen.
    #[arg(long)]
    random_frozen: bool,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

pub fn pretrain(g: &Global, a: &PretrainArgs) -> Result<()> {
    let c = resolve(g, true)?;
    require_exists(&a.data)?;
    let train = load_split(&a.data, Split::Train)?;
    let val = load_split(&a.data, Split::Val)?;
    let mut vit_cfg = c.foundation.clone();
    vit_cfg.local_grid = 0;
    vit_cfg.validate()?;
    let opts = PretrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: c.seed,
        random_frozen: a.random_frozen,
    };
    let (vit, report) = run_pretrain(vit_cfg, &train, &val, &opts)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_encoder(&vit, &a.out)?;
    println!(
        "wrote {} ({} tensors, all frozen: {}, {} training epochs)",
        a.out.display(),
        vit.store().len(),
        vit.store().all_frozen(),
        report.epoch_losses.len()
    );
    println!("held-out rotation accuracy: {:.4}", report.heldout_accuracy);
    println!("digest: {}", vit.store().digest());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug, Clone, Default)]
pub struct ModelFlags {
    /// Foundation checkpoint, once per enhancer.
    #[arg(long = "foundation")]
    foundation: Vec<PathBuf>,
    /// Image queries per decoder layer: 0, 1 or 1 + g².
    #[arg(long)]
    image_queries: Option<usize>,
    /// Fuse foundation patch tokens into the encoder (on/off).
    #[arg(long)]
    fuse_patches: Option<String>,
    /// Local query strategy: crop, mean_patch or masked_class_tokens.
    #[arg(long)]
    strategy: Option<String>,
    /// Number of foundation encoders.
    #[arg(long)]
    enhancers: Option<usize>,
    /// Accept checkpoints with trainable tensors and train them.
    #[arg(long)]
    allow_trainable_foundation: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl ModelFlags {
    fn apply(&self, c: &mut RunConfig) -> Result<()> {
        if !self.foundation.is_empty() {
            c.foundation_checkpoints = self.foundation.clone();
        }
        if let Some(n) = self.image_queries {
            c.image_queries = n;
        }
        if let Some(f) = &self.fuse_patches {
            c.detector.fuse_patches = parse_bool("--fuse-patches", f)?;
        }
        if let Some(s) = &self.strategy {
            c.foundation.strategy = s.parse::<QueryStrategy>()?;
        }
        if let Some(k) = self.enhancers {
            c.enhancer_count = k;
        } else if !self.foundation.is_empty() {
            c.enhancer_count = self.foundation.len();
        }
        c.allow_trainable_foundation |= self.allow_trainable_foundation;
        if let Some(e) = self.epochs {
            c.optim.epochs = e;
        }
        if let Some(b) = self.batch_size {
            c.optim.batch_size = b;
        }
        if let Some(lr) = self.lr {
            c.optim.lr = lr;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, metrics log and config echo.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

struct Dataset {
    train: Vec<AnnotatedImage>,
    val: Vec<AnnotatedImage>,
}

fn load_dataset(data: &Path, c: &mut RunConfig) -> Result<Dataset> {
    require_exists(data)?;
    let m = read_manifest(data)?;
    c.scene.canvas = m.canvas;
    c.n_train = m.n_train;
    c.n_val = m.n_val;
    let train = load_split(data, Split::Train)?;
    let val = if m.n_val > 0 {
        load_split(data, Split::Val)?
    } else {
        Vec::new()
    };
    check_classes(data, c.scene.num_classes(), &train)?;
    Ok(Dataset { train, val })
}

fn metrics_row(r: &EpochRecord) -> String {
    let report = match &r.report {
        Some(rep) => rep.csv_row(),
        None => vec![""; 10].join(","),
    };
    format!(
        "{},{},{},{},{},{}",
        r.epoch, r.mean_loss, r.terms.cls, r.terms.l1, r.terms.giou, report
    )
}

/// Trains `c` on `ds`, writing the checkpoint, metrics log and config echo
/// to `out`. Returns the trained detector and its final report.
fn train_into(c: &RunConfig, ds: &Dataset, out: &Path, max_steps: Option<usize>) -> Result<(Detector, Option<EvalReport>)> {
    c.validate()?;
    for p in &c.foundation_checkpoints {
        require_exists(p)?;
    }
    let mut det = build_detector(c)?;
    fs::create_dir_all(out)?;
    let before: Vec<String> = det.enhancers().iter().map(|v| v.store().digest()).collect();
    let dc = det.config();
    println!(
        "decoder: {} object queries + M={} image queries per layer, {} layers; encoder levels {}",
        dc.queries,
        dc.image_query_count(),
        dc.decoder_layers,
        dc.encoder_levels()
    );
    let mut opts = TrainOptions::from_config(c);
    opts.max_steps = max_steps;
    let mut trainer = Trainer::new(&det, opts)?;
    let mut log = fs::File::create(out.join("metrics.csv"))?;
    writeln!(log, "{METRICS_HEADER}")?;
    let mut io_err = None;
    let summary = trainer.fit(&mut det, &ds.train, &ds.val, |r| {
        if let Err(e) = writeln!(log, "{}", metrics_row(r)).and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
        match &r.report {
            Some(rep) => println!("epoch {:>3}  loss {:.4}  ap {:.4}  ap50 {:.4}", r.epoch, r.mean_loss, rep.ap, rep.ap50),
            None => println!("epoch {:>3}  loss {:.4}", r.epoch, r.mean_loss),
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    checkpoint::save(det.store(), &out.join(DETECTOR_CKPT))?;
    let mut echo = c.clone();
    for (k, vit) in det.enhancers().iter().enumerate() {
        let digest = vit.store().digest();
        if vit.store().all_frozen() {
            if digest != before[k] {
                return Err(Error::contract(format!("frozen enhancer {k} changed during training")));
            }
            println!("enhancer {k}: frozen, digest unchanged {digest}");
        } else {
            let p = out.join(format!("enhancer{k}.fdtr"));
            save_encoder(vit, &p)?;
            echo.foundation_checkpoints[k] = p;
            println!("enhancer {k}: trained, saved to enhancer{k}.fdtr");
        }
    }
    write_run_ini(out, &echo)?;
    Ok((det, summary.final_report().cloned()))
}

pub fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let mut c = resolve(g, true)?;
    a.model.apply(&mut c)?;
    let ds = load_dataset(&a.data, &mut c)?;
    let (_, report) = train_into(&c, &ds, &a.out, a.max_steps)?;
    if let Some(r) = report {
        println!("{}", r.table());
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// CSV destination (default: `<model>/eval_<split>.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Rebuilds a trained detector from its output directory.
fn load_model(dir: &Path, g: &Global) -> Result<(RunConfig, Detector)> {
    let mut c = load_run_ini(dir)?;
    if let Some(w) = g.workers {
        c.workers = w.max(1);
    }
    for p in &c.foundation_checkpoints {
        require_exists(p)?;
    }
    let ckpt = dir.join(DETECTOR_CKPT);
    require_exists(&ckpt)?;
    let trained = checkpoint::load(&ckpt)?;
    let mut det = build_detector(&c)?;
    let k = det.config().num_classes;
    if let Some(id) = trained.id_of("heads.class.bias") {
        let stored = trained.get(id).tensor.numel();
        if stored != k {
            return Err(Error::contract(format!(
                "class count mismatch: checkpoint has {stored} classes, config {k}"
            )));
        }
    }
    checkpoint::restore_into(det.store_mut(), &trained)?;
    Ok((c, det))
}

pub fn eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let (c, det) = load_model(&a.model, g)?;
    require_exists(&a.data)?;
    let m = read_manifest(&a.data)?;
    let images = load_split(&a.data, split)?;
    check_classes(&a.data, det.config().num_classes, &images)?;
    let report = evaluate_detector(&det, &images, None, m.canvas, c.workers)?;
    println!("{}", report.table());
    println!("{}", EvalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.model.join(format!("eval_{}.csv", split.name())));
    fs::write(&out, format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))?;
    Ok(())
}

// ---------------------------------------------------------------- ablate

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Foundation checkpoints; cells with k enhancers use the first k.
    #[arg(long = "foundation")]
    foundation: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,5")]
    image_queries: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "on")]
    fuse_patches: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "masked_class_tokens")]
    strategies: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    enhancers: Vec<usize>,
    /// Foundation input sizes (default: the configured one).
    #[arg(long, value_delimiter = ',')]
    foundation_sizes: Vec<usize>,
    /// Frozen (off) or trainable (on) foundation encoders.
    #[arg(long, value_delimiter = ',', default_value = "off")]
    trainable: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Debug, Clone)]
struct Cell {
    image_queries: usize,
    fuse: bool,
    strategy: QueryStrategy,
    enhancers: usize,
    size: usize,
    trainable: bool,
}

impl Cell {
    fn name(&self) -> String {
        format!(
            "iq{}_fuse-{}_{}_e{}_fs{}_{}",
            self.image_queries,
            if self.fuse { "on" } else { "off" },
            self.strategy,
            self.enhancers,
            self.size,
            if self.trainable { "trainable" } else { "frozen" }
        )
    }
}

pub fn ablate(g: &Global, a: &AblateArgs) -> Result<()> {
    let mut base = resolve(g, true)?;
    if let Some(e) = a.epochs {
        base.optim.epochs = e;
    }
    let ds = load_dataset(&a.data, &mut base)?;
    let fuses = a
        .fuse_patches
        .iter()
        .map(|f| parse_bool("--fuse-patches", f))
        .collect::<Result<Vec<_>>>()?;
    let strategies = a
        .strategies
        .iter()
        .map(|s| s.parse::<QueryStrategy>())
        .collect::<Result<Vec<_>>>()?;
    let trainable = a
        .trainable
        .iter()
        .map(|t| parse_bool("--trainable", t))
        .collect::<Result<Vec<_>>>()?;
    let sizes = if a.foundation_sizes.is_empty() {
        vec![base.foundation.image_size]
    } else {
        a.foundation_sizes.clone()
    };
    let mut cells = Vec::new();
    for &image_queries in &a.image_queries {
        for &fuse in &fuses {
            for &strategy in &strategies {
                for &enhancers in &a.enhancers {
                    for &size in &sizes {
                        for &tr in &trainable {
                            cells.push(Cell {
                                image_queries,
                                fuse,
                                strategy,
                                enhancers,
                                size,
                                trainable: tr,
                            });
                        }
                    }
                }
            }
        }
    }
    // Validate the whole grid before spending any compute.
    let mut configs = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut c = base.clone();
        c.image_queries = cell.image_queries;
        c.detector.fuse_patches = cell.fuse;
        c.foundation.strategy = cell.strategy;
        c.foundation.image_size = cell.size;
        c.enhancer_count = cell.enhancers;
        c.allow_trainable_foundation |= cell.trainable;
        let needed = c.detector_config().map_err(|e| Error::config(format!("cell {}: {e}", cell.name())))?;
        let n = needed.enhancers.len();
        if a.foundation.len() < n {
            return Err(Error::config(format!(
                "cell {} needs {n} foundation checkpoint(s), {} given",
                cell.name(),
                a.foundation.len()
            )));
        }
        c.foundation_checkpoints = a.foundation[..n].to_vec();
        c.validate()?;
        configs.push(c);
    }

    fs::create_dir_all(&a.out)?;
    let header = format!(
        "cell,image_queries,fuse_patches,strategy,enhancers,foundation_size,trainable,passes_per_image,{}",
        EvalReport::CSV_HEADER
    );
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, c) in cells.iter().zip(&configs) {
        let dir = a.out.join(cell.name());
        println!("== {}", cell.name());
        let (mut det, _) = if cell.trainable {
            train_trainable(c, &ds, &dir, a.max_steps)?
        } else {
            train_into(c, &ds, &dir, a.max_steps)?
        };
        let report = evaluate_detector(&det, &ds.val, None, c.scene.canvas, c.workers)?;
        fs::write(
            dir.join("eval_val.csv"),
            format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()),
        )?;
        let passes = passes_per_image(&mut det, &ds.val)?;
        rows.push((cell.clone(), passes, report));
    }
    let mut text = format!("{header}\n");
    for (cell, passes, r) in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            cell.name(),
            cell.image_queries,
            if cell.fuse { "on" } else { "off" },
            cell.strategy,
            cell.enhancers,
            cell.size,
            if cell.trainable { "on" } else { "off" },
            passes,
            r.csv_row()
        ));
    }
    fs::write(a.out.join("ablation.csv"), &text)?;
    write_run_ini(&a.out, &base)?;
    println!(
        "{:<58} {:>6} {:>7} {:>7} {:>7}",
        "cell", "passes", "ap", "ap50", "ap75"
    );
    for (cell, passes, r) in &rows {
        println!(
            "{:<58} {:>6} {:>7.4} {:>7.4} {:>7.4}",
            cell.name(),
            passes,
            r.ap,
            r.ap50,
            r.ap75
        );
    }
    Ok(())
}

/// Trains with the encoders unfrozen (the frozen-vs-trainable axis).
fn train_trainable(c: &RunConfig, ds: &Dataset, dir: &Path, max_steps: Option<usize>) -> Result<(Detector, Option<EvalReport>)> {
    // Copy each checkpoint unfrozen so `build_detector` picks it up as trainable.
    let staged = dir.join("staged");
    fs::create_dir_all(&staged)?;
    let mut c = c.clone();
    for (k, p) in c.foundation_checkpoints.iter_mut().enumerate() {
        let mut vit = fdtr_core::pretrain::load_encoder(p, &c.foundation, true)?;
        vit.store_mut().set_frozen(false);
        let dst = staged.join(format!("enhancer{k}.fdtr"));
        save_encoder(&vit, &dst)?;
        *p = dst;
    }
    train_into(&c, ds, dir, max_steps)
}

/// Encoder block-stack passes for one uncached forward.
fn passes_per_image(det: &mut Detector, images: &[AnnotatedImage]) -> Result<usize> {
    let Some(img) = images.first() else {
        return Ok(0);
    };
    for v in det.enhancers() {
        v.reset_passes();
    }
    det.predict(&img.image, None)?;
    Ok(det.enhancers().iter().map(|v| v.passes()).sum())
}

// ---------------------------------------------------------------- visualize

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Number of images.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Encoder output level for the norm maps.
    #[arg(long, default_value_t = 0)]
    level: usize,
    /// Minimum score for drawn boxes.
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
}

pub fn visualize(g: &Global, a: &VisualizeArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let (c, det) = load_model(&a.model, g)?;
    require_exists(&a.data)?;
    let images = load_split(&a.data, split)?;
    fs::create_dir_all(&a.out)?;
    for img in images.iter().take(a.count) {
        let mut tape = Tape::inference();
        let out = det.forward(&mut tape, &img.image, None, true)?;
        let snap = out.snapshot.as_ref().expect("snapshot requested");
        let norm_path = a.out.join(format!("{:05}_norm_l{}.pgm", img.id, a.level));
        let (h, w) = feature_norm_image(snap, a.level, &norm_path)?;
        let last = out.last();
        let dets = detections_from_outputs(tape.value(last.logits), tape.value(last.boxes), MAX_DETS);
        let (drawn, n) = overlay(&img.image, &dets, a.threshold);
        pnm::write_ppm(&a.out.join(format!("{:05}_overlay.ppm", img.id)), &drawn)?;
        println!("image {:05}: norm map {w}x{h}, {n} boxes drawn", img.id);
    }
    write_run_ini(&a.out, &c)?;
    Ok(())
}
