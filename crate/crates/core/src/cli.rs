//! Command-line front end: `gen-data`, `train`, `detect`, `eval`, `gradcheck`, `anchors`.
//!
//! Exit codes: 0 success, 1 invalid arguments or input, 2 I/O failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::detector::{decode_detections, Detector, DetectorConfig, InferenceConfig, Trainer};
use crate::error::Error;
use crate::geometry::{Detection, IouMode};
use crate::tensor::{Shape, Tensor};
use crate::toolkit::dataset::{
    detections_path, format_detections, list_indices, read_boxes, read_detections, write_detections,
};
use crate::toolkit::pnm::{read_pnm, write_pgm, write_ppm};
use crate::toolkit::{
    evaluate_detections, generate_scene, load_weights, read_dataset, save_weights, write_dataset, GenConfig,
};
use crate::verify::{gradient_suite, model_gradient_check, MODEL_GRADCHECK_TOLERANCE};

#[derive(Debug, Parser)]
#[command(name = "textdet", version, about = "Single-shot word detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Train from a dataset directory and save weights.
    Train(TrainArgs),
    /// Run a trained model on one image or a dataset directory.
    Detect(DetectArgs),
    /// Score detection files against ground-truth boxes.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Dump the default boxes of a configuration.
    Anchors(AnchorsArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Detector configuration (TOML); the desk configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> crate::Result<DetectorConfig> {
        match &self.config {
            Some(p) => DetectorConfig::load(p),
            None => Ok(DetectorConfig::desk()),
        }
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    min_words: usize,
    #[arg(long, default_value_t = 4)]
    max_words: usize,
    /// Largest absolute word rotation in radians.
    #[arg(long, default_value_t = 0.0)]
    max_rotation: f64,
    #[arg(long, default_value_t = 0.08)]
    noise: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
    /// Print the mean loss every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Start from these weights instead of a fresh initialisation.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    weights: PathBuf,
    /// A single PPM image; detections go to stdout unless `--out` is given.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    image: Option<PathBuf>,
    /// A dataset directory; one `NNNN.det.txt` per image is written to `--out`.
    #[arg(long, requires = "out")]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    conf: Option<f64>,
    #[arg(long)]
    nms: Option<f64>,
    /// Also write the text-probability map as a PGM.
    #[arg(long)]
    emit_attention: bool,
    /// Also write the image with detections drawn as a PPM.
    #[arg(long)]
    emit_overlay: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of `NNNN.det.txt` files.
    #[arg(long)]
    det: PathBuf,
    /// Dataset directory with `NNNN.boxes.txt` files.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Match on rotated-rectangle overlap instead of enclosing axis-aligned rectangles.
    #[arg(long)]
    rotated_iou: bool,
    /// Optional per-image report file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AnchorsArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Use the built-in full-scale configuration.
    #[arg(long, conflicts_with = "config")]
    full_scale: bool,
    /// Only the per-layer header lines.
    #[arg(long)]
    summary: bool,
}

/// Maps a failure to its exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> anyhow::Result<i32> {
    match cmd {
        Command::GenData(a) => gen_data(a, out).map(|_| 0),
        Command::Train(a) => train(a, out).map(|_| 0),
        Command::Detect(a) => run_detect(a, out).map(|_| 0),
        Command::Eval(a) => eval(a, out).map(|_| 0),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Anchors(a) => anchors(a, out).map(|_| 0),
    }
}

/// Seed of the `index`-th scene of a dataset drawn with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let gen = GenConfig {
        size: a.size,
        min_words: a.min_words,
        max_words: a.max_words,
        max_rotation: a.max_rotation,
        noise: a.noise,
        ..GenConfig::default()
    };
    let samples = (0..a.count)
        .map(|i| generate_scene(scene_seed(a.seed, i), &gen))
        .collect::<crate::Result<Vec<_>>>()?;
    write_dataset(&a.out, &samples).with_context(|| format!("writing {}", a.out.display()))?;
    let words: usize = samples.iter().map(|s| s.boxes.len()).sum();
    writeln!(
        out,
        "wrote {} scenes ({words} words) to {}",
        samples.len(),
        a.out.display()
    )?;
    Ok(())
}

fn train(a: TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = a.config.load()?;
    let data = read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    if data.is_empty() {
        bail!(Error::invalid("train", format!("no images in {}", a.data.display())));
    }
    if !cfg.augment.enabled {
        if let Some(s) = data
            .iter()
            .find(|s| (s.height(), s.width()) != (cfg.input_size, cfg.input_size))
        {
            bail!(Error::invalid(
                "train",
                format!(
                    "image is {}x{}, the model expects {2}x{2} when augmentation is off",
                    s.width(),
                    s.height(),
                    cfg.input_size
                ),
            ));
        }
    }
    let det = Detector::new(cfg)?;
    let mut trainer = match &a.init {
        Some(p) => {
            let params = load_weights(p)?;
            params.check(&det.param_specs())?;
            Trainer::with_params(det, params, a.seed)
        }
        None => Trainer::new(det, a.seed)?,
    };
    let every = a.log_every.max(1);
    let mut window = (0.0, 0usize);
    for _ in 0..a.steps {
        let r = trainer.train_on(&data)?;
        window = (window.0 + r.loss.total, window.1 + 1);
        if (r.step + 1) % every == 0 || r.step + 1 == a.steps {
            writeln!(
                out,
                "step {} lr {} loss {:.5} (last: cls {:.5} loc {:.5} attention {:.5})",
                r.step + 1,
                r.lr,
                window.0 / window.1 as f64,
                r.loss.cls,
                r.loss.loc,
                r.loss.attention
            )?;
            window = (0.0, 0);
        }
    }
    save_weights(trainer.params(), &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    writeln!(out, "saved {}", a.out.display())?;
    Ok(())
}

fn inference_config(cfg: &DetectorConfig, conf: Option<f64>, nms: Option<f64>) -> crate::Result<InferenceConfig> {
    let mut inf = cfg.inference;
    if let Some(c) = conf {
        inf.conf_threshold = c;
    }
    if let Some(n) = nms {
        inf.nms_threshold = n;
    }
    for (name, v) in [("--conf", inf.conf_threshold), ("--nms", inf.nms_threshold)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid("detect", format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    Ok(inf)
}

/// Draws box outlines in red onto a copy of a `1 x 3 x H x W` image.
pub fn draw_overlay(image: &Tensor<f32>, dets: &[Detection]) -> Tensor<f32> {
    let mut img = image.clone();
    let s = img.shape();
    for d in dets {
        let c = d.bbox.corners();
        for k in 0..4 {
            let (a, b) = (c[k], c[(k + 1) % 4]);
            let steps = ((b.0 - a.0).hypot(b.1 - a.1) * 2.0).ceil().max(1.0) as usize;
            for t in 0..=steps {
                let f = t as f64 / steps as f64;
                let (x, y) = (a.0 + (b.0 - a.0) * f, a.1 + (b.1 - a.1) * f);
                if x < 0.0 || y < 0.0 || x >= s.w as f64 || y >= s.h as f64 {
                    continue;
                }
                let (x, y) = (x as usize, y as usize);
                for (ch, v) in [1.0, 0.0, 0.0].into_iter().enumerate() {
                    img.set(0, ch, y, x, v);
                }
            }
        }
    }
    img
}

fn run_detect(a: DetectArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = a.config.load()?;
    let inf = inference_config(&cfg, a.conf, a.nms)?;
    let det = Detector::new(cfg)?;
    let params = load_weights(&a.weights).with_context(|| format!("reading {}", a.weights.display()))?;
    params.check(&det.param_specs())?;

    let (images, out_dir): (Vec<(PathBuf, String)>, Option<PathBuf>) = match (&a.image, &a.data) {
        (Some(p), _) => {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            (vec![(p.clone(), stem)], a.out.clone())
        }
        (None, Some(dir)) => {
            let list = list_indices(dir)?
                .into_iter()
                .map(|i| (dir.join(format!("{i:04}.ppm")), format!("{i:04}")))
                .collect();
            (list, a.out.clone())
        }
        (None, None) => bail!(Error::invalid("detect", "either --image or --data is required")),
    };
    if let Some(d) = &out_dir {
        std::fs::create_dir_all(d)?;
    }
    let size = det.input_size();
    let mut total = 0;
    for (path, stem) in &images {
        let img = read_pnm(path).with_context(|| format!("reading {}", path.display()))?;
        if img.shape() != Shape::new(1, 3, size, size) {
            bail!(Error::invalid(
                "detect",
                format!(
                    "{} is {}, the model expects 1x3x{size}x{size}",
                    path.display(),
                    img.shape()
                ),
            ));
        }
        let output = det.forward(&[&img], &params)?;
        let dets = decode_detections(&det, &output, 0, &inf)?;
        total += dets.len();
        let emit_dir = out_dir
            .clone()
            .or_else(|| path.parent().map(Path::to_path_buf))
            .unwrap_or_default();
        match &out_dir {
            Some(d) => write_detections(&d.join(format!("{stem}.det.txt")), &dets)?,
            None => write!(out, "{}", format_detections(&dets))?,
        }
        if a.emit_attention {
            match &output.attention {
                Some(maps) => write_pgm(emit_dir.join(format!("{stem}.attention.pgm")), &maps.alpha_pos)?,
                None => bail!(Error::invalid(
                    "detect",
                    "--emit-attention needs a configuration with attention enabled"
                )),
            }
        }
        if a.emit_overlay {
            write_ppm(emit_dir.join(format!("{stem}.overlay.ppm")), &draw_overlay(&img, &dets))?;
        }
    }
    if out_dir.is_some() {
        writeln!(out, "{total} detections in {} images", images.len())?;
    }
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if !(a.iou > 0.0 && a.iou < 1.0) {
        bail!(Error::invalid(
            "eval",
            format!("--iou must lie in (0, 1), got {}", a.iou)
        ));
    }
    let mut indices = Vec::new();
    for entry in std::fs::read_dir(&a.gt).with_context(|| format!("reading {}", a.gt.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".boxes.txt") {
            if let Ok(i) = stem.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    let mut gts = Vec::with_capacity(indices.len());
    let mut dets = Vec::with_capacity(indices.len());
    for &i in &indices {
        gts.push(read_boxes(&a.gt.join(format!("{i:04}.boxes.txt")))?);
        dets.push(read_detections(&detections_path(&a.det, i))?);
    }
    let mode = if a.rotated_iou {
        IouMode::Rotated
    } else {
        IouMode::Enclosing
    };
    let report = evaluate_detections(&dets, &gts, a.iou, mode)?;
    writeln!(out, "{}", report.summary_line())?;
    if let Some(p) = &a.report {
        std::fs::write(p, report.per_image_report()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let mut worst: std::collections::BTreeMap<String, (f64, usize, bool)> = Default::default();
    for seed in a.seed..a.seed + a.seeds {
        for r in gradient_suite(seed)? {
            let e = worst.entry(r.name.clone()).or_insert((0.0, 0, true));
            e.0 = e.0.max(r.report.max_rel_error);
            e.1 += r.report.checked;
            e.2 &= r.passed();
        }
    }
    let model = model_gradient_check(a.seed, 2)?;
    worst.insert(
        "detector_f32".into(),
        (
            model.max_rel_error,
            model.checked,
            model.max_rel_error < MODEL_GRADCHECK_TOLERANCE && model.checked > 0,
        ),
    );
    let mut ok = true;
    for (name, (err, checked, pass)) in &worst {
        ok &= pass;
        writeln!(
            out,
            "{} {name} max_rel_error {err:.3e} checked {checked}",
            if *pass { "PASS" } else { "FAIL" }
        )?;
    }
    Ok(if ok { 0 } else { 1 })
}

fn anchors(a: AnchorsArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = if a.full_scale {
        DetectorConfig::full_scale()
    } else {
        a.config.load()?
    };
    let det = Detector::new(cfg)?;
    out.write_all(det.anchors().dump(a.summary).as_bytes())?;
    Ok(())
}
