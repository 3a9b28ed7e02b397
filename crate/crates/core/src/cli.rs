//! The `lesionkit` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Data goes to
//! stdout or to the `--out`/`--out-dir` targets; diagnostics go to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array3;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::annotations::{parse_annotations, HEADER};
use crate::anchors::{optimize_anchors_de, parse_box_lines, Box, DeParams};
use crate::eval::{
    count_images, parse_detections, render_report_csv, sensitivity_at_fp, stratified_report, GroundTruth,
    ReportRow, Strata, DEFAULT_FP_RATES,
};
use crate::fusion::{
    fuse, gradient_check, max_row_sum_deviation, mhsa_forward, concat_views, FeatureBlock, FusionConfig,
    FusionParams,
};
use crate::io::{read_volume, write_params, write_pgm, write_raw_f32, write_volume, RawHeader};
use crate::preprocess::{crop_volume, recist_to_mask, resample, DEFAULT_TARGET_SPACING_MM};
use crate::synthgen::{generate_phantom, write_phantom, PhantomSpec};
use crate::windowing::{default_window_set, multi_intensity_stack, HuWindow, WindowSet};

#[derive(Debug, Parser)]
#[command(name = "lesionkit", version, about = "CT lesion-detection preprocessing, anchors, fusion and evaluation")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the multi-window intensity stack for one key slice.
    Window(WindowArgs),
    /// Crop black borders, resample and rasterize RECIST pseudo masks.
    Preprocess(PreprocessArgs),
    /// Search lesion-specific anchor sizes and ratios.
    AnchorsOptimize(AnchorsArgs),
    /// Run the fusion block on random features and check its gradients.
    FuseDemo(FuseDemoArgs),
    /// Sensitivity at fixed false positives per image.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic phantom with annotations.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    /// Volume header (`.json` next to its `.raw`).
    #[arg(long)]
    pub volume: PathBuf,
    /// Key slice index.
    #[arg(long)]
    pub slice: usize,
    /// `level,width`; repeatable. Overrides the default five windows.
    #[arg(long = "window", allow_hyphen_values = true)]
    pub windows: Vec<String>,
    /// File with one `level,width` per line.
    #[arg(long)]
    pub windows_file: Option<PathBuf>,
    /// Output header path; the stack is written as `(views, 3, H, W)` f32.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Target spacing `x,y,z` in mm.
    #[arg(long, default_value = "0.8,0.8,2")]
    pub spacing: String,
    /// Annotation CSV; writes one RECIST pseudo mask per record.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Skip black-border cropping.
    #[arg(long)]
    pub no_crop: bool,
}

#[derive(Debug, Args)]
pub struct AnchorsArgs {
    /// Annotation CSV or `x1,y1,x2,y2` lines.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub generations: usize,
    #[arg(long, default_value_t = 50)]
    pub population: usize,
    #[arg(long, default_value_t = 5)]
    pub sizes: usize,
    #[arg(long, default_value_t = 5)]
    pub ratios: usize,
    /// Output JSON `{sizes, ratios, levels}`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseDemoArgs {
    #[arg(long, default_value_t = 8)]
    pub h: usize,
    #[arg(long, default_value_t = 8)]
    pub w: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Entries probed per tensor in the gradient check.
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
    /// Directory for `params.bin` + `params.json` of the full-size block.
    #[arg(long)]
    pub params_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrataArg {
    None,
    Organ,
    Size,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Detections as JSON lines.
    #[arg(long)]
    pub dets: PathBuf,
    /// Ground-truth annotation CSV.
    #[arg(long)]
    pub gts: PathBuf,
    /// Extra image keys (one per line) evaluated without lesions.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Overrides the false-positive denominator (default: image count).
    #[arg(long)]
    pub fp_denominator: Option<usize>,
    #[arg(long, value_enum, default_value_t = StrataArg::None)]
    pub strata: StrataArg,
    /// Comma-separated FP-per-image operating points.
    #[arg(long, default_value = "0.5,1,2,4")]
    pub fp_rates: String,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Phantom spec JSON; defaults to the built-in example phantom.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the spec seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn dispatch<I, S>(argv: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| run(cli.command, out, err)),
            Err(e) => Err(e.into()),
        },
        None => run(cli.command, out, err),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn run(cmd: Command, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<()> {
    match cmd {
        Command::Window(a) => cmd_window(a, err),
        Command::Preprocess(a) => cmd_preprocess(a, err),
        Command::AnchorsOptimize(a) => cmd_anchors(a, err),
        Command::FuseDemo(a) => cmd_fuse_demo(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Synth(a) => cmd_synth(a, err),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn parse_floats(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad {what} value `{t}`")))
        .collect()
}

fn cmd_window(a: WindowArgs, err: &mut (dyn Write + Send)) -> Result<()> {
    let vol = read_volume(&a.volume)?;
    let (ns, h, w) = vol.dims();
    if a.slice >= ns {
        bail!("slice {} out of range for {ns} slices", a.slice);
    }
    let mut windows: Vec<HuWindow<f64>> = Vec::new();
    if let Some(path) = &a.windows_file {
        windows.extend_from_slice(WindowSet::parse_config(&read_text(path)?)?.windows());
    }
    for spec in &a.windows {
        windows.push(spec.parse()?);
    }
    let ws = if windows.is_empty() {
        default_window_set()
    } else {
        WindowSet::new(windows)?
    };
    let stack = multi_intensity_stack(&vol.context_slices(a.slice), &ws)?;
    let header = RawHeader {
        dims: vec![ws.len(), 3, h, w],
        spacing_mm: None,
    };
    write_raw_f32(&a.out, &header, stack.iter().copied())?;
    writeln!(err, "wrote {} windows x 3 slices of {h}x{w} to {}", ws.len(), a.out.display())?;
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs, err: &mut (dyn Write + Send)) -> Result<()> {
    let spacing = parse_floats(&a.spacing, "spacing")?;
    let target: [f64; 3] = spacing
        .try_into()
        .map_err(|_| anyhow::anyhow!("--spacing needs three values x,y,z"))?;
    let vol = read_volume(&a.volume)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let (cropped, rect) = if a.no_crop {
        let (_, h, w) = vol.dims();
        (vol.clone(), crate::preprocess::CropRect::full(h, w))
    } else {
        crop_volume(&vol)
    };
    let resampled = resample(&cropped, target)?;
    write_volume(&a.out_dir.join("volume.json"), &resampled)?;
    let crop_json = serde_json::json!({
        "crop_rect": [rect.x0, rect.y0, rect.x1, rect.y1],
        "source_dims": vol.dims(),
        "output_dims": resampled.dims(),
        "target_spacing_mm": target,
        "default_spacing_mm": DEFAULT_TARGET_SPACING_MM,
    });
    fs::write(a.out_dir.join("preprocess.json"), format!("{crop_json:#}\n"))?;

    if let Some(path) = &a.annotations {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let records = parse_annotations(file)?;
        let (_, h, w) = vol.dims();
        let mask_dir = a.out_dir.join("masks");
        fs::create_dir_all(&mask_dir)?;
        for (i, r) in records.iter().enumerate() {
            let mask = recist_to_mask(&r.recist, (h, w)).with_context(|| format!("record {}", i + 1))?;
            write_pgm(&mask_dir.join(format!("{i:04}_{}.pgm", r.image_key)), &mask)?;
        }
        writeln!(err, "wrote {} pseudo masks", records.len())?;
    }
    writeln!(
        err,
        "cropped to {:?}, resampled {:?} -> {:?}",
        (rect.x0, rect.y0, rect.x1, rect.y1),
        vol.dims(),
        resampled.dims()
    )?;
    Ok(())
}

/// Ground-truth boxes from an annotation CSV or a plain box list.
pub fn read_gt_boxes(path: &Path) -> Result<Vec<Box<f64>>> {
    let text = read_text(path)?;
    if text.lines().next().map(str::trim) == Some(HEADER) {
        let records = parse_annotations(text.as_bytes())?;
        Ok(records.iter().map(|r| Box::from_array(r.bbox)).collect())
    } else {
        parse_box_lines(&text).map_err(|m| anyhow::anyhow!("{}: {m}", path.display()))
    }
}

fn cmd_anchors(a: AnchorsArgs, err: &mut (dyn Write + Send)) -> Result<()> {
    let gt = read_gt_boxes(&a.gt)?;
    let mut p = DeParams::with_shape(a.sizes, a.ratios, a.seed);
    p.generations = a.generations;
    p.population = a.population;
    let outcome = optimize_anchors_de(&gt, &p)?;
    let json = serde_json::to_string_pretty(&outcome.config)?;
    fs::write(&a.out, format!("{json}\n")).with_context(|| format!("writing {}", a.out.display()))?;
    writeln!(
        err,
        "{} boxes, {} generations: fitness {:.6} (initial {:.6})",
        gt.len(),
        a.generations,
        outcome.fitness,
        outcome.history[0]
    )?;
    Ok(())
}

fn cmd_fuse_demo(a: FuseDemoArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    if a.h == 0 || a.w == 0 {
        bail!("--h and --w must be positive");
    }
    let cfg = FusionConfig::DETECTOR;
    let block = FeatureBlock::<f64>::random(&cfg, a.h, a.w, 2, a.seed);
    let params = FusionParams::init(&cfg, a.seed.wrapping_add(1))?;
    let fused = fuse(&block, &params.attention, &params.conv)?;
    let attn = mhsa_forward(concat_views(&block)?.view(), &params.attention)?;
    writeln!(out, "output_shape: {:?}", fused.shape())?;
    writeln!(out, "attention_row_sum_max_deviation: {:e}", max_row_sum_deviation(&attn.attn))?;
    if let Some(dir) = &a.params_out {
        fs::create_dir_all(dir)?;
        write_params(dir, &params.to_named())?;
    }

    let small = FusionConfig::REDUCED;
    let block = FeatureBlock::<f64>::random(&small, a.h, a.w, 2, a.seed.wrapping_add(2));
    let params = FusionParams::init(&small, a.seed.wrapping_add(3))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(4));
    let dist = Uniform::new(-1.0, 1.0);
    let upstream = Array3::from_shape_fn((small.channels, a.h, a.w), |_| dist.sample(&mut rng));
    let report = gradient_check(&block, &params, upstream.view(), 1e-5, a.probes, a.seed)?;
    writeln!(out, "gradient_check_max_rel_error: {:e}", report.max_rel_error)?;
    writeln!(out, "gradient_check_entries: {}", report.checked)?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    let dets = parse_detections(std::io::BufReader::new(
        fs::File::open(&a.dets).with_context(|| format!("opening {}", a.dets.display()))?,
    ))?;
    let records = parse_annotations(fs::File::open(&a.gts).with_context(|| format!("opening {}", a.gts.display()))?)?;
    let gts: Vec<GroundTruth> = records.iter().map(GroundTruth::from).collect();
    let extra = match &a.images {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let extra_keys = extra.lines().map(str::trim).filter(|l| !l.is_empty());
    let num_images = a.fp_denominator.unwrap_or_else(|| count_images(&gts, extra_keys));
    let rates = if a.fp_rates.trim().is_empty() {
        DEFAULT_FP_RATES.to_vec()
    } else {
        parse_floats(&a.fp_rates, "fp rate")?
    };

    let overall = sensitivity_at_fp(&dets, &gts, num_images, &rates)?;
    let mut rows = vec![ReportRow {
        label: "all".into(),
        gt_count: gts.len(),
        curve: Some(overall),
    }];
    let strata = match a.strata {
        StrataArg::None => None,
        StrataArg::Organ => Some(Strata::Organ),
        StrataArg::Size => Some(Strata::Size),
    };
    if let Some(s) = strata {
        rows.extend(stratified_report(&dets, &gts, num_images, s, &rates)?);
    }
    let csv = render_report_csv(&rows, &rates);
    match &a.out {
        Some(path) => fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => out.write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs, err: &mut (dyn Write + Send)) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str::<PhantomSpec>(&read_text(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => PhantomSpec::example(a.seed.unwrap_or(0)),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let phantom = generate_phantom(&spec)?;
    write_phantom(&a.out_dir, &phantom)?;
    writeln!(
        err,
        "wrote {:?} phantom with {} lesions to {}",
        phantom.volume.dims(),
        phantom.records.len(),
        a.out_dir.display()
    )?;
    Ok(())
}
