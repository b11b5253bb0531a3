//! `dgfd` command line: training, inference, evaluation, haze synthesis,
//! spectral experiments, the gradient suite and model statistics.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dgfd_core::checkpoint::{load_checkpoint, save_checkpoint};
use dgfd_core::config::RunConfig;
use dgfd_core::gradient_suite::run_default_suite;
use dgfd_core::image::{load_gray, load_image, save_gray, save_image};
use dgfd_core::metrics::MetricRecord;
use dgfd_core::network::{flop_count, param_count, Ablation};
use dgfd_core::priors::{synthesize_haze, HazeParams};
use dgfd_core::spectral::{modify_local_amplitude, swap_components, Component, SpectrumRegion};
use dgfd_core::training::{load_pair_dir, synthetic_pairs, train_loop, TrainConfig};
use dgfd_core::{DgfdNet, ModelConfig};

/// Reference complexity of the full model at 256x256.
pub const REFERENCE_PARAMS_M: f64 = 2.08;
pub const REFERENCE_FLOPS_G: f64 = 13.65;

#[derive(Debug, Parser)]
#[command(name = "dgfd", version, about = "Dark-channel-guided dual-domain dehazing")]
struct Cli {
    /// Overrides every seed in the run configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Dehaze one image with a trained checkpoint.
    Dehaze(DehazeArgs),
    /// Score a checkpoint on hazy/clean pairs listed in an NDJSON manifest.
    Eval(EvalArgs),
    /// Render haze onto a clean image from a depth map.
    Synth(SynthArgs),
    /// Swap spectral components between images or rescale a band of the amplitude.
    Spectrum(SpectrumArgs),
    /// Run the 64-bit gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print parameter and FLOP counts for a configuration.
    Info(InfoArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training schedule preset (its, ots, dense, nh) when no config is given.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Directory holding `hazy/` and `clean/` PNGs with matching names.
    #[arg(long, required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Train on this many generated pairs instead of `--data`.
    #[arg(long, conflicts_with = "data")]
    synthetic: Option<usize>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Iteration count, overriding the configured epochs.
    #[arg(long)]
    steps: Option<usize>,
    /// NDJSON training log; defaults to `<out>.log.ndjson`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DehazeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write each block's spatial attention map (channel mean) as a PNG here.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// NDJSON lines `{"id", "hazy", "clean"}`; relative paths resolve against the manifest.
    #[arg(long)]
    pairs: PathBuf,
    /// Also save dehazed outputs here.
    #[arg(long)]
    save_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    clean: PathBuf,
    /// Greyscale depth map, same size as the clean image; white is far.
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    beta: f32,
    /// One value or `r,g,b`.
    #[arg(long, default_value = "1.0")]
    airlight: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SpectrumArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long, required_unless_present = "modify_region")]
    b: Option<PathBuf>,
    /// Component to exchange: phase, amplitude, real or imaginary.
    #[arg(long, conflicts_with = "modify_region", required_unless_present = "modify_region")]
    swap: Option<String>,
    /// Half-spectrum rectangle `row,col,rows,cols` whose amplitude is scaled by `--gain`.
    #[arg(long)]
    modify_region: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    gain: f64,
    /// Receives `a_swapped.png` and `b_swapped.png`, or `modified.png`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// One JSON report per line instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct InfoArgs {
    /// TOML run configuration; the default model otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ablation: Option<String>,
    /// Square input side for the FLOP estimate.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Deserialize)]
struct ManifestLine {
    id: String,
    hazy: PathBuf,
    clean: PathBuf,
}

#[derive(Debug, Serialize)]
struct InfoReport {
    ablation: String,
    params: usize,
    reference_params_m: f64,
    input: usize,
    flops: u64,
    conv_macs: u64,
    reference_flops_g: Option<f64>,
    macs_ratio_to_reference: Option<f64>,
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 1 on runtime failure and 2 on usage errors.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train(a, cli.seed),
        Command::Dehaze(a) => dehaze(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Spectrum(a) => spectrum(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Info(a) => info(a, cli.seed),
    }
}

fn load_run_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn train(args: TrainArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = load_run_config(args.config.as_deref())?;
    if let Some(p) = &args.preset {
        cfg.train = TrainConfig::preset(p)?;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = Some(s);
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    let pairs = match (&args.data, args.synthetic) {
        (Some(dir), _) => load_pair_dir(dir).with_context(|| format!("loading pairs from {}", dir.display()))?,
        (None, Some(n)) => synthetic_pairs(n, cfg.train.patch_size, cfg.train.seed)?,
        (None, None) => bail!("either --data or --synthetic is required"),
    };
    let mut net = DgfdNet::<f32>::build(&cfg.model)?;
    let log_path = args.log.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log.ndjson");
        p.into()
    });
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let report = train_loop(&mut net, &pairs, &cfg.train, Some(&mut log))?;
    log.flush()?;
    save_checkpoint(&net, report.steps as u64, &args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "steps": report.steps,
            "final_loss": report.records.last().map(|r| r.loss),
            "final_psnr": report.final_psnr,
            "checkpoint": args.out,
            "log": log_path,
        })
    );
    Ok(())
}

fn dehaze(args: DehazeArgs) -> anyhow::Result<()> {
    let (net, _) = load_checkpoint::<f32>(&args.ckpt)?;
    let img = load_image(&args.input)?;
    let (out, taps) = net.dehaze(&img)?;
    save_image(&out, &args.out)?;
    if let Some(dir) = &args.dump_attention {
        std::fs::create_dir_all(dir)?;
        for tap in &taps {
            let [_, c, h, w] = tap.m_sa.dims4()?;
            let plane = h * w;
            let mean: Vec<f32> = (0..plane)
                .map(|i| (0..c).map(|ch| tap.m_sa.data()[ch * plane + i]).sum::<f32>() / c as f32)
                .collect();
            save_gray(&mean, w, h, dir.join(format!("m_sa_{}.png", tap.position)))?;
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let (net, _) = load_checkpoint::<f32>(&args.ckpt)?;
    let base = args.pairs.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(File::open(&args.pairs).with_context(|| format!("opening {}", args.pairs.display()))?);
    if let Some(dir) = &args.save_dir {
        std::fs::create_dir_all(dir)?;
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", args.pairs.display(), n + 1))?;
        let hazy = load_image(base.join(&entry.hazy))?;
        let clean = load_image(base.join(&entry.clean))?;
        let (restored, _) = net.dehaze(&hazy)?;
        if let Some(dir) = &args.save_dir {
            save_image(&restored, dir.join(format!("{}.png", entry.id)))?;
        }
        let record = MetricRecord::score(entry.id, &restored, &clean)?;
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(())
}

fn parse_airlight(s: &str) -> anyhow::Result<[f32; 3]> {
    let v: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("airlight {s:?}"))?;
    match v[..] {
        [a] => Ok([a; 3]),
        [r, g, b] => Ok([r, g, b]),
        _ => bail!("airlight takes one value or r,g,b"),
    }
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let clean = load_image(&args.clean)?;
    let (w, h, depth) = load_gray(&args.depth)?;
    if (w, h) != (clean.width(), clean.height()) {
        bail!(
            "depth map is {w}x{h} but the clean image is {}x{}",
            clean.width(),
            clean.height()
        );
    }
    let params = HazeParams {
        airlight: parse_airlight(&args.airlight)?,
        beta: args.beta,
        depth,
    };
    save_image(&synthesize_haze(&clean, &params)?, &args.out)?;
    Ok(())
}

fn spectrum(args: SpectrumArgs) -> anyhow::Result<()> {
    let a = load_image(&args.a)?;
    std::fs::create_dir_all(&args.out_dir)?;
    if let Some(region) = &args.modify_region {
        let region: SpectrumRegion = region.parse()?;
        let out = modify_local_amplitude(&a, region, args.gain)?.with_bit_depth(a.bit_depth());
        save_image(&out, args.out_dir.join("modified.png"))?;
        return Ok(());
    }
    let b = load_image(args.b.as_ref().context("--b is required with --swap")?)?;
    let which: Component = args.swap.as_deref().context("--swap or --modify-region is required")?.parse()?;
    let (sa, sb) = swap_components(&a, &b, which)?;
    save_image(&sa.with_bit_depth(a.bit_depth()), args.out_dir.join("a_swapped.png"))?;
    save_image(&sb.with_bit_depth(b.bit_depth()), args.out_dir.join("b_swapped.png"))?;
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let reports = run_default_suite()?;
    let mut failed = Vec::new();
    for r in &reports {
        if args.json {
            println!("{}", serde_json::to_string(r)?);
        } else {
            println!(
                "{:<4} {:<28} coords {:>5}  max rel {:.2e}  max abs {:.2e}",
                if r.passed() { "ok" } else { "FAIL" },
                r.name,
                r.checked,
                r.max_rel_err,
                r.max_abs_err
            );
        }
        if !r.passed() {
            failed.push(format!("{} ({})", r.name, r.worst));
        }
    }
    if !failed.is_empty() {
        bail!("{} gradient checks failed: {}", failed.len(), failed.join(", "));
    }
    Ok(())
}

fn info(args: InfoArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut model: ModelConfig = load_run_config(args.config.as_deref())?.model;
    if let Some(a) = &args.ablation {
        model.ablation = a.parse::<Ablation>()?;
    }
    if let Some(s) = seed {
        model.seed = s;
    }
    let params = param_count(&model)?;
    let cost = flop_count(&model, args.size, args.size)?;
    let at_reference = args.size == 256 && model.ablation == Ablation::None;
    let report = InfoReport {
        ablation: model.ablation.to_string(),
        params,
        reference_params_m: model.ablation.reference_params_m(),
        input: args.size,
        flops: cost.flops,
        conv_macs: cost.conv_macs,
        reference_flops_g: at_reference.then_some(REFERENCE_FLOPS_G),
        macs_ratio_to_reference: at_reference.then(|| cost.conv_macs as f64 / (REFERENCE_FLOPS_G * 1e9)),
    };
    if args.json {
        println!("{}", serde_json::to_string(&report)?);
        return Ok(());
    }
    println!("ablation      {}", report.ablation);
    println!(
        "parameters    {} ({:.3}M, reference {:.2}M)",
        params,
        params as f64 / 1e6,
        report.reference_params_m
    );
    println!(
        "FLOPs         {:.3}G at {}x{} (2 per multiply-accumulate, plus norm, activation and FFT terms)",
        cost.flops as f64 / 1e9,
        args.size,
        args.size
    );
    print!("conv MACs     {:.3}G", cost.conv_macs as f64 / 1e9);
    match report.macs_ratio_to_reference {
        Some(r) => println!(" (reference {REFERENCE_FLOPS_G}G, ratio {r:.3})"),
        None => println!(),
    }
    Ok(())
}
