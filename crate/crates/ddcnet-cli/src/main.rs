//! `ddcnet` command line: network inspection, ERF measurement, depth
//! design, training, evaluation and flow visualization, all emitted as
//! files plus one machine-parseable summary line per command.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ddcnet::design::{
    compare_schedules, design_depth_with_maps, magnitude_histogram, write_erf_strip,
    write_schedule_csv, DesignCriteria, FlowHistogram, COMPARE_EPS,
};
use ddcnet::erf::{compute_erf, constant_init, constant_init_value, measure_fwhm, ErfProbe};
use ddcnet::flow::{aee, fl_all, flow_to_color, read_flo, FlowField};
use ddcnet::net::{
    ddcnet_b0, ddcnet_b1, forward, linear_schedule, load_spec_file, LayerKind, NetworkSpec,
    ParamStore,
};
use ddcnet::train::{synth_pair, train, SynthSource, TrainConfig};
use ddcnet::{Error, Result};

/// Receptive-field-guided design, training and evaluation of dilated
/// dense-prediction networks.
#[derive(Parser)]
#[command(name = "ddcnet", version, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// `--net` accepts `b0`, `b1`, `linear:DEPTH[:STEP[:FILTERS]]` (step
/// defaults to 1, filters to 16) or a path to a network spec file.
const NET_HELP: &str = "Network: b0 | b1 | linear:DEPTH[:STEP[:FILTERS]] | spec-file path";

#[derive(Args)]
struct OutDir {
    /// Output directory (must exist)
    #[arg(long, env = "DDCNET_OUT", default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Describe a network: layer table, parameter count, receptive field
    Info {
        #[arg(long, default_value = "b0", help = NET_HELP)]
        net: String,
    },
    /// Measure a constant-init effective receptive field and export it
    Erf {
        #[arg(long, default_value = "b0", help = NET_HELP)]
        net: String,
        /// Probe side length (snapped to the network's divisor)
        #[arg(long, default_value_t = 129)]
        size: usize,
        /// Constant init value (default: 1/fan_in per layer)
        #[arg(long)]
        value: Option<f64>,
        /// Basename prefix for the emitted files
        #[arg(long, default_value = "erf")]
        prefix: String,
        #[command(flatten)]
        out: OutDir,
    },
    /// Choose network depth from a flow-magnitude histogram and/or
    /// compare dilation schedules at fixed depth
    Design {
        /// Synthetic histogram with this 99th-percentile magnitude (px)
        #[arg(long)]
        magnitude: Option<f64>,
        /// Directory of .flo files to build the histogram from
        #[arg(long)]
        flows: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Coverage percentile of the design rule
        #[arg(long, default_value_t = 0.99)]
        percentile: f64,
        /// FWHM target as a multiple of the coverage magnitude
        #[arg(long, default_value_t = 2.0)]
        factor: f64,
        /// Dilation step of the candidate trunks
        #[arg(long, default_value_t = 1)]
        step: usize,
        #[arg(long, default_value_t = 30)]
        max_depth: usize,
        #[arg(long, default_value_t = 4)]
        filters: usize,
        /// Also compare linear/exponential/constant schedules at this depth
        #[arg(long)]
        compare_depth: Option<usize>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Train on synthetic data, writing checkpoints and a history CSV
    Train {
        /// key=value config file (flags below override it)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "linear:5:1:16", help = NET_HELP)]
        net: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        l2: Option<f64>,
        /// Synthetic frame side length
        #[arg(long)]
        size: Option<usize>,
        /// Largest synthetic displacement (px)
        #[arg(long)]
        max_disp: Option<usize>,
        /// Comma-separated layer ids to freeze
        #[arg(long)]
        freeze: Option<String>,
        /// Start from this checkpoint instead of He init
        #[arg(long)]
        init: Option<PathBuf>,
        /// Enable geometric+photometric augmentation
        #[arg(long)]
        augment: bool,
        /// Stop early at this held-out AEE
        #[arg(long)]
        target_aee: Option<f64>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Score estimated flows against ground truth (AEE, Fl-all)
    Eval {
        /// Directory of estimated .flo files (paired with --gt by name)
        #[arg(long, requires = "gt", conflicts_with_all = ["net", "ckpt"])]
        est: Option<PathBuf>,
        /// Directory of ground-truth .flo files
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Evaluate this network... (with --ckpt, on synthetic data)
        #[arg(long, requires = "ckpt", help = NET_HELP)]
        net: Option<String>,
        /// ...restored from this checkpoint
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        max_disp: usize,
        #[command(flatten)]
        out: OutDir,
    },
    /// Render a .flo file with the standard color wheel (PPM)
    Viz {
        /// Input .flo file
        #[arg(long)]
        flo: PathBuf,
        /// Normalization magnitude (default: the field's maximum)
        #[arg(long)]
        max_mag: Option<f32>,
        #[command(flatten)]
        out: OutDir,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        // usage and path problems exit 2, computation problems exit 1
        let code = match e {
            Error::Usage(_) | Error::Io { .. } => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Info { net } => cmd_info(&net),
        Cmd::Erf {
            net,
            size,
            value,
            prefix,
            out,
        } => cmd_erf(&net, size, value, &prefix, &out.out),
        Cmd::Design {
            magnitude,
            flows,
            bins,
            percentile,
            factor,
            step,
            max_depth,
            filters,
            compare_depth,
            out,
        } => cmd_design(
            magnitude,
            flows.as_deref(),
            bins,
            DesignCriteria {
                coverage_percentile: percentile,
                coverage_factor: factor,
                dilation_step: step,
                max_depth,
                filters,
            },
            compare_depth,
            &out.out,
        ),
        Cmd::Train {
            config,
            net,
            seed,
            steps,
            batch,
            lr,
            l2,
            size,
            max_disp,
            freeze,
            init,
            augment,
            target_aee,
            out,
        } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            // flags override the file
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = steps {
                cfg.max_steps = v;
            }
            if let Some(v) = batch {
                cfg.batch = v;
            }
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = l2 {
                cfg.l2 = v;
            }
            if let Some(v) = size {
                cfg.size = v;
            }
            if let Some(v) = max_disp {
                cfg.max_disp = v;
            }
            if let Some(list) = freeze {
                cfg.frozen_layers = parse_freeze(&list)?;
            }
            if augment {
                cfg.augment = true;
            }
            if target_aee.is_some() {
                cfg.target_eval_aee = target_aee;
            }
            cmd_train(&net, cfg, init.as_deref(), &out.out)
        }
        Cmd::Eval {
            est,
            gt,
            net,
            ckpt,
            seed,
            samples,
            size,
            max_disp,
            out,
        } => match (est, net) {
            (Some(est), None) => cmd_eval_dirs(&est, &gt.expect("clap enforces --gt"), &out.out),
            (None, Some(net)) => cmd_eval_ckpt(
                &net,
                &ckpt.expect("clap enforces --ckpt"),
                seed,
                samples,
                size,
                max_disp,
                &out.out,
            ),
            (None, None) => Err(Error::usage(
                "eval needs either --est/--gt directories or --net/--ckpt",
            )),
            (Some(_), Some(_)) => unreachable!("clap conflicts_with_all"),
        },
        Cmd::Viz { flo, max_mag, out } => cmd_viz(&flo, max_mag, &out.out),
    }
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::usage(format!(
            "output directory {} does not exist",
            dir.display()
        )));
    }
    Ok(())
}

fn resolve_net(s: &str) -> Result<NetworkSpec> {
    let net = match s {
        "b0" => ddcnet_b0(),
        "b1" => ddcnet_b1(),
        _ if s.starts_with("linear:") => {
            let fields: Vec<&str> = s.split(':').collect();
            let bad = || {
                Error::usage(format!(
                    "bad network {s:?}: want linear:DEPTH[:STEP[:FILTERS]]"
                ))
            };
            if fields.len() < 2 || fields.len() > 4 {
                return Err(bad());
            }
            let depth: usize = fields[1].parse().map_err(|_| bad())?;
            let step: usize = fields.get(2).map_or(Ok(1), |f| f.parse()).map_err(|_| bad())?;
            let filters: usize =
                fields.get(3).map_or(Ok(16), |f| f.parse()).map_err(|_| bad())?;
            if depth == 0 || filters == 0 {
                return Err(bad());
            }
            linear_schedule(depth, step, filters, 3)
        }
        path => load_spec_file(Path::new(path))?,
    };
    net.validate()?;
    Ok(net)
}

fn parse_freeze(list: &str) -> Result<BTreeSet<u32>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::usage(format!("bad layer id {s:?} in --freeze")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// info
// ---------------------------------------------------------------------------

/// Published rounded parameter counts to check builders against, with
/// the accepted relative deviation.
fn published_params(name: &str) -> Option<(u64, f64)> {
    match name {
        "ddcnet-b0" => Some((1_030_000, 0.01)),
        "ddcnet-b1" => Some((2_990_000, 0.15)),
        _ => None,
    }
}

fn cmd_info(net_arg: &str) -> Result<()> {
    let net = resolve_net(net_arg)?;
    let params = net.param_count();
    let rf = net.theoretical_rf();
    let divisor = net.required_divisor();
    println!("network        {}", net.name);
    println!("input channels {}", net.input_channels);
    println!("conv layers    {}", net.conv_layer_count());
    println!("spec length    {}", net.spec_len());
    println!("parameters     {params} ({:.2} m)", params as f64 / 1e6);
    println!("theoretical rf {rf}");
    println!("input divisor  {divisor}");
    println!();
    println!("  id  stage   kind      kernel  dil    stride  filters  act     share");
    let stage_of = |id: u32| {
        if net.branch.iter().any(|l| l.id == id) {
            "branch"
        } else {
            "trunk"
        }
    };
    for layer in net.layers() {
        match &layer.kind {
            LayerKind::Conv {
                kernel,
                filters,
                dilation,
                stride,
                activation,
            } => {
                println!(
                    "{:>4}  {:<7} conv      {:>2}x{:<3}  {:>2},{:<3} {:>2},{:<3} {:>7}  {:<7} {}",
                    layer.id,
                    stage_of(layer.id),
                    kernel.0,
                    kernel.1,
                    dilation.0,
                    dilation.1,
                    stride.0,
                    stride.1,
                    filters,
                    format!("{activation:?}").to_lowercase(),
                    layer.share_group.as_deref().unwrap_or("-"),
                );
            }
            LayerKind::Upsample { factor } => {
                println!(
                    "{:>4}  {:<7} upsample  x{factor}",
                    layer.id,
                    stage_of(layer.id)
                );
            }
        }
    }
    println!();
    let mut tail = String::new();
    if let Some((published, tol)) = published_params(&net.name) {
        let delta = (params as f64 - published as f64).abs() / published as f64;
        let verdict = if delta <= tol { "ok" } else { "MISMATCH" };
        println!(
            "published count {published} ({:.2} m): delta {:.2}% of the rounded figure, tolerance {:.0}% -> {verdict}",
            published as f64 / 1e6,
            100.0 * delta,
            100.0 * tol,
        );
        tail = format!(" published={published} delta_pct={:.2}", 100.0 * delta);
    }
    println!(
        "INFO net={} convs={} params={params} rf={rf} divisor={divisor}{tail}",
        net.name,
        net.conv_layer_count()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// erf
// ---------------------------------------------------------------------------

fn cmd_erf(net_arg: &str, size: usize, value: Option<f64>, prefix: &str, out: &Path) -> Result<()> {
    ensure_out_dir(out)?;
    let net = resolve_net(net_arg)?;
    // deep constant-init gradients underflow f32, so always measure in f64
    let params = match value {
        Some(v) => constant_init_value::<f64>(&net, v)?,
        None => constant_init::<f64>(&net)?,
    };
    let map = compute_erf(&net, &params, (size, size), ErfProbe::Ones)?;
    let stats = measure_fwhm(&map)?;
    let (h, w) = map.dims();
    let files = [
        (out.join(format!("{prefix}-map.pgm")), "map"),
        (out.join(format!("{prefix}-map.csv")), "values"),
        (out.join(format!("{prefix}-row.csv")), "central row"),
        (out.join(format!("{prefix}-stats.txt")), "stats"),
    ];
    map.write_pgm(&files[0].0)?;
    map.write_full_csv(&files[1].0)?;
    map.write_profile_csv(&files[2].0)?;
    ddcnet::io::atomic_write(&files[3].0, format!("{}\n", stats.to_line()).as_bytes())?;
    for (path, what) in &files {
        println!("wrote {} ({what})", path.display());
    }
    println!("ERF net={} h={h} w={w} {}", net.name, stats.to_line());
    Ok(())
}

// ---------------------------------------------------------------------------
// design
// ---------------------------------------------------------------------------

fn load_flow_dir(dir: &Path) -> Result<Vec<FlowField>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "flo"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::usage(format!(
            "no .flo files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| read_flo(p)).collect()
}

fn cmd_design(
    magnitude: Option<f64>,
    flows: Option<&Path>,
    bins: usize,
    criteria: DesignCriteria,
    compare_depth: Option<usize>,
    out: &Path,
) -> Result<()> {
    ensure_out_dir(out)?;
    let hist = match (magnitude, flows) {
        (Some(_), Some(_)) => {
            return Err(Error::usage("give either --magnitude or --flows, not both"))
        }
        (Some(m), None) => Some(FlowHistogram::synthetic(m)?),
        (None, Some(dir)) => Some(magnitude_histogram(&load_flow_dir(dir)?, bins)?),
        (None, None) => None,
    };
    if hist.is_none() && compare_depth.is_none() {
        return Err(Error::usage(
            "nothing to do: give --magnitude or --flows for the depth loop, and/or --compare-depth",
        ));
    }
    let mut line = String::from("DESIGN");
    if let Some(hist) = hist {
        let (report, maps) = design_depth_with_maps(&criteria, &hist)?;
        let csv = out.join("design.csv");
        let strip = out.join("design-strip.pgm");
        report.write_csv(&csv)?;
        write_erf_strip(&maps, &strip)?;
        println!("  L  rf      fwhm     gridding");
        for row in &report.rows {
            println!(
                "{:>3}  {:<7} {:<8.3} {:.6}",
                row.depth, row.theoretical_rf, row.fwhm, row.gridding
            );
        }
        println!("wrote {} and {}", csv.display(), strip.display());
        let chosen = report
            .chosen_depth
            .map(|d| d.to_string())
            .unwrap_or_else(|| "none".into());
        line += &format!(
            " coverage={} target_fwhm={} probed={} chosen_depth={chosen}",
            report.coverage_magnitude,
            report.target_fwhm,
            report.rows.len()
        );
    }
    if let Some(depth) = compare_depth {
        let rows = compare_schedules(depth, criteria.dilation_step, criteria.filters, COMPARE_EPS)?;
        let csv = out.join("schedules.csv");
        write_schedule_csv(&rows, &csv)?;
        println!("  schedule            params   rf      fwhm     gridding");
        for row in &rows {
            println!(
                "  {:<18}  {:<8} {:<7} {:<8.3} {:.6}",
                row.name, row.params, row.theoretical_rf, row.fwhm, row.gridding
            );
        }
        println!("wrote {}", csv.display());
        line += &format!(" compare_depth={depth} schedules={}", rows.len());
    }
    println!("{line}");
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(net_arg: &str, cfg: TrainConfig, init: Option<&Path>, out: &Path) -> Result<()> {
    ensure_out_dir(out)?;
    let net = resolve_net(net_arg)?;
    cfg.validate()?;
    let init_params = match init {
        Some(path) => Some(ParamStore::<f32>::load(path)?),
        None => None,
    };
    cfg.save(&out.join("train-config.txt"))?;
    let augment = cfg.augment.then(ddcnet::train::AugmentConfig::default);
    let mut source = SynthSource::new(cfg.seed, cfg.size, cfg.max_disp, augment);
    let outcome = train(&net, &cfg, init_params, &mut source, Some(out))?;
    ddcnet::train::write_history_csv(&outcome.history, &out.join("history.csv"))?;
    for row in outcome.history.iter().filter(|r| r.eval_aee.is_some()) {
        println!(
            "step {:>6}  loss {:<9.5} lr {:<10.3e} eval_aee {:.5}",
            row.step,
            row.loss,
            row.lr,
            row.eval_aee.unwrap()
        );
    }
    let last = outcome.history.last();
    println!(
        "TRAIN net={} steps={} final_loss={} lr={:e} eval_aee={} checkpoint={}",
        net.name,
        outcome.steps_run,
        last.map(|r| format!("{:.6}", r.loss)).unwrap_or_default(),
        last.map(|r| r.lr).unwrap_or(cfg.lr),
        outcome
            .final_eval_aee
            .map(|a| format!("{a:.6}"))
            .unwrap_or_else(|| "none".into()),
        out.join("final.ckpt").display(),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct MetricAccum {
    rows: Vec<Vec<String>>,
    ee_sum: f64,
    outliers: u64,
    valid: u64,
}

impl MetricAccum {
    fn new() -> Self {
        MetricAccum {
            rows: Vec::new(),
            ee_sum: 0.0,
            outliers: 0,
            valid: 0,
        }
    }

    fn push(&mut self, name: &str, est: &FlowField, gt: &FlowField) -> Result<()> {
        let pair_aee = aee(est, gt)?;
        let pair_fl = fl_all(est, gt)?;
        let map = ddcnet::flow::endpoint_error_map(est, gt)?;
        let valid = map.valid.iter().filter(|&&v| v).count() as u64;
        self.ee_sum += pair_aee * valid as f64;
        self.outliers += (pair_fl * valid as f64).round() as u64;
        self.valid += valid;
        self.rows.push(vec![
            name.to_string(),
            format!("{pair_aee:.6}"),
            format!("{pair_fl:.6}"),
        ]);
        Ok(())
    }

    /// Pixel-weighted aggregates over all pairs.
    fn finish(mut self, out: &Path) -> Result<(f64, f64, usize)> {
        let mean_aee = self.ee_sum / self.valid as f64;
        let mean_fl = self.outliers as f64 / self.valid as f64;
        let pairs = self.rows.len();
        self.rows.push(vec![
            "mean".into(),
            format!("{mean_aee:.6}"),
            format!("{mean_fl:.6}"),
        ]);
        ddcnet::io::write_csv(&out.join("metrics.csv"), &["name", "aee", "fl_all"], &self.rows)?;
        Ok((mean_aee, mean_fl, pairs))
    }
}

fn cmd_eval_dirs(est_dir: &Path, gt_dir: &Path, out: &Path) -> Result<()> {
    ensure_out_dir(out)?;
    let mut gt_paths: Vec<PathBuf> = std::fs::read_dir(gt_dir)
        .map_err(|e| Error::io(gt_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "flo"))
        .collect();
    gt_paths.sort();
    if gt_paths.is_empty() {
        return Err(Error::usage(format!("no .flo files in {}", gt_dir.display())));
    }
    let mut accum = MetricAccum::new();
    for gt_path in &gt_paths {
        let name = gt_path.file_name().unwrap().to_string_lossy().into_owned();
        let est_path = est_dir.join(&name);
        if !est_path.is_file() {
            return Err(Error::usage(format!(
                "no estimate for {name} in {}",
                est_dir.display()
            )));
        }
        let gt = read_flo(gt_path)?;
        let est = read_flo(&est_path)?;
        accum.push(&name, &est, &gt)?;
    }
    let (mean_aee, mean_fl, pairs) = accum.finish(out)?;
    println!("wrote {}", out.join("metrics.csv").display());
    println!("EVAL pairs={pairs} aee={mean_aee:.6} fl_all={mean_fl:.6}");
    Ok(())
}

fn cmd_eval_ckpt(
    net_arg: &str,
    ckpt: &Path,
    seed: u64,
    samples: usize,
    size: usize,
    max_disp: usize,
    out: &Path,
) -> Result<()> {
    ensure_out_dir(out)?;
    let net = resolve_net(net_arg)?;
    let params = ParamStore::<f32>::load(ckpt)?;
    params.validate_for(&net)?;
    let mut rng = rand_seed(seed);
    let mut accum = MetricAccum::new();
    for k in 0..samples {
        let (f1, f2, gt) = synth_pair::<f32>(&mut rng, (size, size), max_disp)?;
        let (flow_out, _) = forward(&net, &params, &f1, &f2, false)?;
        let est = FlowField::from_output(&flow_out, 0)?;
        accum.push(&format!("sample-{k:03}"), &est, &gt)?;
    }
    let (mean_aee, mean_fl, pairs) = accum.finish(out)?;
    println!("wrote {}", out.join("metrics.csv").display());
    println!("EVAL pairs={pairs} aee={mean_aee:.6} fl_all={mean_fl:.6}");
    Ok(())
}

/// The library takes `impl Rng`; the CLI pins the same stream cipher the
/// training loop uses so seeds mean the same thing everywhere.
fn rand_seed(seed: u64) -> impl rand::Rng {
    use rand::SeedableRng as _;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// viz
// ---------------------------------------------------------------------------

fn cmd_viz(flo: &Path, max_mag: Option<f32>, out: &Path) -> Result<()> {
    ensure_out_dir(out)?;
    let field = read_flo(flo)?;
    let norm = match max_mag {
        Some(m) if m > 0.0 => m,
        Some(m) => {
            return Err(Error::usage(format!("--max-mag must be positive, got {m}")))
        }
        None => field.max_magnitude(),
    };
    let image = flow_to_color(&field, Some(norm));
    let stem = flo
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "flow".into());
    let path = out.join(format!("{stem}.ppm"));
    image.write_ppm(&path)?;
    let (h, w) = field.dims();
    println!("wrote {}", path.display());
    println!("VIZ file={} w={w} h={h} max_mag={norm:.4}", path.display());
    Ok(())
}
