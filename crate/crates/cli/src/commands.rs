//! Command implementations. Every command materializes a run directory
//! holding an exact invocation echo plus its numeric artifacts.

use serde::Serialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use flowgeo_core::dataset::{read_arrays, write_arrays};
use flowgeo_core::error::{Error, Result};
use flowgeo_core::flow::FlowModel;
use flowgeo_core::geometry::PullbackGeometry;
use flowgeo_core::inversion::{self, InvertOptions, RangeSource};
use flowgeo_core::metrics;
use flowgeo_core::rae::{Rae, SelectBy};
use flowgeo_core::tensor::Tensor;
use flowgeo_core::training::{self, write_loss_csv, TrainState};

use crate::config::{RunConfig, CONFIG_SCHEMA_VERSION};

/// Resolve the output directory: explicit flag, else `$FLOWGEO_OUT/<name>`,
/// else `./runs/<name>`.
pub fn resolve_out_dir(out: Option<&Path>, name: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var("FLOWGEO_OUT").unwrap_or_else(|_| "runs".to_string());
            Path::new(&root).join(name)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Echo of a non-training invocation, sufficient to replay the command.
#[derive(Serialize)]
struct InvocationEcho<'a, T: Serialize> {
    schema_version: &'a str,
    command: &'a str,
    seed: u64,
    args: &'a T,
}

fn echo_invocation<T: Serialize>(dir: &Path, command: &str, seed: u64, args: &T) -> Result<()> {
    write_json(&dir.join("invocation.json"), &InvocationEcho {
        schema_version: CONFIG_SCHEMA_VERSION,
        command,
        seed,
        args,
    })
}

// ── train ────────────────────────────────────────────────────────────

pub struct TrainArgs {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub dry_run: bool,
    /// `quick` truncates the iteration budget for smoke runs.
    pub tier: Tier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Quick,
    Full,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = &args.config;
    cfg.validate()?;
    if args.dry_run {
        println!("config ok: experiment `{}`, seed {}", cfg.experiment, cfg.seed);
        return Ok(());
    }
    std::fs::create_dir_all(&args.out_dir)?;
    write_json(&args.out_dir.join("config.json"), cfg)?;

    let (dataset, corruption) = cfg.build_data()?;
    let mut train_config = cfg.train_config(dataset.corrupted.rows())?;
    if args.tier == Tier::Quick {
        train_config.iterations = train_config.iterations.min(50);
    }
    let prior = cfg.build_flow();
    let posterior = cfg.build_posterior()?;
    let state = TrainState::new(&train_config, prior, posterior);

    let ckpt_path = args.out_dir.join("train_checkpoint.json");
    let flow_path = args.out_dir.join("flow.json");
    let tc = train_config.clone();
    let outcome = training::train(&train_config, &dataset, &corruption, state, |s| {
        s.save(&ckpt_path, &tc)?;
        s.prior.save(&flow_path)?;
        Ok(())
    })?;

    write_loss_csv(&args.out_dir.join("loss.csv"), &outcome.state.history)?;
    outcome.state.save(&ckpt_path, &train_config)?;
    outcome.state.prior.save(&flow_path)?;

    if let Some(reason) = &outcome.aborted {
        return Err(Error::numeric("train", reason.clone()));
    }
    println!(
        "trained {} steps; final loss {:.6}; artifacts in {}",
        outcome.state.step,
        outcome.state.history.last().map_or(f64::NAN, |r| r.total),
        args.out_dir.display()
    );
    Ok(())
}

// ── sample ───────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct SampleArgs {
    pub flow: PathBuf,
    pub count: usize,
    pub seed: u64,
    /// Emit a PGM grid for image-shaped data (`h x w` inferred square).
    pub pgm: bool,
}

pub fn cmd_sample(args: &SampleArgs, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    echo_invocation(out_dir, "sample", args.seed, args)?;
    let flow = FlowModel::load(&args.flow)?;
    let samples = if args.count == 0 {
        Tensor::zeros(&[0, flow.dim()])
    } else {
        flow.sample(args.count, args.seed)?
    };
    write_arrays(&out_dir.join("samples.json"), &[("samples", &samples)])?;
    if args.pgm && args.count > 0 {
        let side = (flow.dim() as f64).sqrt() as usize;
        if side * side == flow.dim() {
            write_pgm_grid(&out_dir.join("samples.pgm"), &samples, side, side)?;
        } else {
            eprintln!("note: dim {} is not square; skipping PGM grid", flow.dim());
        }
    }
    println!("wrote {} samples to {}", args.count, out_dir.display());
    Ok(())
}

/// P5 grayscale grid, one sample per tile, 1-px separators, values clamped
/// to [0, 1].
pub fn write_pgm_grid(path: &Path, samples: &Tensor, h: usize, w: usize) -> Result<()> {
    let n = samples.rows();
    let gw = n * w + n.saturating_sub(1);
    let mut img = vec![0u8; h * gw];
    for (k, row) in (0..n).map(|i| samples.row(i)).enumerate() {
        let x0 = k * (w + 1);
        for i in 0..h {
            for j in 0..w {
                let v = (row[i * w + j].clamp(0.0, 1.0) * 255.0).round() as u8;
                img[i * gw + x0 + j] = v;
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{gw} {h}\n255\n")?;
    f.write_all(&img)?;
    Ok(())
}

// ── rae ──────────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct RaeArgs {
    pub flow: PathBuf,
    pub seed: u64,
}

pub fn cmd_rae(cfg: &RunConfig, args: &RaeArgs, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    echo_invocation(out_dir, "rae", args.seed, args)?;
    let flow = FlowModel::load(&args.flow)?;
    let geometry = PullbackGeometry::new(flow);

    // Assemble the PCA batch: prior samples and/or the clean references.
    let mut rows: Vec<Vec<f64>> = Vec::new();
    if cfg.rae.prior_samples > 0 {
        let s = geometry.flow().sample(cfg.rae.prior_samples, args.seed)?;
        for i in 0..s.rows() {
            rows.push(s.row(i).to_vec());
        }
    }
    if cfg.rae.use_clean_refs {
        let (dataset, _) = cfg.build_data()?;
        for i in 0..dataset.clean_reference.rows() {
            rows.push(dataset.clean_reference.row(i).to_vec());
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("rae", "no samples configured (prior_samples / use_clean_refs)"));
    }
    let batch = Tensor::from_rows(&rows)?;
    let select = match (cfg.rae.latent_dim, cfg.rae.epsilon) {
        (Some(k), _) => SelectBy::LatentDim(k),
        (None, Some(e)) => SelectBy::Epsilon(e),
        _ => unreachable!("validated"),
    };
    let rae = Rae::build_from_samples(geometry, &batch, select)?;
    rae.save(&out_dir.join("rae.json"), &args.flow.display().to_string())?;
    println!(
        "built autoencoder: latent_dim {}, spectrum head {:.4e}, wrote {}",
        rae.latent_dim(),
        rae.spectrum()[0],
        out_dir.join("rae.json").display()
    );
    Ok(())
}

// ── geodesic ─────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct GeodesicArgs {
    pub flow: PathBuf,
    pub point_a: Vec<f64>,
    pub point_b: Vec<f64>,
    pub steps: usize,
}

pub fn cmd_geodesic(args: &GeodesicArgs, out_dir: &Path) -> Result<()> {
    if args.steps < 2 {
        return Err(Error::invalid("geodesic", "need at least 2 steps"));
    }
    std::fs::create_dir_all(out_dir)?;
    echo_invocation(out_dir, "geodesic", 0, args)?;
    let flow = FlowModel::load(&args.flow)?;
    let g = PullbackGeometry::new(flow);
    let path = out_dir.join("geodesic.csv");
    let mut f = std::fs::File::create(&path)?;
    let d = g.dim();
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((0..d).map(|i| format!("x{i}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for k in 0..args.steps {
        let t = k as f64 / (args.steps - 1) as f64;
        let pt = g.geodesic(&args.point_a, &args.point_b, t)?;
        let row: Vec<String> = std::iter::once(format!("{t:.17e}"))
            .chain(pt.iter().map(|v| format!("{v:.17e}")))
            .collect();
        writeln!(f, "{}", row.join(","))?;
    }
    println!("wrote {} geodesic rows to {}", args.steps, path.display());
    Ok(())
}

// ── invert ───────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct InvertArgs {
    pub flow: PathBuf,
    pub rae: PathBuf,
    pub measurement: PathBuf,
    pub alpha: f64,
    pub iters: usize,
    pub certificate: bool,
    pub seed: u64,
}

pub fn cmd_invert(cfg: &RunConfig, args: &InvertArgs, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    echo_invocation(out_dir, "invert", args.seed, args)?;
    let flow = FlowModel::load(&args.flow)?;
    let rae = Rae::load(&args.rae, flow)?;
    let corruption = cfg.build_corruption()?;
    let y = load_vector(&args.measurement)?;

    let res = inversion::invert(
        &rae,
        &corruption,
        &y,
        &InvertOptions {
            alpha: args.alpha,
            max_iters: args.iters,
            init: None,
            latent_truth: None,
            signal_truth: None,
        },
    )?;
    let x = Tensor::from_shape(1, res.x_hat.len(), res.x_hat.clone())?;
    let p = Tensor::from_shape(1, res.p_hat.len(), res.p_hat.clone())?;
    write_arrays(
        &out_dir.join("reconstruction.json"),
        &[("x_hat", &x), ("p_hat", &p)],
    )?;
    let mut f = std::fs::File::create(out_dir.join("invert_loss.csv"))?;
    writeln!(f, "iter,loss")?;
    for (i, l) in res.losses.iter().enumerate() {
        writeln!(f, "{i},{l:.17e}")?;
    }

    if args.certificate {
        let delta = inversion::check_rric(&rae, &corruption, 2000, args.seed)?;
        let cert = inversion::certificate(&rae, &corruption, args.alpha, delta, true)?;
        write_json(&out_dir.join("certificate.json"), &cert)?;
    }
    if let Some(reason) = res.aborted {
        return Err(Error::numeric("invert", reason));
    }
    println!(
        "inverted in {} iterations, final loss {:.6e}; artifacts in {}",
        args.iters,
        res.losses.last().unwrap_or(&f64::NAN),
        out_dir.display()
    );
    Ok(())
}

// ── check ────────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct CheckArgs {
    pub flow: PathBuf,
    pub rae: PathBuf,
    pub pairs: usize,
    pub quadruples: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Serialize)]
struct CheckReport {
    delta_hat_rric: f64,
    rip_lower: f64,
    rip_upper: f64,
    rip_delta_hat: f64,
    operator_norm: f64,
    certificate: flowgeo_core::inversion::ConvergenceCertificate,
}

pub fn cmd_check(cfg: &RunConfig, args: &CheckArgs, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    echo_invocation(out_dir, "check", args.seed, args)?;
    let flow = FlowModel::load(&args.flow)?;
    let rae = Rae::load(&args.rae, flow)?;
    let corruption = cfg.build_corruption()?;

    let rric = inversion::check_rric(&rae, &corruption, args.quadruples, args.seed)?;
    let rip = inversion::check_rip(
        RangeSource::Decoder(&rae),
        &corruption,
        args.pairs,
        args.seed.wrapping_add(1),
    )?;
    let cert = inversion::certificate(&rae, &corruption, args.alpha, rric, true)?;

    let mut f = std::fs::File::create(out_dir.join("rip_ratios.csv"))?;
    writeln!(f, "ratio")?;
    for r in &rip.ratios {
        writeln!(f, "{r:.17e}")?;
    }
    let report = CheckReport {
        delta_hat_rric: rric,
        rip_lower: rip.lower,
        rip_upper: rip.upper,
        rip_delta_hat: rip.delta_hat(),
        operator_norm: corruption.operator().operator_norm(),
        certificate: cert,
    };
    write_json(&out_dir.join("check_report.json"), &report)?;
    println!(
        "delta_hat (rric) = {rric:.6}; rip ratios in [{:.6}, {:.6}]; report in {}",
        rip.lower,
        rip.upper,
        out_dir.display()
    );
    Ok(())
}

// ── tv ───────────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct TvArgs {
    pub measurement: PathBuf,
    pub lambda: f64,
    /// Step size; when absent, `0.2 / ||A||^2`.
    pub alpha: Option<f64>,
    pub iters: usize,
}

pub fn cmd_tv(cfg: &RunConfig, args: &TvArgs, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    echo_invocation(out_dir, "tv", 0, args)?;
    let corruption = cfg.build_corruption()?;
    let y = load_vector(&args.measurement)?;
    let d = corruption.operator().input_dim();
    let side = (d as f64).sqrt() as usize;
    if side * side != d {
        return Err(Error::invalid("tv", format!("dim {d} is not an image")));
    }
    let alpha = args.alpha.unwrap_or_else(|| 0.2 / corruption.operator().gram_norm());
    let res = inversion::tv_reconstruct(
        &corruption,
        &y,
        args.lambda,
        alpha,
        args.iters,
        (side, side),
        None,
    )?;
    let x = Tensor::from_shape(1, res.x_hat.len(), res.x_hat.clone())?;
    write_arrays(&out_dir.join("tv_reconstruction.json"), &[("x_hat", &x)])?;
    let mut f = std::fs::File::create(out_dir.join("tv_loss.csv"))?;
    writeln!(f, "iter,loss")?;
    for (i, l) in res.losses.iter().enumerate() {
        writeln!(f, "{i},{l:.17e}")?;
    }
    println!("tv reconstruction done (alpha = {alpha:.4e}); artifacts in {}", out_dir.display());
    Ok(())
}

/// Load a single vector: either an array manifest (first array) or a bare
/// JSON number array.
pub fn load_vector(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(vals) = serde_json::from_str::<Vec<f64>>(&text) {
        return Ok(vals);
    }
    let arrays = read_arrays(path)?;
    arrays
        .into_iter()
        .next()
        .map(|(_, t)| t.data().to_vec())
        .ok_or_else(|| Error::Data {
            source_name: path.display().to_string(),
            offset: 0,
            msg: "no arrays in manifest".to_string(),
        })
}

/// Five-quantity recoverability report for a finished synthetic run.
#[derive(Serialize)]
pub struct VerifyArgs {
    pub flow: PathBuf,
    pub rae: PathBuf,
    pub samples: usize,
    pub seed: u64,
}

pub fn cmd_verify(cfg: &RunConfig, args: &VerifyArgs, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    echo_invocation(out_dir, "verify", args.seed, args)?;
    let flow = FlowModel::load(&args.flow)?;
    let rae = Rae::load(&args.rae, flow.clone())?;
    let (dataset, corruption) = cfg.build_data()?;
    let truth = dataset.ground_truth.ok_or_else(|| {
        Error::invalid("verify", "recoverability verification needs synthetic ground truth")
    })?;
    let report =
        metrics::verify_recoverability(&flow, &rae, &truth, &corruption, args.samples, args.seed)?;
    write_json(&out_dir.join("recoverability.json"), &report)?;
    println!(
        "omega_hat {:.4e}, delta_hat {:.4}, ||A|| {:.4}, bound {:?}, W1 {:.4e} => within: {:?}",
        report.omega_hat,
        report.delta_hat,
        report.operator_norm,
        report.bound,
        report.measured_w1,
        report.within_bound
    );
    Ok(())
}
