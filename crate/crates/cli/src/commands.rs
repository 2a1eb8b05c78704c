use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use transport_hmc::benchmark::{sample_with_moments, train_with_moments, BiasProtocol, MomentTrace};
use transport_hmc::diagnostics::DiagnosticsReport;
use transport_hmc::flows::{FrozenMap, MapCheckpoint, TransportMap};
use transport_hmc::hmc::{
    finite_grad, leapfrog, pushforward, run_chains, standard_normal_init, ChainBatch, HmcConfig, HmcError, WarpedTarget,
};
use transport_hmc::targets::Target;
use transport_hmc::tuner::{tune, TuneResult, TunerError};
use transport_hmc::vi::{smoothed_elbo, train_map, TraceRow, TrainResult, ViError};

use crate::config::RunConfig;
use crate::output::{write_csv, Layout, Metadata};
use crate::CliError;

fn stem(cfg: &RunConfig, map: &TransportMap) -> String {
    format!("{}-{}", cfg.target.name, map.spec().kind.label())
}

fn elbo_csv(trace: &[TraceRow]) -> String {
    let mut out = format!("{}\n", TraceRow::CSV_HEADER);
    for row in trace {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn hmc_error(e: HmcError) -> CliError {
    match e {
        HmcError::Config(_) | HmcError::InitDimension { .. } => CliError::Usage(e.to_string()),
        HmcError::Io(_) => CliError::Usage(e.to_string()),
        _ => numerical(e),
    }
}

fn save_checkpoint(layout: &Layout, stem: &str, map: &TransportMap, seed: u64, params: Vec<f64>) -> Result<PathBuf, CliError> {
    let path = layout.checkpoint(stem);
    MapCheckpoint::new(map, seed, params).save(&path).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

/// The configured map with its trained parameters. An identity map needs no
/// checkpoint.
fn load_map(cfg: &RunConfig, layout: &Layout, checkpoint: Option<&Path>, dim: usize) -> Result<(TransportMap, Vec<f64>), CliError> {
    let fresh = cfg.build_map(&cfg.map.kind, dim)?;
    if checkpoint.is_none() && fresh.num_params() == 0 {
        return Ok((fresh, Vec::new()));
    }
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| layout.checkpoint(&stem(cfg, &fresh)));
    if !path.exists() {
        return Err(CliError::Usage(format!("no checkpoint at {}; run `thmc train` first or pass --checkpoint", path.display())));
    }
    let ck = MapCheckpoint::load(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let (map, params) = ck.into_map().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if map.dim() != dim {
        return Err(CliError::Usage(format!("checkpoint {} has dimension {}, target has {dim}", path.display(), map.dim())));
    }
    Ok((map, params))
}

fn freeze(map: &TransportMap, params: &[f64]) -> Result<FrozenMap, CliError> {
    map.freeze(params).map_err(|e| CliError::Usage(e.to_string()))
}

fn write_trace_csv(layout: &Layout, stem: &str, meta: &Metadata, result: &TuneResult) -> Result<(), CliError> {
    let best = result.best();
    let meta = meta.with("best_trial", best.trial).with("step_size", best.step_size).with("num_leapfrog", best.num_leapfrog);
    write_csv(&layout.trace(stem, "tune"), &meta, &result.csv_body())
}

/// `(ε, L)` from the config, or from a tuning run on `target` when either
/// is unset.
fn resolve_step(cfg: &RunConfig, target: &dyn Target, layout: &Layout, stem: &str, meta: &Metadata) -> Result<(f64, usize), CliError> {
    if let (Some(eps), Some(l)) = (cfg.hmc.step_size, cfg.hmc.num_leapfrog) {
        return Ok((eps, l));
    }
    let result = run_tuner(cfg, target, layout, stem, meta)?;
    Ok((result.step_size, result.num_leapfrog))
}

fn run_tuner(cfg: &RunConfig, target: &dyn Target, layout: &Layout, stem: &str, meta: &Metadata) -> Result<TuneResult, CliError> {
    let tc = cfg.tuner_config();
    log::info!("tuning {stem}: {} pilots of {} chains x {} steps", tc.budget, tc.pilot_chains, tc.pilot_steps);
    match tune(target, &tc) {
        Ok(result) => {
            write_trace_csv(layout, stem, meta, &result)?;
            log::info!("tuned {stem}: step_size={} num_leapfrog={}", result.step_size, result.num_leapfrog);
            Ok(result)
        }
        Err(TunerError::AllDegenerate { trace }) => {
            let partial = TuneResult { step_size: f64::NAN, num_leapfrog: 0, trace };
            write_csv(&layout.trace(stem, "tune"), meta, &partial.csv_body())?;
            Err(numerical("every pilot run was degenerate"))
        }
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

fn write_chains(layout: &Layout, stem: &str, meta: &Metadata, theta: &ChainBatch) -> Result<(), CliError> {
    let path = layout.chains(stem, "bin");
    let file = File::create(&path).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    theta.write_dump(BufWriter::new(file)).map_err(hmc_error)?;
    log::info!("wrote {}", path.display());

    // Two-component projection of the kept draws, for scatter plots.
    let mut body = String::from("chain,draw,theta_0,theta_1\n");
    for c in 0..theta.num_chains {
        for t in theta.kept_range() {
            let x = theta.draw(c, t);
            let _ = writeln!(body, "{c},{t},{},{}", x[0], x.get(1).copied().unwrap_or(0.0));
        }
    }
    write_csv(&layout.chains(stem, "csv"), meta, &body)
}

fn write_report(layout: &Layout, stem: &str, meta: &Metadata, report: &DiagnosticsReport, hmc: &HmcConfig) -> Result<(), CliError> {
    let mut meta = meta.with("step_size", hmc.step_size).with("num_leapfrog", hmc.num_leapfrog);
    for (k, v) in report.summary() {
        meta = meta.with(k, v);
    }
    write_csv(&layout.report(stem), &meta, &report.csv_body())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let layout = Layout::create(&cfg.out)?;
    let target = cfg.build_target()?;
    let map = cfg.build_map(&cfg.map.kind, target.dim())?;
    let stem = stem(cfg, &map);
    let meta = Metadata::new("train", cfg).with("map", map.spec().kind.label());
    let tc = cfg.train_config();
    log::info!("training {stem}: {} steps, batch {}", tc.steps, tc.batch_size);
    match train_map(&map, target.as_ref(), map.init_params(cfg.map.seed), &tc) {
        Ok(res) => {
            write_csv(&layout.trace(&stem, "elbo"), &meta, &elbo_csv(&res.trace))?;
            if let (Some(first), Some(_)) = (res.trace.first(), res.trace.last()) {
                log::info!("elbo {:.4} -> {:.4} in {:.1}s", first.elbo, smoothed_elbo(&res.trace, 50), res.elapsed.as_secs_f64());
            }
            save_checkpoint(&layout, &stem, &map, cfg.map.seed, res.params)?;
            Ok(())
        }
        Err(ViError::TrainingDiverged { step, trace, source }) => {
            write_csv(&layout.trace(&stem, "elbo"), &meta.with("diverged_at_step", step), &elbo_csv(&trace))?;
            Err(numerical(format!("training diverged at step {step}: {source}")))
        }
        Err(e) => Err(numerical(e)),
    }
}

pub fn tune_command(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let layout = Layout::create(&cfg.out)?;
    let target = cfg.build_target()?;
    let (map, params) = load_map(cfg, &layout, checkpoint, target.dim())?;
    let stem = stem(cfg, &map);
    let warped = WarpedTarget::new(freeze(&map, &params)?, target.as_ref());
    let meta = Metadata::new("tune", cfg).with("map", map.spec().kind.label());
    let result = run_tuner(cfg, &warped, &layout, &stem, &meta)?;
    println!("step_size={} num_leapfrog={}", result.step_size, result.num_leapfrog);
    Ok(())
}

pub fn sample(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let layout = Layout::create(&cfg.out)?;
    let target = cfg.build_target()?;
    let (map, params) = load_map(cfg, &layout, checkpoint, target.dim())?;
    let stem = stem(cfg, &map);
    let frozen = freeze(&map, &params)?;
    let warped = WarpedTarget::new(frozen.clone(), target.as_ref());
    let meta = Metadata::new("sample", cfg).with("map", map.spec().kind.label());
    let (step_size, num_leapfrog) = resolve_step(cfg, &warped, &layout, &stem, &meta)?;
    let hmc = HmcConfig { step_size, num_leapfrog, num_chains: cfg.num_chains(), num_steps: cfg.num_steps(), seed: cfg.seed };
    log::info!("sampling {stem}: {} chains x {} steps, eps={step_size} L={num_leapfrog}", hmc.num_chains, hmc.num_steps);
    let start = Instant::now();
    let batch = run_chains(&hmc, &warped, standard_normal_init(map.dim())).map_err(hmc_error)?;
    let sample_time = start.elapsed();
    let theta = pushforward(&frozen, &batch);
    drop(batch);
    let report = DiagnosticsReport::from_batch(&theta, sample_time, Duration::ZERO).map_err(numerical)?;
    log::info!("max rhat {:.4}, min ess/grad {:.3e}", report.max_rhat, report.min_ess_per_grad);
    write_chains(&layout, &stem, &meta, &theta)?;
    write_report(&layout, &stem, &meta, &report, &hmc)
}

struct BenchmarkEntry {
    stem: String,
    frozen: FrozenMap,
    hmc: HmcConfig,
    trace: MomentTrace,
    final_elbo: Option<f64>,
}

pub fn benchmark(cfg: &RunConfig) -> Result<(), CliError> {
    let layout = Layout::create(&cfg.out)?;
    let target = cfg.build_target()?;
    let dim = target.dim();
    let num_chains = cfg.num_chains();
    let protocol = BiasProtocol {
        variational_samples: 8 * num_chains,
        train_every: cfg.benchmark.train_every,
        sample_every: cfg.benchmark.sample_every,
        seed: cfg.seed,
    };
    let mut entries = Vec::new();
    for kind in &cfg.benchmark.maps {
        let map = cfg.build_map(kind, dim)?;
        let stem = stem(cfg, &map);
        let meta = Metadata::new("benchmark", cfg).with("map", map.spec().kind.label());
        let (params, mut trace, train_time, final_elbo) = if map.num_params() == 0 {
            (Vec::new(), MomentTrace::default(), Duration::ZERO, None)
        } else {
            log::info!("training {stem}");
            let (res, trace): (TrainResult, MomentTrace) =
                match train_with_moments(&map, target.as_ref(), map.init_params(cfg.map.seed), &cfg.train_config(), &protocol) {
                    Ok(ok) => ok,
                    Err(e) => return Err(numerical(format!("{stem}: {e}"))),
                };
            write_csv(&layout.trace(&stem, "elbo"), &meta, &elbo_csv(&res.trace))?;
            let elbo = smoothed_elbo(&res.trace, 50);
            save_checkpoint(&layout, &stem, &map, cfg.map.seed, res.params.clone())?;
            (res.params, trace, res.elapsed, Some(elbo))
        };
        let frozen = freeze(&map, &params)?;
        let warped = WarpedTarget::new(frozen.clone(), target.as_ref());
        let (step_size, num_leapfrog) = resolve_step(cfg, &warped, &layout, &stem, &meta)?;
        let hmc = HmcConfig { step_size, num_leapfrog, num_chains, num_steps: cfg.num_steps(), seed: cfg.seed };
        log::info!("sampling {stem}: eps={step_size} L={num_leapfrog}");
        let run = sample_with_moments(&frozen, target.as_ref(), &hmc, &protocol, train_time, &mut trace)
            .map_err(|e| numerical(format!("{stem}: {e}")))?;
        let theta = pushforward(&frozen, &run.batch);
        drop(run.batch);
        let report = DiagnosticsReport::from_batch(&theta, run.sampling_time, train_time).map_err(numerical)?;
        write_report(&layout, &stem, &meta, &report, &hmc)?;
        write_chains(&layout, &stem, &meta, &theta)?;
        entries.push(BenchmarkEntry { stem, frozen, hmc, trace, final_elbo });
    }

    let (truth, reference_based) = match target.true_second_moments() {
        Some(t) => (t.to_vec(), false),
        None => (reference_moments(cfg, target.as_ref(), &entries)?, true),
    };
    for e in &entries {
        let curve = e.trace.bias_curve(&truth, reference_based).map_err(numerical)?;
        let mut meta =
            Metadata::new("benchmark", cfg).with("map", &e.stem).with("reference_based", reference_based).with("chains", e.hmc.num_chains);
        if let Some(t) = curve.phase_boundary() {
            meta = meta.with("phase_boundary_t", t);
        }
        write_csv(&layout.trace(&e.stem, "bias"), &meta, &curve.csv_body())?;
    }
    Ok(())
}

/// Second moments from a long run of the best-fitting map, for targets
/// without analytic moments.
fn reference_moments(cfg: &RunConfig, target: &dyn Target, entries: &[BenchmarkEntry]) -> Result<Vec<f64>, CliError> {
    let best = entries
        .iter()
        .max_by(|a, b| a.final_elbo.unwrap_or(f64::NEG_INFINITY).total_cmp(&b.final_elbo.unwrap_or(f64::NEG_INFINITY)))
        .ok_or_else(|| CliError::Usage("benchmark needs at least one map".into()))?;
    let hmc = HmcConfig {
        num_chains: cfg.benchmark.reference_chains,
        num_steps: cfg.benchmark.reference_steps,
        seed: cfg.seed.wrapping_add(0x5eed),
        ..best.hmc.clone()
    };
    log::info!("reference run with {}: {} chains x {} steps", best.stem, hmc.num_chains, hmc.num_steps);
    let warped = WarpedTarget::new(best.frozen.clone(), target);
    let batch = run_chains(&hmc, &warped, standard_normal_init(target.dim())).map_err(hmc_error)?;
    let theta = pushforward(&best.frozen, &batch);
    Ok(theta.second_moments(theta.kept_range()))
}

pub fn trajectory(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let layout = Layout::create(&cfg.out)?;
    let target = cfg.build_target()?;
    let dim = target.dim();
    let (map, params) = load_map(cfg, &layout, checkpoint, dim)?;
    let stem = stem(cfg, &map);
    let frozen = freeze(&map, &params)?;
    let tc = &cfg.trajectory;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |given: &[f64], what: &str| -> Result<Vec<f64>, CliError> {
        match given.len() {
            0 => Ok((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()),
            n if n == dim => Ok(given.to_vec()),
            n => Err(CliError::Usage(format!("trajectory.{what} has {n} entries, target dimension is {dim}"))),
        }
    };
    let z0 = draw(&tc.start, "start")?;
    let m0 = draw(&tc.momentum, "momentum")?;
    let (theta0, _) = frozen.forward(&z0);

    let start_state = |t: &dyn Target, x: &[f64]| finite_grad(t, x).ok_or_else(|| numerical("non-finite density at the trajectory start"));
    let (lp, g) = start_state(target.as_ref(), &theta0)?;
    let mut raw = Vec::new();
    leapfrog(&theta0, &m0, lp, &g, tc.step_size, tc.num_leapfrog, |x| finite_grad(target.as_ref(), x), Some(&mut raw));

    let warped = WarpedTarget::new(frozen.clone(), target.as_ref());
    let (lp, g) = start_state(&warped, &z0)?;
    let mut zpath = Vec::new();
    leapfrog(&z0, &m0, lp, &g, tc.step_size, tc.num_leapfrog, |x| finite_grad(&warped, x), Some(&mut zpath));

    let mut body = String::from("sampler,step");
    for d in 0..dim {
        let _ = write!(body, ",theta_{d}");
    }
    body.push('\n');
    let mut rows = |name: &str, path: &[Vec<f64>]| {
        for (i, x) in path.iter().enumerate() {
            let _ = write!(body, "{name},{i}");
            for v in x {
                let _ = write!(body, ",{v}");
            }
            body.push('\n');
        }
    };
    rows("hmc", &raw);
    let pushed: Vec<Vec<f64>> = zpath.iter().map(|z| frozen.forward(z).0).collect();
    rows("neutra", &pushed);
    let meta = Metadata::new("trajectory", cfg)
        .with("map", map.spec().kind.label())
        .with("step_size", tc.step_size)
        .with("num_leapfrog", tc.num_leapfrog)
        .with("hmc_rows", raw.len())
        .with("neutra_rows", pushed.len());
    if raw.len() < tc.num_leapfrog + 1 || pushed.len() < tc.num_leapfrog + 1 {
        log::warn!("a trajectory diverged before {} steps", tc.num_leapfrog);
    }
    write_csv(&layout.trace(&stem, "trajectory"), &meta, &body)
}
