//! Command-line front-end: scenario simulation, the online and batch
//! solvers, the diagnostics pass, the lemma suites, and the chained
//! reproduction run. Exit code 0 means every enabled check passed.

use clap::{Args, Parser, Subcommand, ValueEnum};
use dyninv_core::error::{Error, Result};
use dyninv_core::harness::{
    build_scenario, config_toml, default_eit_config, default_linear_config, load_config,
    run_experiment, RunConfig, RunMode, Scenario, CSV_HEADER, EIT_CONTACT_IMPEDANCE,
};
use dyninv_core::lemmas::{conjugate_sum_nonconvex_injection, run_all_suites};
use dyninv_core::linop::LinearFrameOperator;
use dyninv_core::model::{
    alpha_schedule, generate_noise, MeasurementStream, NoiseSpec, ScenarioMode,
};
use dyninv_core::online::{run_online, FrameGeometry, FrameModel, OnlineConfig};
use dyninv_core::reg::{BoxConstraint, DiscreteGradient};
use dyninv_core::{batch, diag, eit};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dyninv",
    version,
    about = "Online regularisation for dynamic inverse problems: simulation, solvers, and verification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Linear,
    Eit,
}

#[derive(Args)]
struct CommonArgs {
    /// Forward model family; picks the matching desk-scale defaults.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Total frame count; the motion ramp scales proportionally (70%).
    #[arg(long)]
    frames: Option<usize>,
    /// Noise level delta; repeat the flag for several levels.
    #[arg(long = "noise")]
    noise: Vec<f64>,
    /// Seed for data corruption (per-level streams derive from it).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, default_value = "dyninv-out")]
    out: PathBuf,
    /// TOML run configuration; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the scenario and write ground truth plus measurement streams.
    Simulate(CommonArgs),
    /// Run the one-step-per-frame online solver at each noise level.
    SolveOnline(CommonArgs),
    /// Run the whole-horizon batch oracle at each noise level (linear mode).
    SolveBatch(CommonArgs),
    /// Full verification pass: online run, batch oracle, inequality checks.
    Diagnose(CommonArgs),
    /// Run the convex-analysis lemma suites on seeded random instances.
    VerifyLemmas {
        #[arg(long)]
        seed: Option<u64>,
        /// Instances per suite.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Also verify that an injected nonconvex factor is detected.
        #[arg(long)]
        self_test: bool,
    },
    /// Chain everything: lemma suites, then the linear and EIT experiments
    /// with the noise-sweep error curves.
    ReproduceFig2 {
        #[arg(long, default_value = "dyninv-out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.config, args.mode) {
        (Some(path), _) => load_config(path)?,
        (None, Some(ModeArg::Eit)) => default_eit_config(),
        (None, _) => default_linear_config(),
    };
    if let Some(mode) = args.mode {
        let want = match mode {
            ModeArg::Linear => RunMode::Linear,
            ModeArg::Eit => RunMode::Eit,
        };
        if args.config.is_some() && cfg.mode != want {
            return Err(Error::InvalidInput(
                "--mode disagrees with the config file; change one of them".into(),
            ));
        }
        cfg.mode = want;
    }
    if let Some(frames) = args.frames {
        cfg.scenario.total_frames = frames;
        cfg.scenario.ramp_frames = (frames * 7) / 10;
    }
    if !args.noise.is_empty() {
        cfg.deltas = args.noise.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Exact measurement frames of the scenario under the configured model.
fn exact_measurements(cfg: &RunConfig, scenario: &Scenario) -> Result<Vec<Vec<f64>>> {
    match cfg.mode {
        RunMode::Linear => {
            let &ScenarioMode::Grid { nx, ny } = &cfg.scenario.mode else {
                return Err(Error::InvalidInput("linear mode needs a grid scenario".into()));
            };
            let op = LinearFrameOperator::gaussian_blur(nx, ny)?;
            scenario.truth.frames.iter().map(|f| op.apply(f)).collect()
        }
        RunMode::Eit => {
            let mesh = scenario
                .mesh
                .clone()
                .ok_or_else(|| Error::InvalidInput("disk scenario did not produce a mesh".into()))?;
            let sys = eit::CemSystem::with_uniform_impedance(mesh, EIT_CONTACT_IMPEDANCE)?;
            scenario
                .truth
                .frames
                .iter()
                .map(|f| FrameModel::Eit(&sys).apply_measure(f))
                .collect()
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_simulate(args: &CommonArgs) -> Result<bool> {
    let cfg = resolve_config(args)?;
    std::fs::create_dir_all(&args.out)?;
    let scenario = build_scenario(&cfg.scenario)?;

    let mut truth_csv = String::from("frame,index,value\n");
    for (k, frame) in scenario.truth.frames.iter().enumerate() {
        for (i, v) in frame.iter().enumerate() {
            let _ = writeln!(truth_csv, "{k},{i},{v}");
        }
    }
    write_file(&args.out.join("truth.csv"), &truth_csv)?;

    let exact = exact_measurements(&cfg, &scenario)?;
    let stream = MeasurementStream::unit_precision(exact)?;
    for &delta in &cfg.deltas {
        let spec = NoiseSpec::with_defaults(delta, cfg.seed)?;
        let noisy = generate_noise(&stream, &spec)?;
        let mut csv = String::from("frame,index,exact,corrupted\n");
        for k in 0..noisy.n_frames() {
            for (i, (e, c)) in noisy.exact[k].iter().zip(&noisy.corrupted[k]).enumerate() {
                let _ = writeln!(csv, "{k},{i},{e},{c}");
            }
        }
        write_file(&args.out.join(format!("measurements_delta_{delta}.csv")), &csv)?;
    }
    write_file(&args.out.join("config.toml"), &config_toml(&cfg)?)?;
    println!(
        "simulated {} frames ({} per-level streams)",
        cfg.scenario.total_frames,
        cfg.deltas.len()
    );
    Ok(true)
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

fn cmd_solve_online(args: &CommonArgs) -> Result<bool> {
    let cfg = resolve_config(args)?;
    std::fs::create_dir_all(&args.out)?;
    let scenario = build_scenario(&cfg.scenario)?;
    let exact = exact_measurements(&cfg, &scenario)?;
    let stream = MeasurementStream::unit_precision(exact)?;

    enum Built {
        Linear(LinearFrameOperator, DiscreteGradient),
        Eit(eit::CemSystem, DiscreteGradient),
    }
    let built = match cfg.mode {
        RunMode::Linear => {
            let &ScenarioMode::Grid { nx, ny } = &cfg.scenario.mode else { unreachable!() };
            let op = LinearFrameOperator::gaussian_blur(nx, ny)?;
            let grad = DiscreteGradient::grid(nx, ny)?;
            Built::Linear(op, grad)
        }
        RunMode::Eit => {
            let mesh = scenario.mesh.clone().expect("disk scenario carries a mesh");
            let sys = eit::CemSystem::with_uniform_impedance(mesh, EIT_CONTACT_IMPEDANCE)?;
            let grad = DiscreteGradient::mesh_p1(sys.mesh().coords(), sys.mesh().triangles())?;
            Built::Eit(sys, grad)
        }
    };
    let box_c = BoxConstraint::new(cfg.scenario.box_lo, cfg.scenario.box_hi)?;

    for &delta in &cfg.deltas {
        let spec = NoiseSpec::with_defaults(delta, cfg.seed)?;
        let noisy = generate_noise(&stream, &spec)?;
        let alpha = alpha_schedule(delta)?;
        let (model, grad, geometry, n_states): (FrameModel, &DiscreteGradient, FrameGeometry, usize) =
            match &built {
                Built::Linear(op, grad) => {
                    let &ScenarioMode::Grid { nx, ny } = &cfg.scenario.mode else { unreachable!() };
                    (FrameModel::Linear(op), grad, FrameGeometry::Grid { nx, ny }, op.input_dim())
                }
                Built::Eit(sys, grad) => (
                    FrameModel::Eit(sys),
                    grad,
                    FrameGeometry::Mesh(sys.mesh()),
                    sys.mesh().n_nodes(),
                ),
            };
        let ocfg = OnlineConfig {
            model,
            grad,
            geometry,
            box_c,
            alpha,
            tau: cfg.tau,
            s: cfg.s,
            predictor: cfg.predictor,
            x0: vec![cfg.scenario.background; n_states],
            motion_hints: match cfg.mode {
                RunMode::Linear => Some(&scenario.motion),
                RunMode::Eit => None,
            },
        };
        let run = run_online(&ocfg, &noisy)?;
        let curve = diag::averaged_sq_error(&run.trajectory, &scenario.truth)?;

        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        for (k, rec) in run.records.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{k},{delta},{alpha},{},NaN,{},{},NaN,NaN,NaN,NA",
                fmt_cell(curve[k]),
                fmt_cell(rec.data_fit_pred),
                fmt_cell(rec.reg_value),
            );
        }
        write_file(&args.out.join(format!("online_delta_{delta}.csv")), &csv)?;
        println!(
            "delta {delta}: alpha {alpha}, steps tau {} s {}{}, terminal error {}",
            run.steps.tau,
            run.steps.s,
            if run.steps.rescaled { " (rescaled)" } else { "" },
            curve.last().copied().unwrap_or(f64::NAN),
        );
    }
    Ok(true)
}

fn cmd_solve_batch(args: &CommonArgs) -> Result<bool> {
    let cfg = resolve_config(args)?;
    if cfg.mode != RunMode::Linear {
        return Err(Error::Unsupported(
            "the batch oracle needs the linear model; EIT runs are online-only".into(),
        ));
    }
    std::fs::create_dir_all(&args.out)?;
    let scenario = build_scenario(&cfg.scenario)?;
    let &ScenarioMode::Grid { nx, ny } = &cfg.scenario.mode else { unreachable!() };
    let op = LinearFrameOperator::gaussian_blur(nx, ny)?;
    let grad = DiscreteGradient::grid(nx, ny)?;
    let box_c = BoxConstraint::new(cfg.scenario.box_lo, cfg.scenario.box_hi)?;
    let exact: Vec<Vec<f64>> =
        scenario.truth.frames.iter().map(|f| op.apply(f)).collect::<Result<_>>()?;
    let stream = MeasurementStream::unit_precision(exact)?;

    for &delta in &cfg.deltas {
        let spec = NoiseSpec::with_defaults(delta, cfg.seed)?;
        let noisy = generate_noise(&stream, &spec)?;
        let alpha = alpha_schedule(delta)?;
        let problem = batch::BatchProblem {
            model: FrameModel::Linear(&op),
            grad: &grad,
            box_c,
            alpha,
            data: &noisy.corrupted,
            precision: &noisy.precision,
            tolerance: cfg.oracle_tolerance,
            max_iters: 2_000_000,
            steps_override: None,
        };
        let sol = batch::solve_batch(&problem)?;
        let mut csv = String::from("frame,delta,alpha,objective\n");
        let mut total = 0.0;
        for (k, frame) in sol.trajectory.frames.iter().enumerate() {
            let obj = problem.frame_objective(k, frame)?;
            total += obj;
            let _ = writeln!(csv, "{k},{delta},{alpha},{obj}");
        }
        write_file(&args.out.join(format!("batch_delta_{delta}.csv")), &csv)?;
        println!("delta {delta}: alpha {alpha}, cumulative objective {total}");
    }
    Ok(true)
}

fn cmd_diagnose(args: &CommonArgs) -> Result<bool> {
    let cfg = resolve_config(args)?;
    let artifacts = run_experiment(&cfg, &args.out)?;
    for art in &artifacts.per_delta {
        println!("wrote {}", art.csv_path.display());
        println!("wrote {}", art.verdict_path.display());
        for v in &art.verdicts {
            println!(
                "delta {}: {} over {} frames, {} violations (worst margin {:.3e})",
                art.delta, v.name, v.frames, v.violations, v.worst_margin
            );
        }
    }
    println!("wrote {}", artifacts.svg_path.display());
    println!("wrote {}", artifacts.summary_path.display());
    if let Some(limits) = &artifacts.limits {
        println!(
            "limit trends decreasing: {} {} {}",
            limits.decreasing[0], limits.decreasing[1], limits.decreasing[2]
        );
    }
    println!("all_pass: {}", artifacts.all_pass);
    Ok(artifacts.all_pass)
}

fn cmd_verify_lemmas(seed: Option<u64>, instances: usize, self_test: bool) -> Result<bool> {
    let reports = run_all_suites(seed.unwrap_or(42), instances)?;
    let mut all = true;
    for r in &reports {
        println!("{}", r.line());
        if let Some(dump) = &r.counterexample {
            println!("  counterexample: {dump}");
        }
        all &= r.passed();
    }
    if self_test {
        let injected = conjugate_sum_nonconvex_injection()?;
        let detected = !injected.passed();
        println!(
            "counterexample detection: {}",
            if detected { "ok (injected nonconvex factor flagged)" } else { "MISSED" }
        );
        all &= detected;
    }
    Ok(all)
}

fn cmd_reproduce_fig2(out: &Path, seed: Option<u64>) -> Result<bool> {
    let mut all = cmd_verify_lemmas(seed, 100, true)?;
    for (label, mut cfg) in [
        ("linear", default_linear_config()),
        ("eit", default_eit_config()),
    ] {
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        let dir = out.join(label);
        println!("running {label} experiment into {}", dir.display());
        let artifacts = run_experiment(&cfg, &dir)?;
        let mut terminals = Vec::new();
        for art in &artifacts.per_delta {
            let terminal = art.avg_curve.last().copied().unwrap_or(f64::NAN);
            println!("{label} delta {}: terminal error {terminal}", art.delta);
            terminals.push(terminal);
        }
        let decreasing = terminals.windows(2).all(|w| w[1] < w[0]);
        println!("{label} terminal errors strictly decreasing: {decreasing}");
        println!("{label} all checks pass: {}", artifacts.all_pass);
        println!("wrote {}", artifacts.svg_path.display());
        all &= artifacts.all_pass && decreasing;
    }
    Ok(all)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::SolveOnline(args) => cmd_solve_online(args),
        Cmd::SolveBatch(args) => cmd_solve_batch(args),
        Cmd::Diagnose(args) => cmd_diagnose(args),
        Cmd::VerifyLemmas { seed, instances, self_test } => {
            cmd_verify_lemmas(*seed, *instances, *self_test)
        }
        Cmd::ReproduceFig2 { out, seed } => cmd_reproduce_fig2(out, *seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
