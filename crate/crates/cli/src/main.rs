use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use floorref::experiment::{
    angular_order_spearman, cluster_metrics, cluster_metrics_for, clusters_svg, fit_circle,
    measurements_from_csv, measurements_to_csv, report_csv, run_experiment, ClusterReport,
    ExperimentPlan, MarkMeasurement,
};
use floorref::geometry::FrameId;
use floorref::io::{
    matrix_rows, parse_json, GroundTruth, InputHash, ResultFile, ResultProvenance, SessionFile,
    WorldConfig,
};
use floorref::referencing::{compute_rob_h_cam, reversal_average, ReferencingResult};
use floorref::sim::{
    apply_result_faults, calibration_trials, simulate_referencing_session, trial_rng, FaultRegistry,
};
use floorref::{Error, ErrorClass};
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

const STAGE_SIMULATE: &str = "simulate_referencing_session";

#[derive(Parser)]
#[command(
    name = "floorref",
    version,
    about = "Camera-to-robot referencing with a laser tracker"
)]
struct Cli {
    /// Tolerate unknown keys in input files.
    #[arg(long, global = true)]
    lenient: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a referencing session from a world configuration.
    Simulate {
        world: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the session with reversed robot heading here.
        #[arg(long)]
        reversal: Option<PathBuf>,
        /// Run this many simulate-and-calibrate trials and print error statistics.
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// Compute rob_H_cam from a session file.
    Calibrate {
        session: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Second session with reversed heading; the two runs are averaged.
        #[arg(long)]
        reversal: Option<PathBuf>,
    },
    /// Run the eight-direction mark experiment.
    Experiment {
        world: PathBuf,
        result: PathBuf,
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the plan seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cluster metrics over an existing measurement CSV.
    Metrics {
        measurements: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Infeasible => 3,
        ErrorClass::Degenerate => 4,
        ErrorClass::Inconsistent => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLOORREF_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
                Some(core) => exit_code(core.class()),
                None if e.chain().any(|c| c.is::<std::io::Error>()) => 2,
                None => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let lenient = cli.lenient;
    match cli.command {
        Command::Simulate {
            world,
            seed,
            out,
            reversal,
            trials,
        } => simulate(&world, seed, &out, reversal.as_deref(), trials, lenient),
        Command::Calibrate {
            session,
            out,
            reversal,
        } => calibrate(&session, &out, reversal.as_deref(), lenient),
        Command::Experiment {
            world,
            result,
            plan,
            out,
            seed,
        } => experiment(&world, &result, &plan, &out, seed, lenient),
        Command::Metrics { measurements, out } => metrics(&measurements, out.as_deref()),
    }
}

struct Input {
    text: String,
    hash: InputHash,
}

fn read_input(path: &Path) -> Result<Input> {
    let text = fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    let hash = InputHash {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(text.as_bytes())),
    };
    Ok(Input { text, hash })
}

fn parse<T: serde::de::DeserializeOwned>(input: &Input, lenient: bool) -> Result<T> {
    parse_json(&input.text, lenient).with_context(|| format!("parsing {}", input.hash.path))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    fs::write(path, text)
        .map_err(Error::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let k = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

fn simulate(
    world_path: &Path,
    seed: Option<u64>,
    out: &Path,
    reversal: Option<&Path>,
    trials: usize,
    lenient: bool,
) -> Result<()> {
    let input = read_input(world_path)?;
    let mut cfg: WorldConfig = parse(&input, lenient)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let resolved = cfg.resolve(&FaultRegistry::builtin())?;
    let world = &resolved.world;
    let truth = GroundTruth {
        rob_h_cam: matrix_rows(&world.h_rob_cam),
        seed: cfg.seed,
        faults: cfg.faults.iter().map(|f| f.name.clone()).collect(),
    };

    let runs = [(Some(out), resolved.placements, 0u64)]
        .into_iter()
        .chain(reversal.map(|p| (Some(p), resolved.reversed_placements, 1)));
    for (path, (p0, p1), stream) in runs {
        let session = simulate_referencing_session(
            world,
            &resolved.noise,
            &p0,
            &p1,
            &mut trial_rng(cfg.seed, stream),
        )
        .map_err(|e| e.in_stage(STAGE_SIMULATE))?;
        let file = SessionFile::from_session(&session, Some(truth.clone()));
        if let Some(path) = path {
            write(path, &to_json(&file)?)?;
            info!("session written to {}", path.display());
        }
    }

    if trials > 1 {
        let (p0, p1) = &resolved.placements;
        let errors = calibration_trials(world, &resolved.noise, (p0, p1), cfg.seed, trials)?;
        let mut trans: Vec<f64> = errors.iter().map(|e| e.translation_mm).collect();
        let mut rot: Vec<f64> = errors.iter().map(|e| e.rotation_rad.to_degrees()).collect();
        trans.sort_by(f64::total_cmp);
        rot.sort_by(f64::total_cmp);
        println!("trials {trials}");
        println!("{:<16}{:>14}{:>14}{:>14}", "error", "median", "p95", "max");
        for (label, v) in [("translation_mm", &trans), ("rotation_deg", &rot)] {
            println!(
                "{label:<16}{:>14.6}{:>14.6}{:>14.6}",
                percentile(v, 0.5),
                percentile(v, 0.95),
                v[v.len() - 1]
            );
        }
    }
    Ok(())
}

fn calibrate(
    session_path: &Path,
    out: &Path,
    reversal: Option<&Path>,
    lenient: bool,
) -> Result<()> {
    let mut inputs = Vec::new();
    let mut runs = Vec::new();
    let mut truth = None;
    let mut seed = None;
    for path in std::iter::once(session_path).chain(reversal) {
        let input = read_input(path)?;
        let file: SessionFile = parse(&input, lenient)?;
        let session = file
            .to_session()
            .with_context(|| format!("validating {}", path.display()))?;
        if truth.is_none() {
            truth = file.ground_truth_transform()?;
            seed = file.ground_truth.as_ref().map(|g| g.seed);
        }
        let result = compute_rob_h_cam(&session)
            .with_context(|| format!("calibrating {}", path.display()))?;
        runs.push(result);
        inputs.push(input.hash);
    }
    let result: ReferencingResult = match runs.as_slice() {
        [single] => single.clone(),
        [a, b] => reversal_average(a, b)?,
        _ => unreachable!("one or two sessions"),
    };

    println!(
        "{:<8}{:>22}{:>22}",
        "run", "registration_rms_mm", "reprojection_rms_px"
    );
    for (k, (reg, px)) in result
        .registration_rms_mm()
        .iter()
        .zip(result.reprojection_rms_px())
        .enumerate()
    {
        println!("{k:<8}{reg:>22.6}{px:>22.6}");
    }
    if let Some(truth) = truth {
        let (rot, trans) = result.h_rob_cam().difference(&truth);
        println!(
            "ground truth error: translation {trans:.9} mm, rotation {:.9} deg",
            rot.to_degrees()
        );
    }

    let file = ResultFile::from_result(
        &result,
        ResultProvenance {
            inputs,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        },
    );
    write(out, &to_json(&file)?)
}

#[derive(Serialize)]
struct CircleSummary {
    centre_x_mm: f64,
    centre_y_mm: f64,
    radius_mm: f64,
    angular_order_spearman: f64,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    report: &'a ClusterReport,
    overall_diameter_mm: f64,
    cluster_mean_circle: Option<CircleSummary>,
    measurements: usize,
    inputs: Vec<InputHash>,
    seed: Option<u64>,
    tool_version: &'static str,
}

fn cluster_mean_circle(report: &ClusterReport) -> Option<CircleSummary> {
    let means: Vec<_> = report.clusters.iter().map(|(_, s)| s.mean()).collect();
    let (centre, radius_mm) = fit_circle(&means).ok()?;
    Some(CircleSummary {
        centre_x_mm: centre.x,
        centre_y_mm: centre.y,
        radius_mm,
        angular_order_spearman: angular_order_spearman(report, &centre).ok()?,
    })
}

fn print_summary(report: &ClusterReport, circle: Option<&CircleSummary>) {
    let o = &report.overall;
    println!(
        "all: n={} d_all={:.3} mm max_from_mean={:.3} mm mean_from_mean={:.3} mm mean_l2_between_cluster_means={:.3} mm",
        o.count,
        o.diameter_mm(),
        o.max_from_mean_mm,
        o.mean_from_mean_mm,
        report.mean_l2_between_cluster_means_mm
    );
    if let Some(c) = circle {
        println!(
            "cluster-mean circle: radius {:.3} mm, angular order spearman {:.3}",
            c.radius_mm, c.angular_order_spearman
        );
    }
}

fn write_reports(
    out: &Path,
    title: &str,
    report: &ClusterReport,
    measurements: &[MarkMeasurement],
    inputs: Vec<InputHash>,
    seed: Option<u64>,
) -> Result<()> {
    let circle = cluster_mean_circle(report);
    print_summary(report, circle.as_ref());
    write(&out.join("report.csv"), &report_csv(report))?;
    write(
        &out.join("report.json"),
        &to_json(&ReportFile {
            report,
            overall_diameter_mm: report.overall.diameter_mm(),
            cluster_mean_circle: circle,
            measurements: measurements.len(),
            inputs,
            seed,
            tool_version: env!("CARGO_PKG_VERSION"),
        })?,
    )?;
    write(
        &out.join("clusters.svg"),
        &clusters_svg(&[(title.to_owned(), measurements.to_vec())]),
    )
}

fn experiment(
    world_path: &Path,
    result_path: &Path,
    plan_path: &Path,
    out: &Path,
    seed: Option<u64>,
    lenient: bool,
) -> Result<()> {
    let world_input = read_input(world_path)?;
    let result_input = read_input(result_path)?;
    let plan_input = read_input(plan_path)?;
    let cfg: WorldConfig = parse(&world_input, lenient)?;
    let resolved = cfg.resolve(&FaultRegistry::builtin())?;
    let result_file: ResultFile = parse(&result_input, lenient)?;
    let result = result_file.to_result()?;
    if result.h_rob_cam().to_frame() != &FrameId::Rob {
        anyhow::bail!("result does not describe rob_H_cam");
    }
    let result = apply_result_faults(&result, &resolved.faults)?;
    let mut plan: ExperimentPlan = parse(&plan_input, lenient)?;
    if let Some(s) = seed {
        plan.seed = s;
    }
    let dirs = plan
        .validate()
        .with_context(|| format!("validating {}", plan_path.display()))?;

    let measurements = run_experiment(&resolved.world, &resolved.noise, &plan, &result)?;
    let report = cluster_metrics_for(&measurements, &dirs)?;
    write(
        &out.join("measurements.csv"),
        &measurements_to_csv(&measurements)?,
    )?;
    write_reports(
        out,
        &format!("seed {}", plan.seed),
        &report,
        &measurements,
        vec![world_input.hash, result_input.hash, plan_input.hash],
        Some(plan.seed),
    )
}

fn metrics(path: &Path, out: Option<&Path>) -> Result<()> {
    let input = read_input(path)?;
    let measurements = measurements_from_csv(&input.text)?;
    let report = cluster_metrics(&measurements)?;
    match out {
        Some(dir) => write_reports(
            dir,
            &path.display().to_string(),
            &report,
            &measurements,
            vec![input.hash],
            None,
        ),
        None => {
            print!("{}", report_csv(&report));
            print_summary(&report, cluster_mean_circle(&report).as_ref());
            Ok(())
        }
    }
}
