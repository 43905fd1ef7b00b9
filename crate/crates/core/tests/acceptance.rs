//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any criterion fails.

use std::f64::consts::{PI, SQRT_2};
use std::process::ExitCode;
use std::time::Instant;

use floorref::experiment::{
    angular_order_spearman, cluster_metrics, fit_circle, min_enclosing_circle, run_experiment,
    ClusterReport, ClusterStats, Direction, ExperimentPlan, MarkMeasurement,
};
use floorref::geometry::{register_points, rot_x, rot_y, rot_z, FrameId, Point3, RigidTransform};
use floorref::referencing::{compute_rob_h_cam, reversal_average, ReferencingResult};
use floorref::sim::{
    calibration_trials, inject_wooden_plate, simulate_referencing_session, trial_rng, Fault,
    HandEyeOffset, NoiseConfig, SimWorld, DEFAULT_DRIVE_MM,
};
use nalgebra::{Rotation3, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn calibrate(
    world: &SimWorld,
    noise: &NoiseConfig,
    reversed: bool,
    seed: u64,
    stream: u64,
) -> ReferencingResult {
    let (p0, p1) = world.calibration_placements(reversed, 0.0, DEFAULT_DRIVE_MM);
    let session =
        simulate_referencing_session(world, noise, &p0, &p1, &mut trial_rng(seed, stream))
            .expect("simulated session");
    compute_rob_h_cam(&session).expect("calibration")
}

fn random_rigid<R: Rng>(rng: &mut R) -> RigidTransform {
    RigidTransform::from_parts(
        FrameId::Abs,
        FrameId::Abs,
        rot_z(rng.random_range(-PI..PI))
            * rot_y(rng.random_range(-1.5..1.5))
            * rot_x(rng.random_range(-PI..PI)),
        Vector3::new(
            rng.random_range(-10_000.0..10_000.0),
            rng.random_range(-10_000.0..10_000.0),
            rng.random_range(-3000.0..3000.0),
        ),
    )
}

fn noiseless_round_trip() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0f64);
    for k in 0..50 {
        let world = SimWorld::random(1000 + k);
        let r = calibrate(&world, &NoiseConfig::none(), false, k, 0);
        let (rot, trans) = r.h_rob_cam().difference(&world.h_rob_cam);
        worst = (worst.0.max(rot), worst.1.max(trans));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-8 && worst.1 < 1e-6 && secs < 5.0,
        format!(
            "50 worlds, worst {:.2e} rad / {:.2e} mm, {secs:.2} s",
            worst.0, worst.1
        ),
    )
}

fn gauge_invariance() -> Outcome {
    let mut rng = trial_rng(2, 0);
    let mut worst = (0.0f64, 0.0f64);
    for k in 0..100 {
        let world = SimWorld::random(2000 + k);
        let (p0, p1) = world.calibration_placements(false, 0.0, DEFAULT_DRIVE_MM);
        let s = simulate_referencing_session(
            &world,
            &NoiseConfig::glass(),
            &p0,
            &p1,
            &mut trial_rng(k, 0),
        )
        .expect("session");
        let a = compute_rob_h_cam(&s).expect("calibration");
        let b =
            compute_rob_h_cam(&s.transform_tracker(&random_rigid(&mut rng))).expect("calibration");
        let (rot, trans) = a.h_rob_cam().difference(b.h_rob_cam());
        worst = (worst.0.max(rot), worst.1.max(trans));
    }
    outcome(
        worst.0 < 1e-9 && worst.1 < 1e-9,
        format!(
            "100 trials, worst change {:.2e} rad / {:.2e} mm",
            worst.0, worst.1
        ),
    )
}

const MARK: [f64; 2] = [3400.0, 1900.0];

/// Eight-direction experiment on one floor mark under glass-plate noise.
fn experiment(world: &SimWorld, result: &ReferencingResult, seed: u64) -> ClusterReport {
    let plan = ExperimentPlan::new(vec![MARK], seed);
    let ms = run_experiment(world, &NoiseConfig::glass(), &plan, result).expect("experiment");
    cluster_metrics(&ms).expect("metrics")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn glass_plate_repeatability() -> Outcome {
    let diameters: Vec<f64> = (0..100u64)
        .map(|k| {
            let world = SimWorld::demo().with_seed(k);
            let result = calibrate(&world, &NoiseConfig::glass(), false, k, 0);
            experiment(&world, &result, k).overall.diameter_mm()
        })
        .collect();
    let below = diameters.iter().filter(|d| **d < 1.0).count();
    let med = median(diameters.clone());
    let max = diameters.iter().copied().fold(0.0, f64::max);
    outcome(
        below >= 95 && (0.1..=0.8).contains(&med),
        format!("d_all < 1 mm in {below}/100, median {med:.3} mm, max {max:.3} mm"),
    )
}

/// Circle radius through the cluster means and the angular-order Spearman.
fn circle_signature(report: &ClusterReport) -> (f64, f64) {
    let means: Vec<_> = report.clusters.iter().map(|(_, s)| s.mean()).collect();
    let (centre, radius) = fit_circle(&means).expect("circle fit");
    (
        radius,
        angular_order_spearman(report, &centre).expect("spearman"),
    )
}

fn failure_signature() -> Outcome {
    let noise = NoiseConfig::glass();
    let mut wooden_pass = 0;
    let mut offset_pass = 0;
    let mut ratios = (f64::INFINITY, f64::INFINITY);
    for k in 0..20u64 {
        let flat = SimWorld::demo().with_seed(k);
        let flat_result = calibrate(&flat, &noise, false, k, 0);
        let baseline = experiment(&flat, &flat_result, k).overall.mean_from_mean_mm;

        let wooden = inject_wooden_plate(&flat, 1.0).expect("wooden plate");
        let r = calibrate(&wooden, &noise, false, k, 0);
        let (radius, rho) = circle_signature(&experiment(&wooden, &r, k));
        ratios.0 = ratios.0.min(radius / baseline);
        if radius > 3.0 * baseline && rho == 1.0 {
            wooden_pass += 1;
        }

        let corrupted = HandEyeOffset {
            x_mm: 1.0,
            y_mm: 0.0,
            z_mm: 0.0,
        }
        .apply_result(&flat_result)
        .expect("hand-eye offset");
        let (radius, rho) = circle_signature(&experiment(&flat, &corrupted, k));
        ratios.1 = ratios.1.min(radius / baseline);
        if radius > 3.0 * baseline && rho == 1.0 {
            offset_pass += 1;
        }
    }
    outcome(
        wooden_pass >= 18 && offset_pass >= 18,
        format!(
            "wooden plate {wooden_pass}/20 (min radius/baseline {:.2}), hand-eye offset {offset_pass}/20 (min {:.2})",
            ratios.0, ratios.1
        ),
    )
}

/// Least-squares planar alignment by exhaustive search over the rotation
/// angle, refined by bisection on the derivative of the cost.
fn brute_force_planar(source: &[Vector2<f64>], target: &[Vector2<f64>]) -> (f64, Vector2<f64>) {
    let n = source.len() as f64;
    let cs = source.iter().sum::<Vector2<f64>>() / n;
    let ct = target.iter().sum::<Vector2<f64>>() / n;
    let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = source
        .iter()
        .zip(target)
        .map(|(p, q)| (p - cs, q - ct))
        .collect();
    let rotate = |t: f64, p: &Vector2<f64>| {
        Vector2::new(t.cos() * p.x - t.sin() * p.y, t.sin() * p.x + t.cos() * p.y)
    };
    let cost = |t: f64| {
        pairs
            .iter()
            .map(|(p, q)| (rotate(t, p) - q).norm_squared())
            .sum::<f64>()
    };
    // d/dt of the cost is -2 Σ q · R'(t) p.
    let slope = |t: f64| {
        -2.0 * pairs
            .iter()
            .map(|(p, q)| {
                let dp = Vector2::new(
                    -t.sin() * p.x - t.cos() * p.y,
                    t.cos() * p.x - t.sin() * p.y,
                );
                q.dot(&dp)
            })
            .sum::<f64>()
    };
    let steps = 3600;
    let step = 2.0 * PI / steps as f64;
    let best = (0..steps)
        .map(|i| -PI + i as f64 * step)
        .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
        .expect("grid");
    let (mut lo, mut hi) = (best - step, best + step);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let angle = 0.5 * (lo + hi);
    (angle, ct - rotate(angle, &cs))
}

fn registration_oracle() -> Outcome {
    let mut rng = trial_rng(5, 0);
    let noise = Normal::new(0.0, 0.2).expect("normal");
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let angle = rng.random_range(-PI..PI);
        let shift = Vector2::new(
            rng.random_range(-2000.0..2000.0),
            rng.random_range(-2000.0..2000.0),
        );
        let source: Vec<Vector2<f64>> = (0..3)
            .map(|_| {
                Vector2::new(
                    rng.random_range(-300.0..300.0),
                    rng.random_range(-300.0..300.0),
                )
            })
            .collect();
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
        let target: Vec<Vector2<f64>> = source
            .iter()
            .map(|p| {
                let q = r * Vector3::new(p.x, p.y, 0.0);
                Vector2::new(q.x, q.y)
                    + shift
                    + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))
            })
            .collect();
        let lift = |v: &[Vector2<f64>]| {
            v.iter()
                .map(|p| Point3::new(p.x, p.y, 0.0))
                .collect::<Vec<_>>()
        };
        let reg = register_points(&lift(&source), &lift(&target)).expect("registration");
        let (bf_angle, bf_shift) = brute_force_planar(&source, &target);
        let expected = Rotation3::from_axis_angle(&Vector3::z_axis(), bf_angle);
        let rot_err = (reg.rotation.matrix() - expected.matrix()).abs().max();
        let trans_err = (reg.translation - Vector3::new(bf_shift.x, bf_shift.y, 0.0))
            .abs()
            .max();
        worst = (worst.0.max(rot_err), worst.1.max(trans_err));
    }
    outcome(
        worst.0 < 1e-6 && worst.1 < 1e-6,
        format!(
            "50 planar instances, worst rotation entry {:.2e}, translation {:.2e} mm",
            worst.0, worst.1
        ),
    )
}

/// Smallest circle over every pair and triple that contains all points.
fn brute_force_circle(points: &[Vector2<f64>]) -> (Vector2<f64>, f64) {
    let o = points[0];
    let pts: Vec<Vector2<f64>> = points.iter().map(|p| p - o).collect();
    let contains = |c: &Vector2<f64>, r: f64| pts.iter().all(|p| (p - c).norm() <= r + 1e-10);
    let mut best = (pts[0], 0.0);
    if contains(&best.0, 0.0) {
        return (best.0 + o, 0.0);
    }
    best.1 = f64::INFINITY;
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            let c = (pts[i] + pts[j]) / 2.0;
            let r = (pts[i] - c).norm();
            if r < best.1 && contains(&c, r) {
                best = (c, r);
            }
            for k in j + 1..n {
                let (a, b, cc) = (pts[i], pts[j], pts[k]);
                let d = 2.0 * (a.x * (b.y - cc.y) + b.x * (cc.y - a.y) + cc.x * (a.y - b.y));
                if d.abs() < 1e-12 {
                    continue;
                }
                let (a2, b2, c2) = (a.norm_squared(), b.norm_squared(), cc.norm_squared());
                let centre = Vector2::new(
                    (a2 * (b.y - cc.y) + b2 * (cc.y - a.y) + c2 * (a.y - b.y)) / d,
                    (a2 * (cc.x - b.x) + b2 * (a.x - cc.x) + c2 * (b.x - a.x)) / d,
                );
                let r = (a - centre).norm();
                if r < best.1 && contains(&centre, r) {
                    best = (centre, r);
                }
            }
        }
    }
    (best.0 + o, best.1)
}

fn enclosing_circle_oracle() -> Outcome {
    let mut rng = trial_rng(6, 0);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=30);
        let centre = Vector2::new(
            rng.random_range(-5000.0..5000.0),
            rng.random_range(-5000.0..5000.0),
        );
        let spread = rng.random_range(0.1..5.0);
        let points: Vec<Vector2<f64>> = (0..n)
            .map(|_| {
                centre
                    + Vector2::new(
                        rng.random_range(-spread..spread),
                        rng.random_range(-spread..spread),
                    )
            })
            .collect();
        let (c, r) = min_enclosing_circle(&points).expect("circle");
        let (bc, br) = brute_force_circle(&points);
        worst = worst.max((r - br).abs()).max((c - bc).norm());
    }
    outcome(
        worst < 1e-9,
        format!("200 sets, worst deviation {worst:.2e} mm"),
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

fn stats_match(
    s: &ClusterStats,
    count: usize,
    mean: [f64; 2],
    max: f64,
    avg: f64,
    radius: f64,
    approach: Option<[f64; 2]>,
) -> bool {
    let approach_ok = match (s.approach_angle_deg, approach) {
        (Some(a), Some(b)) => close(a[0], b[0]) && close(a[1], b[1]),
        (None, None) => true,
        _ => false,
    };
    s.count == count
        && close(s.mean_x_mm, mean[0])
        && close(s.mean_y_mm, mean[1])
        && close(s.max_from_mean_mm, max)
        && close(s.mean_from_mean_mm, avg)
        && close(s.cluster_radius_mm, radius)
        && approach_ok
}

/// Two points per direction, on the ray at the direction's nominal yaw from
/// (1000, -500), at distances 1.5 and 2.5 mm. Yaws are nominal - 1 and
/// nominal + 2 degrees.
fn metric_definitions() -> Outcome {
    let mut ms = Vec::new();
    for d in Direction::ALL {
        let phi = d.nominal_yaw_deg().to_radians();
        for (repeat, (dist, dyaw)) in [(1.5, -1.0), (2.5, 2.0)].into_iter().enumerate() {
            ms.push(MarkMeasurement {
                mark: 0,
                direction: d,
                yaw_deg: d.nominal_yaw_deg() + dyaw,
                position: Point3::new(1000.0 + dist * phi.cos(), -500.0 + dist * phi.sin(), 0.0),
                repeat,
            });
        }
    }
    let report = cluster_metrics(&ms).expect("metrics");
    let h = SQRT_2;
    let expected_means = |d: Direction| match d {
        Direction::Up => [1002.0, -500.0],
        Direction::UpLeft => [1000.0 + h, -500.0 + h],
        Direction::Left => [1000.0, -498.0],
        Direction::DownLeft => [1000.0 - h, -500.0 + h],
        Direction::Down => [998.0, -500.0],
        Direction::DownRight => [1000.0 - h, -500.0 - h],
        Direction::Right => [1000.0, -502.0],
        Direction::UpRight => [1000.0 + h, -500.0 - h],
    };
    let mut ok = report.clusters.len() == 8;
    for (d, s) in &report.clusters {
        let nominal = d.nominal_yaw_deg();
        ok &= stats_match(
            s,
            2,
            expected_means(*d),
            0.5,
            0.5,
            0.5,
            Some([nominal - 1.0, nominal + 2.0]),
        );
    }
    ok &= stats_match(&report.overall, 16, [1000.0, -500.0], 2.5, 2.0, 2.5, None);
    // Means sit on a regular octagon of circumradius 2: chords 4 sin(j pi/8)
    // for j = 1..3 occur 8 times each and the diameter 4 times, over 28 pairs.
    let mean_l2 = 2.872_765_424_071_913_2;
    ok &= close(report.mean_l2_between_cluster_means_mm, mean_l2);
    outcome(
        ok,
        format!(
            "16-point fixture, mean L2-distance between cluster means {:.12} mm",
            report.mean_l2_between_cluster_means_mm
        ),
    )
}

fn instrument_reversal() -> Outcome {
    let noise = NoiseConfig::glass();
    let mut worse_ok = 0;
    let mut better_ok = 0;
    for k in 0..200u64 {
        let mut world = SimWorld::random(8000 + k);
        let mut rng = trial_rng(k, 7);
        world.deformation.amplitude_mm = rng.random_range(0.0..0.5);
        for c in &mut world.deformation.coefficients {
            *c = rng.random_range(-1.0..1.0);
        }
        let a = calibrate(&world, &noise, false, k, 1);
        let b = calibrate(&world, &noise, true, k, 2);
        // Inconsistent runs count against both tallies.
        let Ok(m) = reversal_average(&a, &b) else {
            continue;
        };
        let err = |r: &ReferencingResult| r.h_rob_cam().difference(&world.h_rob_cam).1;
        let (ea, eb, em) = (err(&a), err(&b), err(&m));
        if em <= ea.max(eb) {
            worse_ok += 1;
        }
        if em <= ea.min(eb) {
            better_ok += 1;
        }
    }
    outcome(
        worse_ok == 200 && better_ok >= 120,
        format!("200 trials, averaged <= worse run in {worse_ok}, <= better run in {better_ok}"),
    )
}

fn noise_floor() -> Outcome {
    let start = Instant::now();
    let world = SimWorld::demo();
    let noise = NoiseConfig {
        tracker_sigma_mm: 0.035,
        ..NoiseConfig::none()
    };
    let (p0, p1) = world.calibration_placements(false, 0.0, DEFAULT_DRIVE_MM);
    let errors = calibration_trials(&world, &noise, (&p0, &p1), 9, 500).expect("trials");
    let mut t: Vec<f64> = errors.iter().map(|e| e.translation_mm).collect();
    t.sort_by(f64::total_cmp);
    let p95 = t[(0.95 * t.len() as f64).ceil() as usize - 1];
    let secs = start.elapsed().as_secs_f64();
    outcome(
        p95 < 0.3 && secs < 60.0,
        format!("500 trials, p95 translation error {p95:.3} mm, {secs:.2} s"),
    )
}

type Criterion = fn() -> Outcome;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 9] = [
        ("noiseless round trip", noiseless_round_trip),
        ("gauge invariance", gauge_invariance),
        ("glass-plate repeatability", glass_plate_repeatability),
        ("systematic-fault signature", failure_signature),
        ("registration oracle", registration_oracle),
        ("enclosing-circle oracle", enclosing_circle_oracle),
        ("cluster metric definitions", metric_definitions),
        ("instrument reversal", instrument_reversal),
        ("tracker noise floor", noise_floor),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {} {name}: {}", i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
