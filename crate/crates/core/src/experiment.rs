//! Repeated floor-mark measurement from eight approach directions, and the
//! cluster statistics used to judge a calibration.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::ImagePoint;
use crate::error::{Error, Result};
use crate::geometry::{rot_z, FrameId, Point3, RigidTransform};
use crate::referencing::ReferencingResult;
use crate::sim::{simulate_mark_observation, trial_rng, Ground, NoiseConfig, SimWorld};

/// Yaw may deviate this much from a direction's nominal value.
pub const LABEL_TOLERANCE_DEG: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
    UpLeft,
    UpRight,
    DownLeft,
    DownRight,
}

impl Direction {
    /// Report row order.
    pub const ALL: [Direction; 8] = [
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
        Direction::UpLeft,
        Direction::UpRight,
        Direction::DownLeft,
        Direction::DownRight,
    ];

    pub fn nominal_yaw_deg(self) -> f64 {
        match self {
            Direction::Up => 0.0,
            Direction::UpLeft => 45.0,
            Direction::Left => 90.0,
            Direction::DownLeft => 135.0,
            Direction::Down => 180.0,
            Direction::DownRight => -135.0,
            Direction::Right => -90.0,
            Direction::UpRight => -45.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::UpLeft => "upleft",
            Direction::UpRight => "upright",
            Direction::DownLeft => "downleft",
            Direction::DownRight => "downright",
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.label() == label)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown direction '{label}'")))
    }

    /// Direction whose nominal yaw is within the label tolerance.
    pub fn from_yaw_deg(yaw: f64) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|d| wrap_deg(yaw - d.nominal_yaw_deg()).abs() <= LABEL_TOLERANCE_DEG)
    }
}

/// Wraps an angle into (-180, 180].
pub fn wrap_deg(a: f64) -> f64 {
    let r = (a + 180.0).rem_euclid(360.0) - 180.0;
    if r == -180.0 {
        180.0
    } else {
        r
    }
}

fn wrap_rad(a: f64) -> f64 {
    wrap_deg(a.to_degrees()).to_radians()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkMeasurement {
    /// Index into the plan's mark list.
    pub mark: usize,
    pub direction: Direction,
    pub yaw_deg: f64,
    /// Recovered mark position in ACS.
    pub position: Point3<f64>,
    pub repeat: usize,
}

impl MarkMeasurement {
    pub fn xy(&self) -> Vector2<f64> {
        Vector2::new(self.position.x, self.position.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// Floor marks, ACS x and y. The height follows the floor.
    pub marks_xy_mm: Vec<[f64; 2]>,
    #[serde(default = "default_yaws")]
    pub yaws_deg: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Radius of the disc from which the principal-ray offset is drawn, so
    /// the mark appears at different image locations.
    #[serde(default = "default_offset_radius")]
    pub offset_radius_mm: f64,
    #[serde(default = "default_yaw_jitter")]
    pub yaw_jitter_deg: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_yaws() -> Vec<f64> {
    vec![0.0, 45.0, 90.0, 135.0, 180.0, -135.0, -90.0, -45.0]
}

fn default_repeats() -> usize {
    5
}

fn default_offset_radius() -> f64 {
    20.0
}

fn default_yaw_jitter() -> f64 {
    0.5
}

impl ExperimentPlan {
    pub fn new(marks_xy_mm: Vec<[f64; 2]>, seed: u64) -> Self {
        Self {
            marks_xy_mm,
            yaws_deg: default_yaws(),
            repeats: default_repeats(),
            offset_radius_mm: default_offset_radius(),
            yaw_jitter_deg: default_yaw_jitter(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<Vec<Direction>> {
        if self.marks_xy_mm.is_empty() {
            return Err(Error::InvalidConfig("plan has no marks".into()));
        }
        if self.yaws_deg.is_empty() {
            return Err(Error::InvalidConfig("plan has an empty yaw list".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig(
                "plan needs at least one repeat".into(),
            ));
        }
        if !(self.offset_radius_mm >= 0.0 && self.yaw_jitter_deg >= 0.0) {
            return Err(Error::InvalidConfig(
                "offset radius and yaw jitter must be >= 0".into(),
            ));
        }
        let mut dirs = Vec::with_capacity(self.yaws_deg.len());
        for &y in &self.yaws_deg {
            let d = Direction::from_yaw_deg(y).ok_or_else(|| {
                Error::InvalidConfig(format!("yaw {y} deg matches no approach direction"))
            })?;
            if dirs.contains(&d) {
                return Err(Error::InvalidConfig(format!(
                    "direction {} listed twice",
                    d.label()
                )));
            }
            dirs.push(d);
        }
        Ok(dirs)
    }
}

/// Mark position in ACS from its image point and the measurement-time robot
/// pose `abs <- rob`.
pub fn measure_mark(
    result: &ReferencingResult,
    image_point: &ImagePoint,
    h_abs_rob: &RigidTransform,
) -> Result<Point3<f64>> {
    if h_abs_rob.to_frame() != &FrameId::Abs || h_abs_rob.from_frame() != &FrameId::Rob {
        return Err(Error::FrameMismatch {
            expected: FrameId::Rob,
            found: h_abs_rob.from_frame().clone(),
        });
    }
    let scene = result.scene();
    if !image_point.is_finite() || !scene.camera.contains(image_point) {
        return Err(Error::OutOfBounds {
            row: image_point.row,
            col: image_point.col,
        });
    }
    let xy = scene.map(image_point)?;
    let p_rob = result
        .h_rob_scn()
        .transform_point(&Point3::new(xy.x, xy.y, 0.0));
    Ok(h_abs_rob.transform_point(&p_rob))
}

/// Runs every (mark, direction, repeat) combination. Each combination draws
/// from its own random stream, so the output does not depend on thread
/// scheduling.
pub fn run_experiment(
    world: &SimWorld,
    noise: &NoiseConfig,
    plan: &ExperimentPlan,
    result: &ReferencingResult,
) -> Result<Vec<MarkMeasurement>> {
    let dirs = plan.validate()?;
    noise.validate()?;
    let jitter =
        Normal::new(0.0, plan.yaw_jitter_deg).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut jobs = Vec::new();
    for mark in 0..plan.marks_xy_mm.len() {
        for (d, &yaw) in plan.yaws_deg.iter().enumerate() {
            for repeat in 0..plan.repeats {
                jobs.push((mark, d, yaw, repeat));
            }
        }
    }
    jobs.into_par_iter()
        .enumerate()
        .map(|(stream, (mark, d, nominal, repeat))| {
            let mut rng = trial_rng(plan.seed, stream as u64);
            let [mx, my] = plan.marks_xy_mm[mark];
            let r = plan.offset_radius_mm * rng.random::<f64>().sqrt();
            let phi = 2.0 * PI * rng.random::<f64>();
            let yaw_deg = nominal + jitter.sample(&mut rng);
            let yaw = yaw_deg.to_radians();
            let aim = Vector2::new(mx + r * phi.cos(), my + r * phi.sin());
            let placement = world.aim_at(Ground::Floor, aim, yaw)?;
            let truth = world.floor.point(mx, my);
            let (q, reading) =
                simulate_mark_observation(world, noise, &placement, &truth, &mut rng)?;
            let h_abs_rob = RigidTransform::from_parts(
                FrameId::Abs,
                FrameId::Rob,
                rot_z(yaw),
                reading.position.coords,
            );
            Ok(MarkMeasurement {
                mark,
                direction: dirs[d],
                yaw_deg: wrap_deg(yaw_deg),
                position: measure_mark(result, &q, &h_abs_rob)?,
                repeat,
            })
        })
        .collect()
}

/// Smallest circle containing all points, as (centre, radius).
pub fn min_enclosing_circle(points: &[Vector2<f64>]) -> Result<(Vector2<f64>, f64)> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(Error::InvalidConfig("non-finite point".into()));
    }
    // Work relative to the centroid; absolute tracker coordinates can be
    // large compared to the cluster size.
    let origin = points.iter().sum::<Vector2<f64>>() / points.len() as f64;
    let mut pts: Vec<Vector2<f64>> = points.iter().map(|p| p - origin).collect();
    pts.shuffle(&mut trial_rng(0x006d_6563, 0));

    let inside =
        |c: &(Vector2<f64>, f64), p: &Vector2<f64>| (p - c.0).norm() <= c.1 * (1.0 + 1e-12) + 1e-12;
    let mut c = (pts[0], 0.0);
    for i in 1..pts.len() {
        if inside(&c, &pts[i]) {
            continue;
        }
        c = (pts[i], 0.0);
        for j in 0..i {
            if inside(&c, &pts[j]) {
                continue;
            }
            c = circle_two(&pts[i], &pts[j]);
            for k in 0..j {
                if !inside(&c, &pts[k]) {
                    c = circle_three(&pts[i], &pts[j], &pts[k]);
                }
            }
        }
    }
    Ok((c.0 + origin, c.1))
}

fn circle_two(a: &Vector2<f64>, b: &Vector2<f64>) -> (Vector2<f64>, f64) {
    ((a + b) / 2.0, (a - b).norm() / 2.0)
}

fn circle_three(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> (Vector2<f64>, f64) {
    let (bx, by) = (b.x - a.x, b.y - a.y);
    let (cx, cy) = (c.x - a.x, c.y - a.y);
    let d = 2.0 * (bx * cy - by * cx);
    let scale = (bx * bx + by * by).max(cx * cx + cy * cy);
    if d.abs() <= 1e-14 * scale {
        // Collinear: the farthest pair spans the circle.
        return [circle_two(a, b), circle_two(a, c), circle_two(b, c)]
            .into_iter()
            .max_by(|p, q| p.1.total_cmp(&q.1))
            .expect("three candidates");
    }
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    let ux = (cy * b2 - by * c2) / d;
    let uy = (bx * c2 - cx * b2) / d;
    let center = Vector2::new(a.x + ux, a.y + uy);
    let r = [a, b, c]
        .iter()
        .map(|p| (*p - center).norm())
        .fold(0.0, f64::max);
    (center, r)
}

/// Table-style statistics of one group of points in the ACS xy-plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub count: usize,
    pub mean_x_mm: f64,
    pub mean_y_mm: f64,
    pub max_from_mean_mm: f64,
    pub mean_from_mean_mm: f64,
    pub cluster_radius_mm: f64,
    /// `[min, max]` approach yaw, unwrapped around the nominal direction.
    pub approach_angle_deg: Option<[f64; 2]>,
}

impl ClusterStats {
    pub fn mean(&self) -> Vector2<f64> {
        Vector2::new(self.mean_x_mm, self.mean_y_mm)
    }

    pub fn diameter_mm(&self) -> f64 {
        2.0 * self.cluster_radius_mm
    }

    fn from_points(points: &[Vector2<f64>], approach: Option<[f64; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = points.len() as f64;
        let mean = points.iter().sum::<Vector2<f64>>() / n;
        let dists: Vec<f64> = points.iter().map(|p| (p - mean).norm()).collect();
        let (_, radius) = min_enclosing_circle(points)?;
        Ok(Self {
            count: points.len(),
            mean_x_mm: mean.x,
            mean_y_mm: mean.y,
            max_from_mean_mm: dists.iter().copied().fold(0.0, f64::max),
            mean_from_mean_mm: dists.iter().sum::<f64>() / n,
            cluster_radius_mm: radius,
            approach_angle_deg: approach,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    /// In report row order.
    pub clusters: Vec<(Direction, ClusterStats)>,
    pub overall: ClusterStats,
    /// Average distance over all unordered pairs of cluster means.
    pub mean_l2_between_cluster_means_mm: f64,
}

impl ClusterReport {
    pub fn cluster(&self, d: Direction) -> Option<&ClusterStats> {
        self.clusters.iter().find(|(k, _)| *k == d).map(|(_, s)| s)
    }
}

/// Metrics for the directions present in `measurements`.
pub fn cluster_metrics(measurements: &[MarkMeasurement]) -> Result<ClusterReport> {
    if measurements.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut present: Vec<Direction> = measurements.iter().map(|m| m.direction).collect();
    present.sort();
    present.dedup();
    cluster_metrics_for(measurements, &present)
}

/// Metrics for the listed directions; each must have a measurement.
pub fn cluster_metrics_for(
    measurements: &[MarkMeasurement],
    directions: &[Direction],
) -> Result<ClusterReport> {
    if measurements.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut groups: BTreeMap<Direction, Vec<&MarkMeasurement>> = BTreeMap::new();
    for m in measurements {
        groups.entry(m.direction).or_default().push(m);
    }
    let mut clusters = Vec::new();
    for d in Direction::ALL
        .into_iter()
        .filter(|d| directions.contains(d))
    {
        let group = groups
            .get(&d)
            .ok_or_else(|| Error::EmptyCluster(d.label().to_owned()))?;
        let pts: Vec<_> = group.iter().map(|m| m.xy()).collect();
        let nominal = d.nominal_yaw_deg();
        let unwrapped = group
            .iter()
            .map(|m| nominal + wrap_deg(m.yaw_deg - nominal));
        let lo = unwrapped.clone().fold(f64::INFINITY, f64::min);
        let hi = unwrapped.fold(f64::NEG_INFINITY, f64::max);
        clusters.push((d, ClusterStats::from_points(&pts, Some([lo, hi]))?));
    }
    let all: Vec<_> = measurements.iter().map(MarkMeasurement::xy).collect();
    let overall = ClusterStats::from_points(&all, None)?;

    let means: Vec<_> = clusters.iter().map(|(_, s)| s.mean()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            total += (means[i] - means[j]).norm();
            pairs += 1;
        }
    }
    Ok(ClusterReport {
        clusters,
        overall,
        mean_l2_between_cluster_means_mm: if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        },
    })
}

/// Algebraic least-squares circle fit, as (centre, radius).
pub fn fit_circle(points: &[Vector2<f64>]) -> Result<(Vector2<f64>, f64)> {
    if points.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "circle fit needs 3 points, got {}",
            points.len()
        )));
    }
    let origin = points.iter().sum::<Vector2<f64>>() / points.len() as f64;
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for p in points {
        let q = p - origin;
        let row = Vector3::new(q.x, q.y, 1.0);
        ata += row * row.transpose();
        atb += row * q.norm_squared();
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| Error::DegenerateConfiguration("circle fit: points are collinear".into()))?;
    let c = Vector2::new(sol.x / 2.0, sol.y / 2.0);
    let r2 = sol.z + c.norm_squared();
    if !(r2 > 0.0) {
        return Err(Error::DegenerateConfiguration("circle fit failed".into()));
    }
    Ok((c + origin, r2.sqrt()))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::LengthMismatch {
            source_len: x.len(),
            target_len: y.len(),
        });
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation between approach yaw and the polar angle of each
/// cluster mean around `centre`. Directions are visited in yaw order and the
/// polar angle is unwrapped along the way.
pub fn angular_order_spearman(report: &ClusterReport, centre: &Vector2<f64>) -> Result<f64> {
    let mut rows: Vec<(f64, f64)> = report
        .clusters
        .iter()
        .map(|(d, s)| {
            let v = s.mean() - centre;
            (d.nominal_yaw_deg().to_radians(), v.y.atan2(v.x))
        })
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut unwrapped = Vec::with_capacity(rows.len());
    let mut prev = rows.first().map(|r| r.1).unwrap_or(0.0);
    for (k, (_, a)) in rows.iter().enumerate() {
        let next = if k == 0 {
            *a
        } else {
            prev + wrap_rad(a - prev)
        };
        unwrapped.push(next);
        prev = next;
    }
    let yaws: Vec<f64> = rows.iter().map(|r| r.0).collect();
    spearman(&yaws, &unwrapped)
}

fn fmt9(v: f64) -> String {
    format!("{v:.9}")
}

/// Table layout: one row per direction, then the overall row and a trailing
/// comment with the mean inter-cluster distance.
pub fn report_csv(report: &ClusterReport) -> String {
    let mut out = String::from(
        "direction,mean_x_mm,mean_y_mm,max_from_mean_mm,mean_from_mean_mm,cluster_radius_mm,approach_min_deg,approach_max_deg\n",
    );
    let row = |out: &mut String, label: &str, s: &ClusterStats| {
        let (lo, hi) = match s.approach_angle_deg {
            Some([a, b]) => (fmt9(a), fmt9(b)),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{label},{},{},{},{},{},{lo},{hi}",
            fmt9(s.mean_x_mm),
            fmt9(s.mean_y_mm),
            fmt9(s.max_from_mean_mm),
            fmt9(s.mean_from_mean_mm),
            fmt9(s.cluster_radius_mm),
        );
    };
    for (d, s) in &report.clusters {
        row(&mut out, d.label(), s);
    }
    row(&mut out, "all", &report.overall);
    let _ = writeln!(
        out,
        "# mean_l2_between_cluster_means_mm,{}",
        fmt9(report.mean_l2_between_cluster_means_mm)
    );
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct MeasurementRow {
    mark: usize,
    direction: String,
    repeat: usize,
    yaw_deg: f64,
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
}

pub fn measurements_to_csv(measurements: &[MarkMeasurement]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in measurements {
        w.serialize(MeasurementRow {
            mark: m.mark,
            direction: m.direction.label().to_owned(),
            repeat: m.repeat,
            yaw_deg: m.yaw_deg,
            x_mm: m.position.x,
            y_mm: m.position.y,
            z_mm: m.position.z,
        })
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidConfig(e.to_string()))
}

pub fn measurements_from_csv(text: &str) -> Result<Vec<MarkMeasurement>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize::<MeasurementRow>()
        .map(|row| {
            let row = row.map_err(|e| Error::InvalidConfig(format!("measurement csv: {e}")))?;
            let direction = Direction::parse(&row.direction)?;
            if wrap_deg(row.yaw_deg - direction.nominal_yaw_deg()).abs() > LABEL_TOLERANCE_DEG {
                return Err(Error::InvalidConfig(format!(
                    "yaw {} deg does not match direction {}",
                    row.yaw_deg, row.direction
                )));
            }
            Ok(MarkMeasurement {
                mark: row.mark,
                direction,
                yaw_deg: row.yaw_deg,
                position: Point3::new(row.x_mm, row.y_mm, row.z_mm),
                repeat: row.repeat,
            })
        })
        .collect()
}

fn direction_colour(d: Direction) -> &'static str {
    match d {
        Direction::Left => "#1f77b4",
        Direction::Right => "#ff7f0e",
        Direction::Up => "#2ca02c",
        Direction::Down => "#d62728",
        Direction::UpLeft => "#9467bd",
        Direction::UpRight => "#8c564b",
        Direction::DownLeft => "#e377c2",
        Direction::DownRight => "#17becf",
    }
}

/// Scatter plots of measurements relative to each panel's overall mean,
/// one panel per title.
pub fn clusters_svg(panels: &[(String, Vec<MarkMeasurement>)]) -> String {
    const SIZE: f64 = 360.0;
    const PAD: f64 = 40.0;
    let width = PAD + panels.len().max(1) as f64 * (SIZE + PAD);
    let height = SIZE + 2.0 * PAD + 20.0 * 8.0 / 2.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, (title, ms)) in panels.iter().enumerate() {
        let x0 = PAD + k as f64 * (SIZE + PAD);
        let y0 = PAD;
        let n = ms.len().max(1) as f64;
        let mean = ms.iter().map(MarkMeasurement::xy).sum::<Vector2<f64>>() / n;
        let extent = ms
            .iter()
            .map(|m| (m.xy() - mean).amax())
            .fold(0.0, f64::max)
            .max(0.05)
            * 1.15;
        let scale = SIZE / (2.0 * extent);
        let cx = x0 + SIZE / 2.0;
        let cy = y0 + SIZE / 2.0;
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.1}" y="{y0:.1}" width="{SIZE}" height="{SIZE}" fill="none" stroke="#444"/>"##
        );
        let _ = writeln!(
            s,
            r##"<line x1="{x0:.1}" y1="{cy:.1}" x2="{:.1}" y2="{cy:.1}" stroke="#ccc"/><line x1="{cx:.1}" y1="{y0:.1}" x2="{cx:.1}" y2="{:.1}" stroke="#ccc"/>"##,
            x0 + SIZE,
            y0 + SIZE
        );
        let _ = writeln!(
            s,
            r#"<text x="{x0:.1}" y="{:.1}">{}</text>"#,
            y0 - 8.0,
            escape(title)
        );
        let _ = writeln!(
            s,
            r#"<text x="{x0:.1}" y="{:.1}">±{extent:.3} mm about mean ({:.3}, {:.3})</text>"#,
            y0 + SIZE + 14.0,
            mean.x,
            mean.y
        );
        for m in ms {
            let d = m.xy() - mean;
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.8"><title>{} yaw {:.2}</title></circle>"#,
                cx + d.x * scale,
                cy - d.y * scale,
                direction_colour(m.direction),
                m.direction.label(),
                m.yaw_deg
            );
        }
        for (i, d) in Direction::ALL.iter().enumerate() {
            let lx = x0 + (i % 4) as f64 * (SIZE / 4.0);
            let ly = y0 + SIZE + 32.0 + (i / 4) as f64 * 16.0;
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 4.0,
                ly - 4.0,
                direction_colour(*d),
                lx + 12.0,
                ly,
                d.label()
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Smallest circle over all point pairs and triples. Circumcentres come
    /// from the perpendicular-bisector linear system.
    pub(crate) fn brute_force_circle(points: &[Vector2<f64>]) -> f64 {
        let covers = |c: &Vector2<f64>, r: f64| points.iter().all(|p| (p - c).norm() <= r + 1e-9);
        if points.len() == 1 {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let c = (points[i] + points[j]) / 2.0;
                let r = (points[i] - c).norm();
                if r < best && covers(&c, r) {
                    best = r;
                }
                for k in j + 1..points.len() {
                    let (a, b, q) = (points[i], points[j], points[k]);
                    let m = nalgebra::Matrix2::new(b.x - a.x, b.y - a.y, q.x - a.x, q.y - a.y);
                    let rhs = Vector2::new(
                        (b.norm_squared() - a.norm_squared()) / 2.0,
                        (q.norm_squared() - a.norm_squared()) / 2.0,
                    );
                    let Some(c) = m.lu().solve(&rhs) else {
                        continue;
                    };
                    let r = (a - c).norm().max((b - c).norm()).max((q - c).norm());
                    if r.is_finite() && r < best && covers(&c, r) {
                        best = r;
                    }
                }
            }
        }
        best
    }

    fn m(direction: Direction, x: f64, y: f64) -> MarkMeasurement {
        MarkMeasurement {
            mark: 0,
            direction,
            yaw_deg: direction.nominal_yaw_deg(),
            position: Point3::new(x, y, 0.0),
            repeat: 0,
        }
    }

    #[test]
    fn labels_follow_yaw() {
        assert_eq!(Direction::from_yaw_deg(0.3), Some(Direction::Up));
        assert_eq!(Direction::from_yaw_deg(89.0), Some(Direction::Left));
        assert_eq!(Direction::from_yaw_deg(-179.5), Some(Direction::Down));
        assert_eq!(Direction::from_yaw_deg(179.5), Some(Direction::Down));
        assert_eq!(Direction::from_yaw_deg(-44.0), Some(Direction::UpRight));
        assert_eq!(Direction::from_yaw_deg(-136.0), Some(Direction::DownRight));
        assert_eq!(Direction::from_yaw_deg(22.5), None);
        assert_eq!(wrap_deg(-180.0), 180.0);
        assert_eq!(wrap_deg(540.0), 180.0);
    }

    #[test]
    fn circle_simple_cases() {
        assert!(matches!(min_enclosing_circle(&[]), Err(Error::EmptyInput)));
        let (c, r) = min_enclosing_circle(&[Vector2::new(3.0, 4.0)]).unwrap();
        assert_eq!((c, r), (Vector2::new(3.0, 4.0), 0.0));
        let (c, r) =
            min_enclosing_circle(&[Vector2::new(0.0, 0.0), Vector2::new(6.0, 8.0)]).unwrap();
        assert!((r - 5.0).abs() < 1e-12);
        assert!((c - Vector2::new(3.0, 4.0)).norm() < 1e-12);
    }

    #[test]
    fn identical_points_give_zero_metrics() {
        let ms: Vec<_> = Direction::ALL.iter().map(|&d| m(d, 10.0, -4.0)).collect();
        let r = cluster_metrics(&ms).unwrap();
        for (_, s) in &r.clusters {
            assert_eq!(s.max_from_mean_mm, 0.0);
            assert_eq!(s.mean_from_mean_mm, 0.0);
            assert_eq!(s.cluster_radius_mm, 0.0);
        }
        assert_eq!(r.overall.cluster_radius_mm, 0.0);
        assert_eq!(r.mean_l2_between_cluster_means_mm, 0.0);
    }

    #[test]
    fn two_point_cluster_diameter() {
        let ms = [
            m(Direction::Down, 100.0, 50.0),
            m(Direction::Down, 100.0, 50.103),
        ];
        let r = cluster_metrics(&ms).unwrap();
        let down = r.cluster(Direction::Down).unwrap();
        assert!((down.diameter_mm() - 0.103).abs() < 1e-9);
        assert!((down.max_from_mean_mm - 0.0515).abs() < 1e-9);
    }

    #[test]
    fn inter_cluster_mean_distance() {
        // Means at (0,0), (3,0), (0,4): pair distances 3, 4, 5.
        let ms = [
            m(Direction::Up, -1.0, 0.0),
            m(Direction::Up, 1.0, 0.0),
            m(Direction::Left, 3.0, 1.0),
            m(Direction::Left, 3.0, -1.0),
            m(Direction::Right, 0.0, 4.0),
        ];
        let r = cluster_metrics(&ms).unwrap();
        assert!((r.mean_l2_between_cluster_means_mm - 4.0).abs() < 1e-12);
        assert_eq!(
            r.clusters.iter().map(|c| c.0).collect::<Vec<_>>(),
            vec![Direction::Left, Direction::Right, Direction::Up]
        );
        assert!(matches!(
            cluster_metrics_for(&ms, &[Direction::Up, Direction::Down]),
            Err(Error::EmptyCluster(d)) if d == "down"
        ));
    }

    #[test]
    fn approach_range_unwraps_around_down() {
        let mut a = m(Direction::Down, 0.0, 0.0);
        a.yaw_deg = 179.5;
        let mut b = m(Direction::Down, 0.0, 0.0);
        b.yaw_deg = -179.6;
        let r = cluster_metrics(&[a, b]).unwrap();
        let [lo, hi] = r
            .cluster(Direction::Down)
            .unwrap()
            .approach_angle_deg
            .unwrap();
        assert!((lo - 179.5).abs() < 1e-9 && (hi - 180.4).abs() < 1e-9);
    }

    #[test]
    fn plan_validation() {
        let mut plan = ExperimentPlan::new(vec![[0.0, 0.0]], 1);
        assert_eq!(plan.validate().unwrap().len(), 8);
        plan.yaws_deg.clear();
        assert!(plan.validate().is_err());
        plan.yaws_deg = vec![30.0];
        assert!(plan.validate().is_err());
        plan.yaws_deg = vec![0.0, 2.0];
        assert!(plan.validate().is_err());
    }

    #[test]
    fn circle_fit_and_spearman() {
        let pts: Vec<_> = (0..8)
            .map(|k| {
                let a = k as f64 * PI / 4.0 + 0.3;
                Vector2::new(5.0 + 2.0 * a.cos(), -1.0 + 2.0 * a.sin())
            })
            .collect();
        let (c, r) = fit_circle(&pts).unwrap();
        assert!((c - Vector2::new(5.0, -1.0)).norm() < 1e-12);
        assert!((r - 2.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn measurement_csv_round_trip() {
        let mut a = m(Direction::UpLeft, 1.25, -3.5);
        a.position.z = 0.125;
        a.repeat = 3;
        let text = measurements_to_csv(&[a]).unwrap();
        assert_eq!(measurements_from_csv(&text).unwrap(), vec![a]);
        assert!(measurements_from_csv(
            "mark,direction,repeat,yaw_deg,x_mm,y_mm,z_mm\n0,up,0,90,0,0,0\n"
        )
        .is_err());
    }

    #[test]
    fn report_csv_layout() {
        let ms = [m(Direction::Up, 0.0, 0.0), m(Direction::Left, 1.0, 0.0)];
        let csv = report_csv(&cluster_metrics(&ms).unwrap());
        let lines: Vec<_> = csv.lines().collect();
        assert!(lines[0].starts_with("direction,mean_x_mm"));
        assert!(lines[1].starts_with("left,1.000000000,"));
        assert!(lines[2].starts_with("up,"));
        assert!(lines[3].starts_with("all,0.500000000,"));
        assert_eq!(lines[4], "# mean_l2_between_cluster_means_mm,1.000000000");
        let svg = clusters_svg(&[("mark 0".into(), ms.to_vec())]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    fn points_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..30)
    }

    proptest! {
        #[test]
        fn circle_matches_brute_force(raw in points_strategy()) {
            let pts: Vec<_> = raw.iter().map(|&(x, y)| Vector2::new(x, y)).collect();
            let (c, r) = min_enclosing_circle(&pts).unwrap();
            prop_assert!((r - brute_force_circle(&pts)).abs() < 1e-9);
            prop_assert!(pts.iter().all(|p| (p - c).norm() <= r + 1e-9));
            if pts.iter().any(|p| (p - pts[0]).norm() > 1e-9) {
                let support = pts.iter().filter(|p| ((*p - c).norm() - r).abs() < 1e-7).count();
                prop_assert!(support >= 2);
            }
        }

        #[test]
        fn report_invariants(raw in prop::collection::vec((0usize..8, -1.0..1.0f64, -1.0..1.0f64), 1..40)) {
            let ms: Vec<_> = raw.iter().map(|&(d, x, y)| m(Direction::ALL[d], 1000.0 + x, 2000.0 + y)).collect();
            let r = cluster_metrics(&ms).unwrap();
            for s in r.clusters.iter().map(|(_, s)| s).chain([&r.overall]) {
                prop_assert!(s.max_from_mean_mm >= s.mean_from_mean_mm - 1e-12);
                prop_assert!(s.mean_from_mean_mm >= 0.0);
                prop_assert!(s.cluster_radius_mm >= s.max_from_mean_mm / 2.0 - 1e-9);
                prop_assert!(s.cluster_radius_mm <= s.max_from_mean_mm + 1e-9);
            }
        }
    }
}
