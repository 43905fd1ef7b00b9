//! Synthetic referencing rig with known ground truth.
//!
//! The world holds the true hand-eye pose, the plate pose in ACS, the robot's
//! wheel geometry and optional systematic faults. Robot poses are derived by
//! resting the wheel triangle on the plate or the floor, so pitch and roll
//! follow the surface. All randomness is drawn from caller-supplied ChaCha
//! streams.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix2, Matrix3, Rotation3, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{build_rectification_map, project, CameraModel, ImagePoint};
use crate::error::{Error, Result};
use crate::geometry::{rot_x, rot_y, rot_z, FrameId, Point3, RigidTransform};
use crate::plate::{NestId, PlateExtent, ReferencingPlate, TargetMark, DEFAULT_NEST_OFFSET_MM};
use crate::referencing::{
    compute_rob_h_cam, MarkObservation, Provenance, ReferencingResult, ReferencingSession,
    TrackerMeasurement, TrackerTarget,
};

/// Default straight drive between the two referencing positions.
pub const DEFAULT_DRIVE_MM: f64 = 230.0;
/// Fewest marks that must be visible for a usable plate image.
pub const MIN_VISIBLE_MARKS: usize = 4;
const SUPPORT_TOLERANCE_MM: f64 = 1e-10;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(default = "default_tracker_sigma")]
    pub tracker_sigma_mm: f64,
    #[serde(default)]
    pub image_sigma_px: f64,
    /// Systematic error of the nest-to-reflector offset.
    #[serde(default)]
    pub nest_offset_error_mm: f64,
    #[serde(default)]
    pub planarity_amplitude_mm: f64,
}

fn default_tracker_sigma() -> f64 {
    0.035
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            tracker_sigma_mm: default_tracker_sigma(),
            image_sigma_px: 0.0,
            nest_offset_error_mm: 0.0,
            planarity_amplitude_mm: 0.0,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            tracker_sigma_mm: 0.0,
            image_sigma_px: 0.0,
            nest_offset_error_mm: 0.0,
            planarity_amplitude_mm: 0.0,
        }
    }

    /// Tracker at its specified accuracy and sub-pixel mark detection on a
    /// flat plate.
    pub fn glass() -> Self {
        Self {
            tracker_sigma_mm: 0.035,
            image_sigma_px: 0.05,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tracker_sigma_mm", self.tracker_sigma_mm),
            ("image_sigma_px", self.image_sigma_px),
            ("planarity_amplitude_mm", self.planarity_amplitude_mm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if !self.nest_offset_error_mm.is_finite() {
            return Err(Error::InvalidConfig(
                "nest_offset_error_mm is not finite".into(),
            ));
        }
        Ok(())
    }

    fn tracker(&self) -> Normal<f64> {
        Normal::new(0.0, self.tracker_sigma_mm).expect("validated sigma")
    }

    fn image(&self) -> Normal<f64> {
        Normal::new(0.0, self.image_sigma_px).expect("validated sigma")
    }
}

/// Wheel contact points in RCS. The robot reflector is the RCS origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub wheels: [Vector3<f64>; 3],
}

impl RobotModel {
    pub fn new(wheels: [Vector3<f64>; 3]) -> Result<Self> {
        let area = (wheels[1] - wheels[0])
            .cross(&(wheels[2] - wheels[0]))
            .norm()
            / 2.0;
        if !(area > 1.0) {
            return Err(Error::InvalidConfig(
                "wheel contact points are collinear".into(),
            ));
        }
        Ok(Self { wheels })
    }

    /// Reflector height above the wheel support plane.
    pub fn smr_height_mm(&self) -> f64 {
        let n = self.support_normal();
        -n.dot(&self.wheels[0])
    }

    fn support_normal(&self) -> Vector3<f64> {
        let n = (self.wheels[1] - self.wheels[0])
            .cross(&(self.wheels[2] - self.wheels[0]))
            .normalize();
        if n.z < 0.0 {
            -n
        } else {
            n
        }
    }
}

/// Smooth quadratic sag of the plate, `w(u, v)` on normalised plate
/// coordinates, scaled so that the largest |w| over the extent equals the
/// amplitude. Positive values point along PCS +z, into the plate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateDeformation {
    pub amplitude_mm: f64,
    /// `a u² + b v² + c uv + d u + e v`.
    pub coefficients: [f64; 5],
}

impl PlateDeformation {
    pub const DEFAULT_SHAPE: [f64; 5] = [1.0, 0.5, 0.3, 0.2, -0.1];

    pub fn flat() -> Self {
        Self {
            amplitude_mm: 0.0,
            coefficients: Self::DEFAULT_SHAPE,
        }
    }

    fn shape(&self, u: f64, v: f64) -> f64 {
        let [a, b, c, d, e] = self.coefficients;
        a * u * u + b * v * v + c * u * v + d * u + e * v
    }

    fn shape_gradient(&self, u: f64, v: f64) -> (f64, f64) {
        let [a, b, c, d, e] = self.coefficients;
        (2.0 * a * u + c * v + d, 2.0 * b * v + c * u + e)
    }

    /// Largest |shape| on [-1, 1]²: corners, edge extrema and the interior
    /// stationary point.
    fn shape_max(&self) -> f64 {
        let [a, b, c, d, e] = self.coefficients;
        let mut candidates = vec![(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];
        for s in [-1.0, 1.0] {
            if b != 0.0 {
                candidates.push((s, -(c * s + e) / (2.0 * b)));
            }
            if a != 0.0 {
                candidates.push((-(c * s + d) / (2.0 * a), s));
            }
        }
        let det = 4.0 * a * b - c * c;
        if det.abs() > 1e-15 {
            candidates.push(((c * e - 2.0 * b * d) / det, (c * d - 2.0 * a * e) / det));
        }
        candidates
            .into_iter()
            .filter(|(u, v): &(f64, f64)| u.abs() <= 1.0 && v.abs() <= 1.0)
            .map(|(u, v)| self.shape(u, v).abs())
            .fold(0.0, f64::max)
    }

    fn scale(&self) -> f64 {
        if self.amplitude_mm == 0.0 {
            return 0.0;
        }
        let m = self.shape_max();
        if m > 0.0 {
            self.amplitude_mm / m
        } else {
            0.0
        }
    }

    /// Sag at PCS `(x, y)` and its gradient.
    pub fn eval(&self, extent: &PlateExtent, x: f64, y: f64) -> (f64, Vector2<f64>) {
        let k = self.scale();
        if k == 0.0 {
            return (0.0, Vector2::zeros());
        }
        let (cx, cy) = extent.center();
        let (hx, hy) = extent.half_sizes();
        let (u, v) = ((x - cx) / hx, (y - cy) / hy);
        let (gu, gv) = self.shape_gradient(u, v);
        (k * self.shape(u, v), Vector2::new(k * gu / hx, k * gv / hy))
    }
}

/// Inclined floor plane through the ACS origin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Floor {
    pub inclination_rad: f64,
    /// Direction of steepest ascent, measured from ACS x.
    pub azimuth_rad: f64,
}

impl Floor {
    pub fn normal(&self) -> Vector3<f64> {
        let (s, c) = self.inclination_rad.sin_cos();
        Vector3::new(-s * self.azimuth_rad.cos(), -s * self.azimuth_rad.sin(), c)
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let n = self.normal();
        -(n.x * x + n.y * y) / n.z
    }

    pub fn point(&self, x: f64, y: f64) -> Point3<f64> {
        Point3::new(x, y, self.height(x, y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotPlacement {
    /// ACS position of the robot reflector, horizontal components.
    pub x_mm: f64,
    pub y_mm: f64,
    /// Azimuth of the robot's x-axis projected onto the ACS xy-plane.
    pub yaw_rad: f64,
}

impl RobotPlacement {
    pub fn new(x_mm: f64, y_mm: f64, yaw_rad: f64) -> Self {
        Self {
            x_mm,
            y_mm,
            yaw_rad,
        }
    }

    pub fn heading(&self) -> Vector2<f64> {
        Vector2::new(self.yaw_rad.cos(), self.yaw_rad.sin())
    }

    pub fn advanced(&self, distance_mm: f64) -> Self {
        let h = self.heading() * distance_mm;
        Self::new(self.x_mm + h.x, self.y_mm + h.y, self.yaw_rad)
    }
}

/// Which surface the robot rests on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ground {
    Plate,
    Floor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    pub camera: CameraModel,
    /// Ground-truth `rob <- cam`.
    pub h_rob_cam: RigidTransform,
    /// True `abs <- ref` of the undeformed plate.
    pub h_abs_ref: RigidTransform,
    /// Nominal plate as handed to the referencing pipeline.
    pub plate: ReferencingPlate,
    pub robot: RobotModel,
    pub deformation: PlateDeformation,
    /// True nest offset minus the nominal one.
    pub nest_offset_error_mm: f64,
    pub floor: Floor,
    pub seed: u64,
}

/// Robot basis with z along `n` and x the tilt-compensated heading: its
/// horizontal projection points along `yaw`.
pub fn heading_basis(n: &Vector3<f64>, yaw: f64) -> Rotation3<f64> {
    let h = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let x = (h - Vector3::z() * (h.dot(n) / n.z)).normalize();
    let y = n.cross(&x);
    Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, *n]))
}

impl SimWorld {
    /// Demo rig: 600×400 mm plate with a 20 mm mark grid, compact
    /// differential-drive robot, camera 150 mm above the floor.
    pub fn demo() -> Self {
        let camera = CameraModel::new(
            8.0,
            0.00345,
            0.00345,
            1230.2,
            1019.7,
            [-0.08, 0.02, 0.0],
            2048,
            2448,
        )
        .expect("demo camera");
        Self {
            camera,
            h_rob_cam: demo_hand_eye(),
            h_abs_ref: RigidTransform::from_parts(
                FrameId::Abs,
                FrameId::Ref,
                rot_z(25f64.to_radians()) * rot_x(PI),
                Vector3::new(2500.0, 1200.0, 19.0),
            ),
            plate: demo_plate(),
            robot: demo_robot(),
            deformation: PlateDeformation::flat(),
            nest_offset_error_mm: 0.0,
            floor: Floor::default(),
            seed: 0,
        }
    }

    /// Demo rig with randomised hand-eye pose and plate pose.
    pub fn random(seed: u64) -> Self {
        let mut rng = trial_rng(seed, u64::MAX);
        let mut u = |a: f64| rng.random_range(-a..=a);
        let deg = |d: f64| d.to_radians();
        let mut world = Self::demo();
        world.h_rob_cam = RigidTransform::from_parts(
            FrameId::Rob,
            FrameId::Cam,
            rot_z(deg(u(180.0))) * rot_y(deg(u(2.0))) * rot_x(PI + deg(u(2.0))),
            Vector3::new(80.0 + u(10.0), -20.0 + u(10.0), -350.0 + u(5.0)),
        );
        world.h_abs_ref = RigidTransform::from_parts(
            FrameId::Abs,
            FrameId::Ref,
            rot_z(deg(u(180.0))) * rot_x(deg(u(0.5))) * rot_y(deg(u(0.5))) * rot_x(PI),
            Vector3::new(u(5000.0), u(5000.0), 19.0 + u(50.0)),
        );
        world.seed = seed;
        world
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Applies the systematic parts of a noise configuration.
    pub fn with_noise_faults(&self, noise: &NoiseConfig) -> Self {
        let mut w = self.clone();
        if noise.planarity_amplitude_mm != 0.0 {
            w.deformation.amplitude_mm = noise.planarity_amplitude_mm;
        }
        w.nest_offset_error_mm += noise.nest_offset_error_mm;
        w
    }

    /// Sag of the true plate at PCS `(x, y)`.
    pub fn plate_sag(&self, x: f64, y: f64) -> f64 {
        self.deformation.eval(self.plate.extent(), x, y).0
    }

    /// Per-mark z perturbation of the true plate.
    pub fn mark_perturbations(&self) -> BTreeMap<u32, f64> {
        self.plate
            .marks()
            .map(|m| (m.id, self.plate_sag(m.x, m.y)))
            .collect()
    }

    /// True ACS position of a target mark.
    pub fn mark_position(&self, mark: &TargetMark) -> Point3<f64> {
        self.h_abs_ref
            .transform_point(&Point3::new(mark.x, mark.y, self.plate_sag(mark.x, mark.y)))
    }

    /// True ACS centre of the reflector seated in nest `id`.
    pub fn nest_smr_position(&self, id: NestId) -> Point3<f64> {
        let n = self.plate.nest(id);
        let delta = self.plate.nest_offset_mm() + self.nest_offset_error_mm;
        self.h_abs_ref.transform_point(&Point3::new(
            n.x,
            n.y,
            n.z + self.plate_sag(n.x, n.y) - delta,
        ))
    }

    /// ACS height of the ground surface at `(x, y)`.
    pub fn ground_height(&self, ground: Ground, x: f64, y: f64) -> Result<f64> {
        match ground {
            Ground::Floor => Ok(self.floor.height(x, y)),
            Ground::Plate => self.plate_surface_at(x, y).map(|p| p.z),
        }
    }

    /// Point of the (deformed) plate surface above or below ACS `(x, y)`.
    fn plate_surface_at(&self, x: f64, y: f64) -> Result<Point3<f64>> {
        let r = self.h_abs_ref.rotation().matrix();
        let t = self.h_abs_ref.translation();
        let local = self
            .h_abs_ref
            .inverse()
            .transform_point(&Point3::new(x, y, t.z));
        let (mut u, mut v) = (local.x, local.y);
        let extent = self.plate.extent();
        for _ in 0..50 {
            let (w, g) = self.deformation.eval(extent, u, v);
            let p = r * Vector3::new(u, v, w) + t;
            let f = Vector2::new(p.x - x, p.y - y);
            if f.norm() < 1e-12 {
                break;
            }
            let du = r * Vector3::new(1.0, 0.0, g.x);
            let dv = r * Vector3::new(0.0, 1.0, g.y);
            let j = Matrix2::new(du.x, dv.x, du.y, dv.y);
            let step = j.try_inverse().ok_or_else(|| {
                Error::InfeasiblePlacement("plate is seen edge-on from above".into())
            })? * f;
            u -= step.x;
            v -= step.y;
        }
        let eps = 1e-9;
        if u < extent.x_min - eps
            || u > extent.x_max + eps
            || v < extent.y_min - eps
            || v > extent.y_max + eps
        {
            return Err(Error::InfeasiblePlacement(format!(
                "robot wheel at plate coordinates ({u:.1}, {v:.1}) mm is off the plate"
            )));
        }
        let (w, _) = self.deformation.eval(extent, u, v);
        Ok(Point3::from(r * Vector3::new(u, v, w) + t))
    }

    /// True `abs <- rob` with all three wheels resting on the ground.
    pub fn robot_pose(&self, ground: Ground, placement: &RobotPlacement) -> Result<RigidTransform> {
        let wheels = &self.robot.wheels;
        let h = self.robot.smr_height_mm();
        let mut n = Vector3::z();
        let mut origin = Vector3::new(
            placement.x_mm,
            placement.y_mm,
            self.ground_height(ground, placement.x_mm, placement.y_mm)? + h,
        );
        for _ in 0..200 {
            let r = heading_basis(&n, placement.yaw_rad);
            let mut contacts = [Point3::origin(); 3];
            let mut gap = 0.0;
            let mut worst: f64 = 0.0;
            for (k, w) in wheels.iter().enumerate() {
                let p = origin + r * w;
                let z = self.ground_height(ground, p.x, p.y)?;
                contacts[k] = Point3::new(p.x, p.y, z);
                gap += (z - p.z) / 3.0;
                worst = worst.max((z - p.z).abs());
            }
            let mut n_new = (contacts[1] - contacts[0])
                .cross(&(contacts[2] - contacts[0]))
                .normalize();
            if n_new.z < 0.0 {
                n_new = -n_new;
            }
            let turn = (n_new - n).norm();
            if worst < SUPPORT_TOLERANCE_MM && turn < 1e-14 {
                return Ok(RigidTransform::from_parts(
                    FrameId::Abs,
                    FrameId::Rob,
                    r,
                    origin,
                ));
            }
            n = n_new;
            origin.z += gap;
        }
        Err(Error::NonConvergence {
            iterations: 200,
            last_step: f64::NAN,
        })
    }

    /// True `abs <- cam` at a placement.
    pub fn camera_pose(
        &self,
        ground: Ground,
        placement: &RobotPlacement,
    ) -> Result<RigidTransform> {
        self.robot_pose(ground, placement)?.compose(&self.h_rob_cam)
    }

    /// Placement whose principal ray hits ACS `(x, y)` on the ground.
    pub fn aim_at(&self, ground: Ground, target: Vector2<f64>, yaw: f64) -> Result<RobotPlacement> {
        let c = self.h_rob_cam.translation();
        let d = self.h_rob_cam.rotation() * Vector3::z();
        let n_w = self.robot.support_normal();
        let s = n_w.dot(&(self.robot.wheels[0] - c)) / n_w.dot(&d);
        let hit = c + d * s;
        let off = rot_z(yaw) * Vector3::new(hit.x, hit.y, 0.0);
        let mut placement = RobotPlacement::new(target.x - off.x, target.y - off.y, yaw);
        let z_target = self.ground_height(ground, target.x, target.y)?;
        for _ in 0..4 {
            let pose = self.camera_pose(ground, &placement)?;
            let robot_up = self
                .robot_pose(ground, &placement)?
                .transform_vector(&Vector3::z());
            let o = pose.translation();
            let dir = pose.transform_vector(&Vector3::z());
            let s = robot_up.dot(&(Vector3::new(target.x, target.y, z_target) - o))
                / robot_up.dot(&dir);
            let p = o + dir * s;
            placement.x_mm += target.x - p.x;
            placement.y_mm += target.y - p.y;
        }
        Ok(placement)
    }

    /// The two referencing positions. At position 0 the wheel footprint is
    /// centred on the plate; the robot then drives `drive_mm` straight
    /// ahead. The heading follows the plate x-axis, or its opposite when
    /// `reversed`, so a reversed run covers the same footprint.
    pub fn calibration_placements(
        &self,
        reversed: bool,
        yaw_offset_rad: f64,
        drive_mm: f64,
    ) -> (RobotPlacement, RobotPlacement) {
        let extent = self.plate.extent();
        let (cx, cy) = extent.center();
        let centre = self.h_abs_ref.transform_point(&Point3::new(cx, cy, 0.0));
        let plate_x = self.h_abs_ref.transform_vector(&Vector3::x());
        let yaw = plate_x.y.atan2(plate_x.x) + if reversed { PI } else { 0.0 } + yaw_offset_rad;
        let xs = self.robot.wheels.map(|w| w.x);
        let ys = self.robot.wheels.map(|w| w.y);
        let min = |a: [f64; 3]| a.iter().copied().fold(f64::INFINITY, f64::min);
        let max = |a: [f64; 3]| a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mid =
            rot_z(yaw) * Vector3::new((min(xs) + max(xs)) / 2.0, (min(ys) + max(ys)) / 2.0, 0.0);
        let p0 = RobotPlacement::new(centre.x - mid.x, centre.y - mid.y, yaw);
        (p0, p0.advanced(drive_mm))
    }

    /// Scene frame of the undeformed plate seen from `placement`.
    pub fn true_result(&self, placement: &RobotPlacement) -> Result<ReferencingResult> {
        let h_cam_ref = self
            .camera_pose(Ground::Plate, placement)?
            .inverse()
            .compose(&self.h_abs_ref)?;
        let scene = build_rectification_map(&self.camera, &h_cam_ref)?;
        ReferencingResult::from_hand_eye(self.h_rob_cam.clone(), scene, Provenance::External)
    }

    fn visible_marks(&self, h_cam_abs: &RigidTransform) -> Vec<(u32, ImagePoint)> {
        self.plate
            .marks()
            .filter_map(|m| {
                project(&self.camera, h_cam_abs, &self.mark_position(m))
                    .ok()
                    .map(|q| (m.id, q))
            })
            .collect()
    }
}

fn demo_hand_eye() -> RigidTransform {
    RigidTransform::from_parts(
        FrameId::Rob,
        FrameId::Cam,
        rot_z(2.5f64.to_radians()) * rot_y((-1.2f64).to_radians()) * rot_x(180.7f64.to_radians()),
        Vector3::new(80.0, -20.0, -350.0),
    )
}

pub fn demo_robot() -> RobotModel {
    RobotModel::new([
        Vector3::new(0.0, 100.0, -500.0),
        Vector3::new(0.0, -100.0, -500.0),
        Vector3::new(120.0, 0.0, -500.0),
    ])
    .expect("demo robot")
}

pub fn demo_plate() -> ReferencingPlate {
    let mut marks = Vec::new();
    let mut id = 0;
    for j in 0..13 {
        for i in 0..21 {
            marks.push(TargetMark {
                id,
                x: -200.0 + 20.0 * i as f64,
                y: -120.0 + 20.0 * j as f64,
            });
            id += 1;
        }
    }
    ReferencingPlate::new(
        marks,
        [
            Point3::new(-260.0, -170.0, 0.0),
            Point3::new(260.0, -170.0, 0.0),
            Point3::new(0.0, 175.0, 0.0),
        ],
        DEFAULT_NEST_OFFSET_MM,
        PlateExtent {
            x_min: -300.0,
            y_min: -200.0,
            x_max: 300.0,
            y_max: 200.0,
        },
    )
    .expect("demo plate")
}

fn add_noise<R: Rng + ?Sized>(p: Point3<f64>, dist: &Normal<f64>, rng: &mut R) -> Point3<f64> {
    if dist.std_dev() == 0.0 {
        return p;
    }
    p + Vector3::new(dist.sample(rng), dist.sample(rng), dist.sample(rng))
}

fn add_pixel_noise<R: Rng + ?Sized>(q: ImagePoint, dist: &Normal<f64>, rng: &mut R) -> ImagePoint {
    if dist.std_dev() == 0.0 {
        return q;
    }
    ImagePoint::new(q.row + dist.sample(rng), q.col + dist.sample(rng))
}

/// One referencing run: tracker readings of the three nest reflectors and
/// the robot reflector at both placements, plus the plate image at
/// placement 0.
pub fn simulate_referencing_session<R: Rng + ?Sized>(
    world: &SimWorld,
    noise: &NoiseConfig,
    placement0: &RobotPlacement,
    placement1: &RobotPlacement,
    rng: &mut R,
) -> Result<ReferencingSession> {
    noise.validate()?;
    let world = world.with_noise_faults(noise);
    let dx = placement1.x_mm - placement0.x_mm;
    let dy = placement1.y_mm - placement0.y_mm;
    if dx.hypot(dy) == 0.0 {
        return Err(Error::InfeasiblePlacement(
            "the two referencing placements coincide".into(),
        ));
    }
    let poses = [
        world.robot_pose(Ground::Plate, placement0)?,
        world.robot_pose(Ground::Plate, placement1)?,
    ];
    // Only placement 0 is imaged.
    let image = world.visible_marks(&poses[0].compose(&world.h_rob_cam)?.inverse());
    if image.len() < MIN_VISIBLE_MARKS {
        return Err(Error::TargetNotVisible(format!(
            "{} marks visible from placement 0, need {MIN_VISIBLE_MARKS}",
            image.len()
        )));
    }

    let tracker_noise = noise.tracker();
    let image_noise = noise.image();
    let image_observation = image
        .into_iter()
        .map(|(mark_id, q)| MarkObservation {
            mark_id,
            point: add_pixel_noise(q, &image_noise, rng),
        })
        .collect();
    let mut tracker = Vec::with_capacity(5);
    for id in NestId::ALL {
        tracker.push(TrackerMeasurement {
            target: TrackerTarget::Nest(id),
            position: add_noise(world.nest_smr_position(id), &tracker_noise, rng),
        });
    }
    for (k, pose) in poses.iter().enumerate() {
        tracker.push(TrackerMeasurement {
            target: TrackerTarget::RobotSmr { position: k as u8 },
            position: add_noise(Point3::from(*pose.translation()), &tracker_noise, rng),
        });
    }
    Ok(ReferencingSession {
        camera: world.camera.clone(),
        plate: world.plate.clone(),
        image_observation,
        tracker,
    })
}

/// Image of a floor mark and the robot reflector reading at a placement.
pub fn simulate_mark_observation<R: Rng + ?Sized>(
    world: &SimWorld,
    noise: &NoiseConfig,
    placement: &RobotPlacement,
    mark: &Point3<f64>,
    rng: &mut R,
) -> Result<(ImagePoint, TrackerMeasurement)> {
    noise.validate()?;
    let pose = world.robot_pose(Ground::Floor, placement)?;
    let h_cam_abs = pose.compose(&world.h_rob_cam)?.inverse();
    let q = project(&world.camera, &h_cam_abs, mark).map_err(|e| {
        Error::MarkNotVisible(format!(
            "mark ({:.1}, {:.1}, {:.1}) from placement ({:.1}, {:.1}, {:.2} deg): {e}",
            mark.x,
            mark.y,
            mark.z,
            placement.x_mm,
            placement.y_mm,
            placement.yaw_rad.to_degrees()
        ))
    })?;
    let q = add_pixel_noise(q, &noise.image(), rng);
    let reading = TrackerMeasurement {
        target: TrackerTarget::RobotSmr { position: 0 },
        position: add_noise(Point3::from(*pose.translation()), &noise.tracker(), rng),
    };
    Ok((q, reading))
}

/// Hand-eye error of one simulated calibration against the world's truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialError {
    pub rotation_rad: f64,
    pub translation_mm: f64,
}

/// Repeated simulate-then-calibrate runs. Trial `k` uses stream `k` of
/// `seed`, so trial 0 reproduces a single run with the same seed.
pub fn calibration_trials(
    world: &SimWorld,
    noise: &NoiseConfig,
    placements: (&RobotPlacement, &RobotPlacement),
    seed: u64,
    trials: usize,
) -> Result<Vec<TrialError>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = trial_rng(seed, k);
            let session =
                simulate_referencing_session(world, noise, placements.0, placements.1, &mut rng)?;
            let result = compute_rob_h_cam(&session)?;
            let (rotation_rad, translation_mm) = result.h_rob_cam().difference(&world.h_rob_cam);
            Ok(TrialError {
                rotation_rad,
                translation_mm,
            })
        })
        .collect()
}

/// The plate sagging by up to `amplitude_mm`. The hand-eye truth is left
/// untouched.
pub fn inject_wooden_plate(world: &SimWorld, amplitude_mm: f64) -> Result<SimWorld> {
    if !(amplitude_mm.is_finite() && amplitude_mm >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "planarity amplitude must be >= 0, got {amplitude_mm}"
        )));
    }
    let mut w = world.clone();
    w.deformation.amplitude_mm = amplitude_mm;
    Ok(w)
}

/// A systematic error source. Faults either alter the simulated world or
/// corrupt a finished calibration.
pub trait Fault: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn apply_world(&self, world: &SimWorld) -> Result<SimWorld> {
        Ok(world.clone())
    }

    fn apply_result(&self, result: &ReferencingResult) -> Result<ReferencingResult> {
        Ok(result.clone())
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WoodenPlate {
    pub amplitude_mm: f64,
}

impl Fault for WoodenPlate {
    fn name(&self) -> &'static str {
        "wooden_plate"
    }

    fn apply_world(&self, world: &SimWorld) -> Result<SimWorld> {
        inject_wooden_plate(world, self.amplitude_mm)
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NestOffset {
    pub error_mm: f64,
}

impl Fault for NestOffset {
    fn name(&self) -> &'static str {
        "nest_offset"
    }

    fn apply_world(&self, world: &SimWorld) -> Result<SimWorld> {
        let mut w = world.clone();
        w.nest_offset_error_mm += self.error_mm;
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloorInclination {
    pub angle_deg: f64,
    #[serde(default)]
    pub azimuth_deg: f64,
}

impl Fault for FloorInclination {
    fn name(&self) -> &'static str {
        "floor_inclination"
    }

    fn apply_world(&self, world: &SimWorld) -> Result<SimWorld> {
        if !(self.angle_deg.abs() < 45.0) {
            return Err(Error::InvalidConfig(format!(
                "floor inclination {} deg is not plausible",
                self.angle_deg
            )));
        }
        let mut w = world.clone();
        w.floor = Floor {
            inclination_rad: self.angle_deg.to_radians(),
            azimuth_rad: self.azimuth_deg.to_radians(),
        };
        Ok(w)
    }
}

/// Translation error of the calibrated hand-eye pose, in camera axes.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandEyeOffset {
    #[serde(default)]
    pub x_mm: f64,
    #[serde(default)]
    pub y_mm: f64,
    #[serde(default)]
    pub z_mm: f64,
}

impl Fault for HandEyeOffset {
    fn name(&self) -> &'static str {
        "hand_eye_offset"
    }

    fn apply_result(&self, result: &ReferencingResult) -> Result<ReferencingResult> {
        let shift = RigidTransform::from_translation(
            FrameId::Cam,
            FrameId::Cam,
            Vector3::new(self.x_mm, self.y_mm, self.z_mm),
        );
        result.with_hand_eye(result.h_rob_cam().compose(&shift)?)
    }
}

type FaultFactory = fn(&serde_json::Value) -> Result<Box<dyn Fault>>;

fn build<F>(params: &serde_json::Value) -> Result<Box<dyn Fault>>
where
    F: Fault + for<'de> Deserialize<'de> + 'static,
{
    Ok(Box::new(serde_json::from_value::<F>(params.clone())?))
}

/// Named fault constructors.
pub struct FaultRegistry {
    factories: BTreeMap<&'static str, FaultFactory>,
}

impl FaultRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("wooden_plate", build::<WoodenPlate>);
        r.register("nest_offset", build::<NestOffset>);
        r.register("floor_inclination", build::<FloorInclination>);
        r.register("hand_eye_offset", build::<HandEyeOffset>);
        r
    }

    pub fn register(&mut self, name: &'static str, factory: FaultFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(&self, name: &str, params: &serde_json::Value) -> Result<Box<dyn Fault>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown fault '{name}' (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(params)
    }
}

/// Applies every fault's world part in order.
pub fn apply_world_faults(world: &SimWorld, faults: &[Box<dyn Fault>]) -> Result<SimWorld> {
    faults
        .iter()
        .try_fold(world.clone(), |w, f| f.apply_world(&w))
}

/// Applies every fault's result part in order.
pub fn apply_result_faults(
    result: &ReferencingResult,
    faults: &[Box<dyn Fault>],
) -> Result<ReferencingResult> {
    faults
        .iter()
        .try_fold(result.clone(), |r, f| f.apply_result(&r))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless_session(world: &SimWorld) -> ReferencingSession {
        let (p0, p1) = world.calibration_placements(false, 0.0, DEFAULT_DRIVE_MM);
        simulate_referencing_session(world, &NoiseConfig::none(), &p0, &p1, &mut trial_rng(1, 0))
            .unwrap()
    }

    #[test]
    fn demo_round_trip_is_exact() {
        let world = SimWorld::demo();
        let result = compute_rob_h_cam(&noiseless_session(&world)).unwrap();
        let (rot, trans) = result.h_rob_cam().difference(&world.h_rob_cam);
        assert!(rot < 1e-8, "rotation error {rot:e}");
        assert!(trans < 1e-6, "translation error {trans:e}");
    }

    #[test]
    fn sessions_are_deterministic() {
        let world = SimWorld::random(3);
        let (p0, p1) = world.calibration_placements(false, 0.0, DEFAULT_DRIVE_MM);
        let a = simulate_referencing_session(
            &world,
            &NoiseConfig::glass(),
            &p0,
            &p1,
            &mut trial_rng(9, 4),
        )
        .unwrap();
        let b = simulate_referencing_session(
            &world,
            &NoiseConfig::glass(),
            &p0,
            &p1,
            &mut trial_rng(9, 4),
        )
        .unwrap();
        assert_eq!(a, b);
        let c = simulate_referencing_session(
            &world,
            &NoiseConfig::glass(),
            &p0,
            &p1,
            &mut trial_rng(9, 5),
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn target_out_of_view_is_reported() {
        let world = SimWorld::demo();
        let (p0, _) = world.calibration_placements(false, 0.0, DEFAULT_DRIVE_MM);
        // A single mark near a plate corner, far from the camera footprint.
        let sparse = SimWorld {
            plate: ReferencingPlate::new(
                vec![TargetMark {
                    id: 0,
                    x: 250.0,
                    y: 150.0,
                }],
                *world.plate.nests(),
                world.plate.nest_offset_mm(),
                *world.plate.extent(),
            )
            .unwrap(),
            ..world.clone()
        };
        let r = simulate_referencing_session(
            &sparse,
            &NoiseConfig::none(),
            &p0,
            &p0.advanced(100.0),
            &mut trial_rng(0, 0),
        );
        assert!(matches!(r, Err(Error::TargetNotVisible(_))), "{r:?}");

        // Only placement 0 has to see the plate.
        let r = simulate_referencing_session(
            &world,
            &NoiseConfig::none(),
            &p0,
            &p0.advanced(DEFAULT_DRIVE_MM),
            &mut trial_rng(0, 0),
        );
        assert!(r.is_ok(), "{r:?}");
    }

    #[test]
    fn coincident_placements_are_infeasible() {
        let world = SimWorld::demo();
        let (p0, _) = world.calibration_placements(false, 0.0, DEFAULT_DRIVE_MM);
        let err = simulate_referencing_session(
            &world,
            &NoiseConfig::none(),
            &p0,
            &p0,
            &mut trial_rng(0, 0),
        )
        .unwrap_err();
        assert_eq!(err.class(), crate::ErrorClass::Infeasible);
    }

    #[test]
    fn wheels_rest_on_surface() {
        let mut world = inject_wooden_plate(&SimWorld::random(11), 1.0).unwrap();
        world.floor = Floor {
            inclination_rad: 0.02,
            azimuth_rad: 0.7,
        };
        let (p0, _) = world.calibration_placements(false, 0.05, DEFAULT_DRIVE_MM);
        for (ground, placement) in [
            (Ground::Plate, p0),
            (Ground::Floor, RobotPlacement::new(100.0, -50.0, 1.0)),
        ] {
            let pose = world.robot_pose(ground, &placement).unwrap();
            for w in &world.robot.wheels {
                let p = pose.transform_point(&Point3::from(*w));
                let z = world.ground_height(ground, p.x, p.y).unwrap();
                assert!((p.z - z).abs() < 1e-9);
            }
            assert_eq!(pose.translation().x, placement.x_mm);
            assert_eq!(pose.translation().y, placement.y_mm);
        }
    }

    #[test]
    fn deformation_amplitude_is_the_maximum() {
        let d = PlateDeformation {
            amplitude_mm: 1.0,
            coefficients: PlateDeformation::DEFAULT_SHAPE,
        };
        let extent = *demo_plate().extent();
        let mut worst: f64 = 0.0;
        for i in 0..=200 {
            for j in 0..=200 {
                let x = extent.x_min + (extent.x_max - extent.x_min) * i as f64 / 200.0;
                let y = extent.y_min + (extent.y_max - extent.y_min) * j as f64 / 200.0;
                worst = worst.max(d.eval(&extent, x, y).0.abs());
            }
        }
        assert!(worst <= 1.0 + 1e-12 && worst > 0.99, "{worst}");
        assert_eq!(PlateDeformation::flat().eval(&extent, 10.0, 20.0).0, 0.0);
    }

    #[test]
    fn zero_amplitude_leaves_world_unchanged() {
        let world = SimWorld::demo();
        assert_eq!(inject_wooden_plate(&world, 0.0).unwrap(), world);
        assert!(inject_wooden_plate(&world, -1.0).is_err());
    }

    #[test]
    fn tiny_deformation_is_continuous() {
        let world = SimWorld::demo();
        let flat = compute_rob_h_cam(&noiseless_session(&world)).unwrap();
        let bent = inject_wooden_plate(&world, 1e-6).unwrap();
        let r = compute_rob_h_cam(&noiseless_session(&bent)).unwrap();
        let (_, trans) = r.h_rob_cam().difference(flat.h_rob_cam());
        assert!(trans < 1e-4, "{trans:e}");
    }

    #[test]
    fn robot_smr_reading_equals_true_translation() {
        let world = SimWorld::random(5);
        let (p0, p1) = world.calibration_placements(false, 0.0, DEFAULT_DRIVE_MM);
        let s = simulate_referencing_session(
            &world,
            &NoiseConfig::none(),
            &p0,
            &p1,
            &mut trial_rng(0, 0),
        )
        .unwrap();
        for (k, p) in [p0, p1].iter().enumerate() {
            let pose = world.robot_pose(Ground::Plate, p).unwrap();
            assert_eq!(
                s.robot_reading(k as u8).unwrap(),
                Point3::from(*pose.translation())
            );
        }
    }

    #[test]
    fn tracker_noise_has_configured_sigma() {
        let world = SimWorld::demo();
        let noise = NoiseConfig {
            tracker_sigma_mm: 0.035,
            ..NoiseConfig::none()
        };
        let placement = RobotPlacement::new(0.0, 0.0, 0.0);
        let truth = world.robot_pose(Ground::Floor, &placement).unwrap();
        let mark = world.floor.point(120.0, -20.0);
        let mut rng = trial_rng(77, 0);
        let mut sum_sq = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let (_, m) =
                simulate_mark_observation(&world, &noise, &placement, &mark, &mut rng).unwrap();
            sum_sq += (m.position - Point3::from(*truth.translation())).norm_squared();
        }
        let sigma = (sum_sq / (3.0 * n as f64)).sqrt();
        assert!((sigma / 0.035 - 1.0).abs() < 0.05, "{sigma}");
    }

    #[test]
    fn axial_mark_lands_on_principal_point() {
        let world = SimWorld::demo();
        let target = Vector2::new(300.0, 400.0);
        let placement = world.aim_at(Ground::Floor, target, 0.4).unwrap();
        let mark = world.floor.point(target.x, target.y);
        let (q, _) = simulate_mark_observation(
            &world,
            &NoiseConfig::none(),
            &placement,
            &mark,
            &mut trial_rng(0, 0),
        )
        .unwrap();
        assert!((q.row - world.camera.cy_px).abs() < 1e-6);
        assert!((q.col - world.camera.cx_px).abs() < 1e-6);

        let far = world.floor.point(target.x + 500.0, target.y);
        let r = simulate_mark_observation(
            &world,
            &NoiseConfig::none(),
            &placement,
            &far,
            &mut trial_rng(0, 0),
        );
        assert!(matches!(r, Err(Error::MarkNotVisible(_))));
    }

    #[test]
    fn registry_builds_faults() {
        let reg = FaultRegistry::builtin();
        let f = reg
            .create("wooden_plate", &serde_json::json!({"amplitude_mm": 0.5}))
            .unwrap();
        assert_eq!(f.name(), "wooden_plate");
        let w = f.apply_world(&SimWorld::demo()).unwrap();
        assert_eq!(w.deformation.amplitude_mm, 0.5);
        assert!(reg.create("gremlins", &serde_json::json!({})).is_err());
        assert!(reg
            .create(
                "nest_offset",
                &serde_json::json!({"error_mm": 1, "bogus": 2})
            )
            .is_err());

        let world = SimWorld::demo();
        let (p0, _) = world.calibration_placements(false, 0.0, DEFAULT_DRIVE_MM);
        let truth = world.true_result(&p0).unwrap();
        let off = reg
            .create("hand_eye_offset", &serde_json::json!({"x_mm": 1.0}))
            .unwrap();
        let bad = off.apply_result(&truth).unwrap();
        let (_, d) = bad.h_rob_cam().difference(truth.h_rob_cam());
        assert!((d - 1.0).abs() < 1e-12);
    }
}
