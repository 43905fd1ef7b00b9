//! JSON file formats: camera, plate, session, result and world
//! configuration. Unknown keys are rejected unless parsing is lenient.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{Matrix4, UnitQuaternion, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, ImagePoint, SceneFrame};
use crate::error::{Error, Result};
use crate::geometry::{rot_x, rot_y, rot_z, FrameId, Point3, RigidTransform};
use crate::plate::{NestId, PlateExtent, ReferencingPlate, TargetMark};
use crate::referencing::{
    MarkObservation, Provenance, ReferencingResult, ReferencingSession, TrackerMeasurement,
    TrackerTarget,
};
use crate::sim::{
    apply_world_faults, Fault, FaultRegistry, NoiseConfig, RobotModel, RobotPlacement, SimWorld,
    DEFAULT_DRIVE_MM,
};

pub const UNITS: &str = "mm";
/// Agreement required between the stored matrix and quaternion.
pub const QUATERNION_TOLERANCE: f64 = 1e-9;

/// Parses JSON, rejecting unknown keys unless `lenient`.
pub fn parse_json<T: DeserializeOwned>(text: &str, lenient: bool) -> Result<T> {
    let mut unknown = Vec::new();
    let de = &mut serde_json::Deserializer::from_str(text);
    let value: T = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))?;
    if !unknown.is_empty() {
        if lenient {
            warn!("ignoring unknown keys: {}", unknown.join(", "));
        } else {
            return Err(Error::InvalidConfig(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )));
        }
    }
    Ok(value)
}

/// Rounds to the fixed output precision of 9 decimals.
pub fn round9(v: f64) -> f64 {
    let r = (v * 1e9).round() / 1e9;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

pub fn matrix_rows(h: &RigidTransform) -> [[f64; 4]; 4] {
    let m = h.matrix();
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

pub fn transform_from_rows(
    to: FrameId,
    from: FrameId,
    rows: &[[f64; 4]; 4],
) -> Result<RigidTransform> {
    let m = Matrix4::from_fn(|i, j| rows[i][j]);
    RigidTransform::from_matrix(to, from, &m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub focal_mm: f64,
    pub sx_mm: f64,
    pub sy_mm: f64,
    pub cx_px: f64,
    pub cy_px: f64,
    #[serde(default)]
    pub k: [f64; 3],
    pub rows: u32,
    pub cols: u32,
}

impl From<&CameraModel> for CameraFile {
    fn from(c: &CameraModel) -> Self {
        Self {
            focal_mm: c.focal_mm,
            sx_mm: c.sx_mm,
            sy_mm: c.sy_mm,
            cx_px: c.cx_px,
            cy_px: c.cy_px,
            k: c.k,
            rows: c.rows,
            cols: c.cols,
        }
    }
}

impl CameraFile {
    pub fn to_model(&self) -> Result<CameraModel> {
        CameraModel::new(
            self.focal_mm,
            self.sx_mm,
            self.sy_mm,
            self.cx_px,
            self.cy_px,
            self.k,
            self.rows,
            self.cols,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkEntry {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XyzEntry {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtentEntry {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateFile {
    pub marks: Vec<MarkEntry>,
    /// Keys `r`, `g`, `b`.
    pub nests: BTreeMap<String, XyzEntry>,
    pub delta_mm: f64,
    pub extent_mm: ExtentEntry,
}

impl PlateFile {
    pub fn from_plate(p: &ReferencingPlate, round: bool) -> Self {
        let f = |v: f64| if round { round9(v) } else { v };
        Self {
            marks: p
                .marks()
                .map(|m| MarkEntry {
                    id: m.id,
                    x: f(m.x),
                    y: f(m.y),
                })
                .collect(),
            nests: NestId::ALL
                .iter()
                .map(|&id| {
                    let n = p.nest(id);
                    (
                        id.key().to_owned(),
                        XyzEntry {
                            x: f(n.x),
                            y: f(n.y),
                            z: f(n.z),
                        },
                    )
                })
                .collect(),
            delta_mm: f(p.nest_offset_mm()),
            extent_mm: {
                let e = p.extent();
                ExtentEntry {
                    x_min: e.x_min,
                    y_min: e.y_min,
                    x_max: e.x_max,
                    y_max: e.y_max,
                }
            },
        }
    }

    pub fn to_plate(&self) -> Result<ReferencingPlate> {
        let mut nests = [Point3::origin(); 3];
        let mut seen = [false; 3];
        for (key, p) in &self.nests {
            let id = NestId::parse(key)?;
            nests[id.index()] = Point3::new(p.x, p.y, p.z);
            seen[id.index()] = true;
        }
        if let Some(missing) = NestId::ALL.iter().find(|id| !seen[id.index()]) {
            return Err(Error::UnknownNest(missing.key().to_owned()));
        }
        let e = self.extent_mm;
        ReferencingPlate::new(
            self.marks
                .iter()
                .map(|m| TargetMark {
                    id: m.id,
                    x: m.x,
                    y: m.y,
                })
                .collect(),
            nests,
            self.delta_mm,
            PlateExtent {
                x_min: e.x_min,
                y_min: e.y_min,
                x_max: e.x_max,
                y_max: e.y_max,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerEntry {
    /// `n_r`, `n_g`, `n_b` or `robot_smr`.
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_index: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub mark_id: u32,
    pub row: f64,
    pub col: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "rob_H_cam")]
    pub rob_h_cam: [[f64; 4]; 4],
    pub seed: u64,
    #[serde(default)]
    pub faults: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFile {
    pub camera: CameraFile,
    pub plate: PlateFile,
    pub tracker_measurements: Vec<TrackerEntry>,
    pub image_observation: Vec<ImageEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

impl SessionFile {
    /// File form of a session, rounded to the fixed output precision.
    pub fn from_session(s: &ReferencingSession, ground_truth: Option<GroundTruth>) -> Self {
        Self {
            camera: CameraFile::from(&s.camera),
            plate: PlateFile::from_plate(&s.plate, true),
            tracker_measurements: s
                .tracker
                .iter()
                .map(|m| TrackerEntry {
                    id: m.target.label().to_owned(),
                    x: round9(m.position.x),
                    y: round9(m.position.y),
                    z: round9(m.position.z),
                    position_index: match m.target {
                        TrackerTarget::RobotSmr { position } => Some(position),
                        TrackerTarget::Nest(_) => None,
                    },
                })
                .collect(),
            image_observation: s
                .image_observation
                .iter()
                .map(|o| ImageEntry {
                    mark_id: o.mark_id,
                    row: round9(o.point.row),
                    col: round9(o.point.col),
                })
                .collect(),
            // Kept at full precision: rounding would break orthonormality.
            ground_truth,
        }
    }

    pub fn to_session(&self) -> Result<ReferencingSession> {
        let tracker = self
            .tracker_measurements
            .iter()
            .map(|e| {
                let target = if e.id == "robot_smr" {
                    let position = e.position_index.ok_or_else(|| {
                        Error::InvalidSession("robot_smr measurement without position_index".into())
                    })?;
                    TrackerTarget::RobotSmr { position }
                } else {
                    TrackerTarget::Nest(NestId::parse(&e.id)?)
                };
                Ok(TrackerMeasurement {
                    target,
                    position: Point3::new(e.x, e.y, e.z),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let session = ReferencingSession {
            camera: self.camera.to_model()?,
            plate: self.plate.to_plate()?,
            image_observation: self
                .image_observation
                .iter()
                .map(|e| MarkObservation {
                    mark_id: e.mark_id,
                    point: ImagePoint::new(e.row, e.col),
                })
                .collect(),
            tracker,
        };
        session.validate()?;
        Ok(session)
    }

    pub fn ground_truth_transform(&self) -> Result<Option<RigidTransform>> {
        self.ground_truth
            .as_ref()
            .map(|g| transform_from_rows(FrameId::Rob, FrameId::Cam, &g.rob_h_cam))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ResultProvenance {
    pub inputs: Vec<InputHash>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub registration_rms_mm: Vec<f64>,
    pub reprojection_rms_px: Vec<f64>,
    pub reversal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub units: String,
    #[serde(rename = "rob_H_cam")]
    pub rob_h_cam: [[f64; 4]; 4],
    /// `w, x, y, z`.
    #[serde(rename = "rob_H_cam_quaternion_wxyz")]
    pub rob_h_cam_quaternion: [f64; 4],
    #[serde(rename = "scn_H_cam")]
    pub scn_h_cam: [[f64; 4]; 4],
    pub camera: CameraFile,
    pub residuals: Residuals,
    pub provenance: ResultProvenance,
}

impl ResultFile {
    /// Full-precision file form of a result.
    pub fn from_result(r: &ReferencingResult, provenance: ResultProvenance) -> Self {
        let q = r.h_rob_cam().quaternion();
        Self {
            units: UNITS.to_owned(),
            rob_h_cam: matrix_rows(r.h_rob_cam()),
            rob_h_cam_quaternion: [q.w, q.i, q.j, q.k],
            scn_h_cam: matrix_rows(r.h_scn_cam()),
            camera: CameraFile::from(&r.scene().camera),
            residuals: Residuals {
                registration_rms_mm: r.registration_rms_mm(),
                reprojection_rms_px: r.reprojection_rms_px(),
                reversal: matches!(r.provenance(), Provenance::Reversal(_)),
            },
            provenance,
        }
    }

    pub fn to_result(&self) -> Result<ReferencingResult> {
        if self.units != UNITS {
            return Err(Error::InvalidConfig(format!(
                "result units '{}' (expected '{UNITS}')",
                self.units
            )));
        }
        let h_rob_cam = transform_from_rows(FrameId::Rob, FrameId::Cam, &self.rob_h_cam)?;
        let [w, x, y, z] = self.rob_h_cam_quaternion;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        let angle = q.angle_to(&h_rob_cam.quaternion());
        if !(angle <= QUATERNION_TOLERANCE) {
            return Err(Error::InvalidConfig(format!(
                "rob_H_cam matrix and quaternion disagree by {angle:e} rad"
            )));
        }
        let h_scn_cam = transform_from_rows(FrameId::Scn, FrameId::Cam, &self.scn_h_cam)?;
        let scene = SceneFrame::new(self.camera.to_model()?, h_scn_cam)?;
        ReferencingResult::from_hand_eye(h_rob_cam, scene, Provenance::External)
    }
}

/// Pose given as translation and roll/pitch/yaw, `R = Rz(yaw) Ry(pitch) Rx(roll)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub translation_mm: [f64; 3],
    pub rpy_deg: [f64; 3],
}

impl PoseSpec {
    pub fn to_transform(&self, to: FrameId, from: FrameId) -> RigidTransform {
        let [r, p, y] = self.rpy_deg.map(f64::to_radians);
        RigidTransform::from_parts(
            to,
            from,
            rot_z(y) * rot_y(p) * rot_x(r),
            Vector3::from(self.translation_mm),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub name: String,
    #[serde(flatten)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

/// Simulated world and referencing runs. Omitted blocks fall back to the
/// demo rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct WorldConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate: Option<PlateFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_eye: Option<PoseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate_pose: Option<PoseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robot_wheels_mm: Option<[[f64; 3]; 3]>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    /// Explicit referencing placements; computed from the plate otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placements: Option<[RobotPlacementSpec; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drive_mm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotPlacementSpec {
    pub x_mm: f64,
    pub y_mm: f64,
    pub yaw_deg: f64,
}

impl From<RobotPlacementSpec> for RobotPlacement {
    fn from(p: RobotPlacementSpec) -> Self {
        RobotPlacement::new(p.x_mm, p.y_mm, p.yaw_deg.to_radians())
    }
}

/// A world configuration resolved into simulator objects.
#[derive(Debug)]
pub struct ResolvedWorld {
    /// World with all world-side faults applied.
    pub world: SimWorld,
    pub noise: NoiseConfig,
    pub faults: Vec<Box<dyn Fault>>,
    pub placements: (RobotPlacement, RobotPlacement),
    pub reversed_placements: (RobotPlacement, RobotPlacement),
}

impl WorldConfig {
    pub fn resolve(&self, registry: &FaultRegistry) -> Result<ResolvedWorld> {
        self.noise.validate()?;
        let mut world = SimWorld::demo().with_seed(self.seed);
        if let Some(c) = &self.camera {
            world.camera = c.to_model()?;
        }
        if let Some(p) = &self.plate {
            world.plate = p.to_plate()?;
        }
        if let Some(h) = &self.hand_eye {
            world.h_rob_cam = h.to_transform(FrameId::Rob, FrameId::Cam);
        }
        if let Some(h) = &self.plate_pose {
            world.h_abs_ref = h.to_transform(FrameId::Abs, FrameId::Ref);
        }
        if let Some(w) = &self.robot_wheels_mm {
            world.robot = RobotModel::new(w.map(Vector3::from))?;
        }
        let faults = self
            .faults
            .iter()
            .map(|f| registry.create(&f.name, &serde_json::Value::Object(f.params.clone())))
            .collect::<Result<Vec<_>>>()?;
        let world = apply_world_faults(&world, &faults)?;
        let drive = self.drive_mm.unwrap_or(DEFAULT_DRIVE_MM);
        if !(drive.is_finite() && drive >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "drive_mm must be >= 0, got {drive}"
            )));
        }
        let (placements, reversed_placements) = match &self.placements {
            Some([a, b]) => {
                // Reversed run: same spots, heading turned by half a turn.
                let flip = |p: RobotPlacementSpec| RobotPlacementSpec {
                    yaw_deg: p.yaw_deg + 180.0,
                    ..p
                };
                let (ra, rb) = (flip(*a), flip(*b));
                // Start at the old end point so the turned robot drives back.
                (((*a).into(), (*b).into()), (rb.into(), ra.into()))
            }
            None => (
                world.calibration_placements(false, 0.0, drive),
                world.calibration_placements(true, 0.0, drive),
            ),
        };
        Ok(ResolvedWorld {
            world,
            noise: self.noise,
            faults,
            placements,
            reversed_placements,
        })
    }
}
