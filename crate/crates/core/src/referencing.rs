//! The referencing chain: camera pose from the plate image, the scene frame,
//! plate pose in the tracker frame, robot pose from the plate normal and a
//! short drive, and finally `rob <- cam`.

use log::{debug, warn};
use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::camera::{
    build_rectification_map, estimate_plate_pose_from_image, CameraModel, ImagePoint,
    PlatePoseEstimate, SceneFrame,
};
use crate::error::{Error, Result, StageExt};
use crate::geometry::{
    chordal_mean, register_points, second_singular_value, FrameId, Point3, RigidTransform,
    COLLINEARITY_THRESHOLD_MM,
};
use crate::plate::{NestId, ReferencingPlate, MIN_NEST_TRIANGLE_AREA_MM2};

/// Raw robot displacement between the two tracker readings.
pub const MIN_ROBOT_DISPLACEMENT_MM: f64 = 50.0;
/// Displacement left after removing the component along the plate normal.
pub const MIN_PROJECTED_DISPLACEMENT_MM: f64 = 10.0;
/// Registration RMS above this is reported as suspect.
pub const SUSPECT_REGISTRATION_RMS_MM: f64 = 0.5;
pub const MAX_REVERSAL_TRANSLATION_MM: f64 = 2.0;
pub const MAX_REVERSAL_ROTATION_DEG: f64 = 1.0;

pub const STAGE_VALIDATE: &str = "validate";
pub const STAGE_CAMERA_POSE: &str = "estimate_camera_pose";
pub const STAGE_RECTIFICATION: &str = "build_rectification_map";
pub const STAGE_PLATE_POSE: &str = "estimate_plate_pose";
pub const STAGE_PLATE_NORMAL: &str = "plate_normal";
pub const STAGE_ROBOT_POSE: &str = "estimate_robot_pose";
pub const STAGE_COMPOSE: &str = "compose";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrackerTarget {
    /// Reflector seated in a plate nest.
    Nest(NestId),
    /// Robot-mounted reflector at drive position 0 or 1.
    RobotSmr { position: u8 },
}

impl TrackerTarget {
    pub fn label(&self) -> &'static str {
        match self {
            TrackerTarget::Nest(id) => id.tracker_id(),
            TrackerTarget::RobotSmr { .. } => "robot_smr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerMeasurement {
    pub target: TrackerTarget,
    /// Reflector centre in ACS.
    pub position: Point3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkObservation {
    pub mark_id: u32,
    pub point: ImagePoint,
}

/// Everything recorded during one referencing run. The image is taken at
/// robot position 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencingSession {
    pub camera: CameraModel,
    pub plate: ReferencingPlate,
    pub image_observation: Vec<MarkObservation>,
    pub tracker: Vec<TrackerMeasurement>,
}

impl ReferencingSession {
    /// Structural checks. Missing measurements are reported by the stage
    /// that needs them.
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.tracker {
            if m.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSession(format!(
                    "non-finite tracker reading for {}",
                    m.target.label()
                )));
            }
            if let TrackerTarget::RobotSmr { position } = m.target {
                if position > 1 {
                    return Err(Error::InvalidSession(format!(
                        "robot position index {position} (expected 0 or 1)"
                    )));
                }
            }
            if !seen.insert(m.target) {
                return Err(Error::InvalidSession(format!(
                    "duplicate tracker measurement for {:?}",
                    m.target
                )));
            }
        }
        let mut marks = std::collections::BTreeSet::new();
        for obs in &self.image_observation {
            if !obs.point.is_finite() {
                return Err(Error::InvalidSession(format!(
                    "non-finite image point for mark {}",
                    obs.mark_id
                )));
            }
            if self.plate.mark(obs.mark_id).is_none() {
                return Err(Error::UnknownMark(obs.mark_id));
            }
            if !marks.insert(obs.mark_id) {
                return Err(Error::InvalidSession(format!(
                    "mark {} observed twice",
                    obs.mark_id
                )));
            }
        }
        Ok(())
    }

    pub fn tracker_reading(&self, target: TrackerTarget) -> Option<Point3<f64>> {
        self.tracker
            .iter()
            .find(|m| m.target == target)
            .map(|m| m.position)
    }

    pub fn nest_reading(&self, id: NestId) -> Result<Point3<f64>> {
        self.tracker_reading(TrackerTarget::Nest(id))
            .ok_or_else(|| Error::MissingMeasurement(format!("tracker reading for {id}")))
    }

    pub fn robot_reading(&self, position: u8) -> Result<Point3<f64>> {
        self.tracker_reading(TrackerTarget::RobotSmr { position })
            .ok_or_else(|| Error::MissingMeasurement(format!("robot smr at position {position}")))
    }

    /// Applies `g` (`abs' <- abs`) to every tracker reading.
    pub fn transform_tracker(&self, g: &RigidTransform) -> Self {
        let mut out = self.clone();
        for m in &mut out.tracker {
            m.position = g.transform_point(&m.position);
        }
        out
    }
}

/// Intermediate results of one run, kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainIntermediates {
    pub h_cam_ref: RigidTransform,
    pub h_abs_scn: RigidTransform,
    pub h_abs_rob: RigidTransform,
    /// Upward plate normal in ACS.
    pub plate_normal: Vector3<f64>,
    pub normal_flipped: bool,
    pub registration_rms_mm: f64,
    pub registration_suspect: bool,
    pub reprojection_rms_px: f64,
    pub pose_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Single(Box<ChainIntermediates>),
    Reversal(Box<[ReferencingResult; 2]>),
    /// Loaded from a result file or constructed by hand.
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferencingResult {
    h_rob_cam: RigidTransform,
    h_rob_scn: RigidTransform,
    scene: SceneFrame,
    provenance: Provenance,
}

impl ReferencingResult {
    /// Builds a result from `rob <- scn` and the scene frame. The stored
    /// `rob <- cam` is always `h_rob_scn ∘ h_scn_cam`.
    pub fn from_scene(
        h_rob_scn: RigidTransform,
        scene: SceneFrame,
        provenance: Provenance,
    ) -> Result<Self> {
        let h_rob_cam = h_rob_scn.compose(&scene.h_scn_cam)?;
        Ok(Self {
            h_rob_cam,
            h_rob_scn,
            scene,
            provenance,
        })
    }

    /// Builds a result from `rob <- cam` and the scene frame.
    pub fn from_hand_eye(
        h_rob_cam: RigidTransform,
        scene: SceneFrame,
        provenance: Provenance,
    ) -> Result<Self> {
        let h_rob_scn = h_rob_cam.compose(&scene.h_scn_cam.inverse())?;
        Ok(Self {
            h_rob_cam,
            h_rob_scn,
            scene,
            provenance,
        })
    }

    pub fn h_rob_cam(&self) -> &RigidTransform {
        &self.h_rob_cam
    }

    pub fn h_rob_scn(&self) -> &RigidTransform {
        &self.h_rob_scn
    }

    pub fn h_scn_cam(&self) -> &RigidTransform {
        &self.scene.h_scn_cam
    }

    pub fn scene(&self) -> &SceneFrame {
        &self.scene
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn intermediates(&self) -> Option<&ChainIntermediates> {
        match &self.provenance {
            Provenance::Single(c) => Some(c),
            Provenance::Reversal(_) | Provenance::External => None,
        }
    }

    /// Registration RMS per contributing run.
    pub fn registration_rms_mm(&self) -> Vec<f64> {
        self.collect(&|c| c.registration_rms_mm)
    }

    /// Image reprojection RMS per contributing run.
    pub fn reprojection_rms_px(&self) -> Vec<f64> {
        self.collect(&|c| c.reprojection_rms_px)
    }

    fn collect(&self, f: &dyn Fn(&ChainIntermediates) -> f64) -> Vec<f64> {
        match &self.provenance {
            Provenance::Single(c) => vec![f(c)],
            Provenance::Reversal(runs) => runs.iter().flat_map(|r| r.collect(f)).collect(),
            Provenance::External => Vec::new(),
        }
    }

    /// Replaces the hand-eye transform, keeping the scene frame. Used to
    /// study corrupted calibrations.
    pub fn with_hand_eye(&self, h_rob_cam: RigidTransform) -> Result<Self> {
        Self::from_hand_eye(h_rob_cam, self.scene.clone(), self.provenance.clone())
    }
}

/// `cam <- ref` from the observed target marks.
pub fn estimate_camera_pose(session: &ReferencingSession) -> Result<PlatePoseEstimate> {
    let correspondences = session
        .image_observation
        .iter()
        .map(|o| {
            session
                .plate
                .mark(o.mark_id)
                .map(|p| (o.point, p))
                .ok_or(Error::UnknownMark(o.mark_id))
        })
        .collect::<Result<Vec<_>>>()?;
    estimate_plate_pose_from_image(&session.camera, &correspondences)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlatePose {
    pub h_abs_scn: RigidTransform,
    pub rms_mm: f64,
    pub suspect: bool,
}

/// `abs <- scn` by registering the nest reflector centres expressed in SCS
/// against their tracker readings.
pub fn estimate_plate_pose(
    session: &ReferencingSession,
    scene: &SceneFrame,
    h_cam_ref: &RigidTransform,
) -> Result<PlatePose> {
    let h_scn_ref = scene.h_scn_cam.compose(h_cam_ref)?;
    let mut source = Vec::with_capacity(3);
    let mut target = Vec::with_capacity(3);
    for id in NestId::ALL {
        source.push(h_scn_ref.transform_point(&session.plate.smr_position(id)));
        target.push(session.nest_reading(id)?);
    }
    let spread = second_singular_value(&target);
    if spread <= COLLINEARITY_THRESHOLD_MM {
        return Err(Error::DegenerateConfiguration(format!(
            "nest tracker readings are collinear or coincident (second singular value {spread:e} mm)"
        )));
    }
    let reg = register_points(&source, &target)?;
    let suspect = reg.rms_mm > SUSPECT_REGISTRATION_RMS_MM;
    if suspect {
        warn!(
            "plate registration RMS {:.4} mm exceeds {SUSPECT_REGISTRATION_RMS_MM} mm",
            reg.rms_mm
        );
    }
    Ok(PlatePose {
        h_abs_scn: reg.transform(FrameId::Abs, FrameId::Scn),
        rms_mm: reg.rms_mm,
        suspect,
    })
}

/// Unit normal of the plane through three reflector centres, oriented so
/// that it points against `view_dir` (the camera optical axis, same frame).
/// Returns the normal and whether the raw cross product was flipped.
pub fn plate_normal(
    p_r: &Point3<f64>,
    p_g: &Point3<f64>,
    p_b: &Point3<f64>,
    view_dir: &Vector3<f64>,
) -> Result<(Vector3<f64>, bool)> {
    let a = p_b - p_r;
    let b = p_g - p_r;
    let raw = a.cross(&b);
    let scale = a.norm() * b.norm();
    if !(raw.norm() > 1e-12 * scale) || scale == 0.0 {
        return Err(Error::DegenerateConfiguration(
            "plate normal: nest points are collinear".into(),
        ));
    }
    let n = raw.normalize();
    let flip = n.dot(view_dir) > 0.0;
    debug!("plate normal raw {n:?}, view {view_dir:?}, flipped {flip}");
    Ok(if flip { (-n, true) } else { (n, false) })
}

/// `abs <- rob` from the unit plate normal and the robot reflector at two
/// positions: x along the projected motion, z along the normal, origin at
/// position 0.
pub fn estimate_robot_pose(
    p0: &Point3<f64>,
    p1: &Point3<f64>,
    n: &Vector3<f64>,
) -> Result<RigidTransform> {
    let v = p1 - p0;
    let v_perp = v - n * v.dot(n);
    if !(v_perp.norm() > 1e-9 * v.norm().max(1.0)) {
        return Err(Error::DegenerateMotion(format!(
            "motion of {:.6} mm has no component across the plate normal",
            v.norm()
        )));
    }
    let x = v_perp.normalize();
    let y = n.cross(&x);
    Ok(RigidTransform::from_parts(
        FrameId::Abs,
        FrameId::Rob,
        Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, *n])),
        p0.coords,
    ))
}

/// Session-level robot pose with the observability guards.
fn guarded_robot_pose(session: &ReferencingSession, n: &Vector3<f64>) -> Result<RigidTransform> {
    let p0 = session.robot_reading(0)?;
    let p1 = session.robot_reading(1)?;
    let v = p1 - p0;
    if v.norm() <= MIN_ROBOT_DISPLACEMENT_MM {
        return Err(Error::DegenerateMotion(format!(
            "robot moved {:.3} mm, need more than {MIN_ROBOT_DISPLACEMENT_MM} mm",
            v.norm()
        )));
    }
    let projected = (v - n * v.dot(n)).norm();
    if projected <= MIN_PROJECTED_DISPLACEMENT_MM {
        return Err(Error::DegenerateMotion(format!(
            "in-plane motion {projected:.3} mm, need more than {MIN_PROJECTED_DISPLACEMENT_MM} mm"
        )));
    }
    estimate_robot_pose(&p0, &p1, n)
}

/// Runs the complete chain for one session.
pub fn compute_rob_h_cam(session: &ReferencingSession) -> Result<ReferencingResult> {
    session.validate().stage(STAGE_VALIDATE)?;

    let pose = estimate_camera_pose(session).stage(STAGE_CAMERA_POSE)?;
    debug!(
        "camera pose: {} iterations, reprojection RMS {:.4} px",
        pose.iterations, pose.rms_px
    );

    let scene =
        build_rectification_map(&session.camera, &pose.h_cam_ref).stage(STAGE_RECTIFICATION)?;

    let plate = estimate_plate_pose(session, &scene, &pose.h_cam_ref).stage(STAGE_PLATE_POSE)?;

    let (normal, flipped) = (|| {
        let [r, g, b] = NestId::ALL.map(|id| session.nest_reading(id));
        let (r, g, b) = (r?, g?, b?);
        let area = (g - r).cross(&(b - r)).norm() / 2.0;
        if area <= MIN_NEST_TRIANGLE_AREA_MM2 {
            return Err(Error::DegenerateConfiguration(format!(
                "nest triangle area {area:.3} mm² is below {MIN_NEST_TRIANGLE_AREA_MM2} mm²"
            )));
        }
        let view = plate
            .h_abs_scn
            .compose(&scene.h_scn_cam)?
            .transform_vector(&Vector3::z());
        plate_normal(&r, &g, &b, &view)
    })()
    .stage(STAGE_PLATE_NORMAL)?;

    let h_abs_rob = guarded_robot_pose(session, &normal).stage(STAGE_ROBOT_POSE)?;

    let h_rob_scn = h_abs_rob
        .inverse()
        .compose(&plate.h_abs_scn)
        .stage(STAGE_COMPOSE)?;
    let intermediates = ChainIntermediates {
        h_cam_ref: pose.h_cam_ref,
        h_abs_scn: plate.h_abs_scn,
        h_abs_rob,
        plate_normal: normal,
        normal_flipped: flipped,
        registration_rms_mm: plate.rms_mm,
        registration_suspect: plate.suspect,
        reprojection_rms_px: pose.rms_px,
        pose_iterations: pose.iterations,
    };
    ReferencingResult::from_scene(
        h_rob_scn,
        scene,
        Provenance::Single(Box::new(intermediates)),
    )
    .stage(STAGE_COMPOSE)
}

fn average_transforms(a: &RigidTransform, b: &RigidTransform) -> Result<RigidTransform> {
    if a.to_frame() != b.to_frame() || a.from_frame() != b.from_frame() {
        return Err(Error::FrameMismatch {
            expected: a.to_frame().clone(),
            found: b.to_frame().clone(),
        });
    }
    let rotation = chordal_mean(&[*a.rotation(), *b.rotation()])?;
    let translation = (a.translation() + b.translation()) / 2.0;
    Ok(RigidTransform::from_parts(
        a.to_frame().clone(),
        a.from_frame().clone(),
        rotation,
        translation,
    ))
}

/// Instrument reversal: averages two runs taken with opposite robot
/// headings. Both `rob <- cam` and `scn <- cam` are averaged.
pub fn reversal_average(
    run_a: &ReferencingResult,
    run_b: &ReferencingResult,
) -> Result<ReferencingResult> {
    let (rot, trans) = run_a.h_rob_cam.difference(&run_b.h_rob_cam);
    let rot_deg = rot.to_degrees();
    if trans > MAX_REVERSAL_TRANSLATION_MM || rot_deg > MAX_REVERSAL_ROTATION_DEG {
        return Err(Error::InconsistentRuns {
            translation_mm: trans,
            rotation_deg: rot_deg,
            max_translation_mm: MAX_REVERSAL_TRANSLATION_MM,
            max_rotation_deg: MAX_REVERSAL_ROTATION_DEG,
        });
    }
    if run_a == run_b {
        return Ok(run_a.clone());
    }
    let h_rob_cam = average_transforms(&run_a.h_rob_cam, &run_b.h_rob_cam)?;
    let h_scn_cam = average_transforms(run_a.h_scn_cam(), run_b.h_scn_cam())?;
    let scene = SceneFrame::new(run_a.scene.camera.clone(), h_scn_cam)?;
    ReferencingResult::from_hand_eye(
        h_rob_cam,
        scene,
        Provenance::Reversal(Box::new([run_a.clone(), run_b.clone()])),
    )
}
