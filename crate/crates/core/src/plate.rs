//! Referencing plate geometry: calibration-target marks on the PCS xy-plane,
//! the three reflector nests, and the nest-to-reflector offset. Nest centres
//! are measured once by stereo triangulation.
//!
//! The PCS z-axis points into the plate, so a reflector seated in a nest has
//! its centre at negative z.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::Vector3;

use crate::camera::{CameraModel, ImagePoint};
use crate::error::{Error, Result};
use crate::geometry::{FrameId, Point3, RigidTransform};

/// Rays whose closest approach exceeds this gap are treated as mismatched.
pub const MAX_TRIANGULATION_GAP_MM: f64 = 0.5;
pub const MIN_STEREO_BASELINE_MM: f64 = 10.0;
/// Below this area the plate normal is dominated by tracker noise.
pub const MIN_NEST_TRIANGLE_AREA_MM2: f64 = 100.0;
/// Demo default: centre of a 1.5-inch reflector above a flush nest seat.
pub const DEFAULT_NEST_OFFSET_MM: f64 = 19.05;

/// The three reflector nests, colour coded red, green and blue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NestId {
    R,
    G,
    B,
}

impl NestId {
    pub const ALL: [NestId; 3] = [NestId::R, NestId::G, NestId::B];

    /// Key used in plate files.
    pub fn key(self) -> &'static str {
        match self {
            NestId::R => "r",
            NestId::G => "g",
            NestId::B => "b",
        }
    }

    /// Identifier used for tracker measurements.
    pub fn tracker_id(self) -> &'static str {
        match self {
            NestId::R => "n_r",
            NestId::G => "n_g",
            NestId::B => "n_b",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Accepts both `r` and `n_r` spellings.
    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "r" | "n_r" => Ok(NestId::R),
            "g" | "n_g" => Ok(NestId::G),
            "b" | "n_b" => Ok(NestId::B),
            other => Err(Error::UnknownNest(other.to_owned())),
        }
    }
}

impl fmt::Display for NestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tracker_id())
    }
}

/// A calibration-target circle centre. Marks lie on the plate surface, z = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetMark {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

impl TargetMark {
    pub fn position(&self) -> Point3<f64> {
        Point3::new(self.x, self.y, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateExtent {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl PlateExtent {
    pub fn half_sizes(&self) -> (f64, f64) {
        (
            (self.x_max - self.x_min) / 2.0,
            (self.y_max - self.y_min) / 2.0,
        )
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_max + self.x_min) / 2.0,
            (self.y_max + self.y_min) / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferencingPlate {
    marks: BTreeMap<u32, TargetMark>,
    nests: [Point3<f64>; 3],
    nest_offset_mm: f64,
    extent: PlateExtent,
}

impl ReferencingPlate {
    /// `nests` is indexed by [`NestId::index`].
    pub fn new(
        marks: Vec<TargetMark>,
        nests: [Point3<f64>; 3],
        nest_offset_mm: f64,
        extent: PlateExtent,
    ) -> Result<Self> {
        if !nest_offset_mm.is_finite() || nest_offset_mm < 0.0 {
            return Err(Error::InvalidPlate(format!(
                "nest offset must be a non-negative distance, got {nest_offset_mm}"
            )));
        }
        if !(extent.x_min < extent.x_max && extent.y_min < extent.y_max) {
            return Err(Error::InvalidPlate(format!("empty extent {extent:?}")));
        }
        let mut by_id = BTreeMap::new();
        for m in marks {
            if !(m.x.is_finite() && m.y.is_finite()) {
                return Err(Error::InvalidPlate(format!("mark {} is not finite", m.id)));
            }
            if by_id.insert(m.id, m).is_some() {
                return Err(Error::InvalidPlate(format!("duplicate mark id {}", m.id)));
            }
        }
        if nests.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidPlate("non-finite nest centre".into()));
        }
        Ok(Self {
            marks: by_id,
            nests,
            nest_offset_mm,
            extent,
        })
    }

    pub fn marks(&self) -> impl Iterator<Item = &TargetMark> {
        self.marks.values()
    }

    pub fn mark(&self, id: u32) -> Option<Point3<f64>> {
        self.marks.get(&id).map(TargetMark::position)
    }

    pub fn mark_count(&self) -> usize {
        self.marks.len()
    }

    pub fn nest(&self, id: NestId) -> Point3<f64> {
        self.nests[id.index()]
    }

    pub fn nests(&self) -> &[Point3<f64>; 3] {
        &self.nests
    }

    pub fn nest_offset_mm(&self) -> f64 {
        self.nest_offset_mm
    }

    pub fn extent(&self) -> &PlateExtent {
        &self.extent
    }

    /// Area of the triangle spanned by the three nest centres (mm²).
    pub fn nest_triangle_area(&self) -> f64 {
        let [r, g, b] = self.nests;
        (g - r).cross(&(b - r)).norm() / 2.0
    }

    /// Reflector centre when seated in nest `id`, in PCS.
    pub fn smr_position(&self, id: NestId) -> Point3<f64> {
        let n = self.nest(id);
        Point3::new(n.x, n.y, n.z - self.nest_offset_mm)
    }

    /// Copy with the nest centres replaced.
    pub fn with_nests(&self, nests: [Point3<f64>; 3]) -> Result<Self> {
        Self::new(
            self.marks.values().copied().collect(),
            nests,
            self.nest_offset_mm,
            self.extent,
        )
    }

    pub fn with_nest_offset(&self, nest_offset_mm: f64) -> Result<Self> {
        Self::new(
            self.marks.values().copied().collect(),
            self.nests,
            nest_offset_mm,
            self.extent,
        )
    }
}

/// Shifts a nest centre along the PCS z-axis by the nest offset to obtain
/// the seated reflector centre.
pub fn nest_to_smr(plate: &ReferencingPlate, nest: &str) -> Result<Point3<f64>> {
    Ok(plate.smr_position(NestId::parse(nest)?))
}

/// Two calibrated views of the plate used for the one-off nest measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoObservation {
    /// `ref <- cam_k` for both views.
    pub h_ref_cam: [RigidTransform; 2],
    /// Nest ring centre seen in view 0 and view 1.
    pub nests: BTreeMap<NestId, [ImagePoint; 2]>,
}

impl StereoObservation {
    /// Same observation with the two views exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            h_ref_cam: [self.h_ref_cam[1].clone(), self.h_ref_cam[0].clone()],
            nests: self
                .nests
                .iter()
                .map(|(k, [a, b])| (*k, [*b, *a]))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    /// Midpoint of the common perpendicular, in PCS.
    pub point: Point3<f64>,
    /// Length of the common perpendicular.
    pub gap_mm: f64,
}

/// Midpoint of the shortest segment between two rays `c_k + s·d_k`.
pub fn midpoint_triangulation(
    c0: &Point3<f64>,
    d0: &Vector3<f64>,
    c1: &Point3<f64>,
    d1: &Vector3<f64>,
) -> Result<(Triangulation, f64, f64)> {
    let w0 = c0 - c1;
    let a = d0.dot(d0);
    let b = d0.dot(d1);
    let c = d1.dot(d1);
    let d = d0.dot(&w0);
    let e = d1.dot(&w0);
    let denom = a * c - b * b;
    if denom <= 1e-14 * a * c {
        return Err(Error::ParallelRays);
    }
    let s = (b * e - c * d) / denom;
    let t = (a * e - b * d) / denom;
    let p0 = c0 + d0 * s;
    let p1 = c1 + d1 * t;
    Ok((
        Triangulation {
            point: nalgebra::center(&p0, &p1),
            gap_mm: (p0 - p1).norm(),
        },
        s,
        t,
    ))
}

/// Triangulates one nest centre from the stereo pair.
pub fn triangulate_nest(
    model: &CameraModel,
    obs: &StereoObservation,
    nest: NestId,
) -> Result<Triangulation> {
    let views = obs
        .nests
        .get(&nest)
        .ok_or_else(|| Error::UnknownNest(nest.tracker_id().to_owned()))?;
    let [h0, h1] = &obs.h_ref_cam;
    for h in [h0, h1] {
        if h.to_frame() != &FrameId::Ref {
            return Err(Error::FrameMismatch {
                expected: FrameId::Ref,
                found: h.to_frame().clone(),
            });
        }
    }
    let c0 = Point3::from(*h0.translation());
    let c1 = Point3::from(*h1.translation());
    let d0 = h0.transform_vector(&model.back_project(&views[0]));
    let d1 = h1.transform_vector(&model.back_project(&views[1]));

    let (tri, s, t) = midpoint_triangulation(&c0, &d0, &c1, &d1)?;
    let baseline = (c1 - c0).norm();
    if baseline <= MIN_STEREO_BASELINE_MM {
        return Err(Error::DegenerateConfiguration(format!(
            "stereo baseline {baseline:.3} mm is below {MIN_STEREO_BASELINE_MM} mm"
        )));
    }
    if s <= 0.0 || t <= 0.0 {
        return Err(Error::DegenerateConfiguration(format!(
            "nest {nest} triangulates behind a camera"
        )));
    }
    if tri.gap_mm > MAX_TRIANGULATION_GAP_MM {
        return Err(Error::ExcessiveGap {
            nest: nest.tracker_id().to_owned(),
            gap_mm: tri.gap_mm,
            limit_mm: MAX_TRIANGULATION_GAP_MM,
        });
    }
    Ok(tri)
}

/// Replaces the template's nominal nest centres by triangulated ones. The
/// target marks are taken from the template.
pub fn measure_plate(
    model: &CameraModel,
    obs: &StereoObservation,
    template: &ReferencingPlate,
) -> Result<ReferencingPlate> {
    let mut nests = *template.nests();
    for id in NestId::ALL {
        nests[id.index()] = triangulate_nest(model, obs, id)?.point;
    }
    template.with_nests(nests)
}
