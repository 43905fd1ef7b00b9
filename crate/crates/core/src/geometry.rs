//! Rigid-body algebra: frame-tagged SE(3) transforms, homogeneous points and
//! least-squares rigid registration of point sets.
//!
//! A [`RigidTransform`] tagged `to = B, from = A` is the matrix that maps
//! A-coordinates to B-coordinates. Composition checks the inner frames so a
//! chain such as `rob <- abs <- scn <- cam` cannot be assembled in the wrong
//! order. All lengths are millimetres.

use std::fmt;

use nalgebra::{DMatrix, Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector4, SVD};

use crate::error::{Error, Result};

pub use nalgebra::Point3;

/// Tolerance used when validating externally supplied rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Drift in `‖RᵀR − I‖_F` above which compositions re-project onto SO(3).
pub const REORTHONORMALIZE_THRESHOLD: f64 = 1e-12;

/// Smallest admissible second singular value of a centred source point set.
pub const COLLINEARITY_THRESHOLD_MM: f64 = 1e-6;

/// Coordinate system label carried by transforms and points.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FrameId {
    /// Absolute (laser tracker) system.
    Abs,
    /// Robot system, origin at the robot-mounted reflector.
    Rob,
    /// Camera system.
    Cam,
    /// Referencing plate system (also labelled `plt`).
    Ref,
    /// Scene system on the floor plane.
    Scn,
    /// Anything else, e.g. simulator-internal frames.
    Other(String),
}

impl FrameId {
    pub fn other(label: impl Into<String>) -> Self {
        FrameId::Other(label.into())
    }

    pub fn as_str(&self) -> &str {
        match self {
            FrameId::Abs => "abs",
            FrameId::Rob => "rob",
            FrameId::Cam => "cam",
            FrameId::Ref => "ref",
            FrameId::Scn => "scn",
            FrameId::Other(s) => s,
        }
    }

    /// Parses a label; `plt` is accepted as an alias of `ref`.
    pub fn parse(label: &str) -> Self {
        match label {
            "abs" => FrameId::Abs,
            "rob" => FrameId::Rob,
            "cam" => FrameId::Cam,
            "ref" | "plt" => FrameId::Ref,
            "scn" => FrameId::Scn,
            other => FrameId::Other(other.to_owned()),
        }
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn rot_x(angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), angle)
}

pub fn rot_y(angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), angle)
}

pub fn rot_z(angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), angle)
}

/// Frobenius norm of `RᵀR − I`.
pub fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).norm()
}

/// Checks a matrix against the SO(3) invariants and wraps it.
pub fn rotation_from_matrix(m: &Matrix3<f64>) -> Result<Rotation3<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidRotation("non-finite entry".into()));
    }
    let ortho = orthonormality_error(m);
    if ortho > ROTATION_TOLERANCE {
        return Err(Error::InvalidRotation(format!(
            "‖RᵀR − I‖_F = {ortho:e} exceeds {ROTATION_TOLERANCE:e}"
        )));
    }
    let det = m.determinant();
    if (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(Error::InvalidRotation(format!("det(R) = {det}")));
    }
    Ok(Rotation3::from_matrix_unchecked(*m))
}

/// SVD of a 3×3 matrix with singular values sorted in descending order.
fn sorted_svd(m: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>, Matrix3<f64>) {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let mut u_sorted = Matrix3::zeros();
    let mut v_t_sorted = Matrix3::zeros();
    let mut s_sorted = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src));
        v_t_sorted.set_row(dst, &v_t.row(src));
        s_sorted[dst] = s[src];
    }
    (u_sorted, s_sorted, v_t_sorted)
}

/// Second singular value of the centred point matrix, in mm. Rank ≥ 2 (a
/// value above [`COLLINEARITY_THRESHOLD_MM`]) is needed for a unique rotation.
pub fn second_singular_value(points: &[Point3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / points.len() as f64;
    // SVD of the centred n×3 matrix itself; going through the scatter matrix
    // would square the condition number.
    let centred = DMatrix::from_fn(points.len(), 3, |i, j| points[i][j] - c[j]);
    let mut s: Vec<f64> = centred.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.get(1).copied().unwrap_or(0.0)
}

/// Gauss-Newton steps on the registration objective. The 3×3 SVD leaves
/// errors near 1e-10 rad when the point set is elongated; at the optimum the
/// step is zero, so noisy solutions are unchanged.
fn polish_rotation(
    mut rotation: Rotation3<f64>,
    source: &[Point3<f64>],
    target: &[Point3<f64>],
    cs: &Vector3<f64>,
    ct: &Vector3<f64>,
) -> Rotation3<f64> {
    for _ in 0..2 {
        let mut a = Matrix3::zeros();
        let mut b = Vector3::zeros();
        for (s, t) in source.iter().zip(target) {
            let p = rotation * (s.coords - cs);
            let r = (t.coords - ct) - p;
            a += Matrix3::identity() * p.norm_squared() - p * p.transpose();
            b += p.cross(&r);
        }
        match a.lu().solve(&b) {
            Some(w) if w.iter().all(|v| v.is_finite()) => {
                rotation = Rotation3::new(w) * rotation;
            }
            _ => break,
        }
    }
    rotation
}

/// Closest rotation (Frobenius sense) to an arbitrary 3×3 matrix.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Rotation3<f64> {
    let (u, _, v_t) = sorted_svd(m);
    let d = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Rotation3::from_matrix_unchecked(u * correction * v_t)
}

/// Geodesic angle between two rotations in `[0, π]`.
///
/// Evaluated through `atan2` of the skew and symmetric parts of `aᵀb`, which
/// equals `arccos((tr(aᵀb) − 1)/2)` but keeps full precision near zero.
pub fn rotation_distance(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
    let m = a.matrix().transpose() * b.matrix();
    let cos = (m.trace() - 1.0) / 2.0;
    let skew = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    let sin = skew.norm() / 2.0;
    sin.atan2(cos).clamp(0.0, std::f64::consts::PI)
}

/// Chordal L2 mean: nearest rotation to the arithmetic mean of the matrices.
pub fn chordal_mean(rotations: &[Rotation3<f64>]) -> Result<Rotation3<f64>> {
    if rotations.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sum = rotations
        .iter()
        .fold(Matrix3::zeros(), |acc, r| acc + r.matrix());
    Ok(nearest_rotation(&(sum / rotations.len() as f64)))
}

/// A point tagged with the frame it is expressed in. Its homogeneous form
/// always carries `w = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneousPoint {
    pub frame: FrameId,
    pub point: Point3<f64>,
}

impl HomogeneousPoint {
    pub fn new(frame: FrameId, point: Point3<f64>) -> Result<Self> {
        if point.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite point {:?} in frame {frame}",
                point.coords.as_slice()
            )));
        }
        Ok(Self { frame, point })
    }

    pub fn homogeneous(&self) -> Vector4<f64> {
        self.point.to_homogeneous()
    }
}

/// Element of SE(3) mapping `from`-coordinates to `to`-coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    to: FrameId,
    from: FrameId,
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Builds a transform from a raw rotation matrix, validating SO(3).
    pub fn new(
        to: FrameId,
        from: FrameId,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite translation".into()));
        }
        Ok(Self {
            to,
            from,
            rotation: rotation_from_matrix(&rotation)?,
            translation,
        })
    }

    pub fn from_parts(
        to: FrameId,
        from: FrameId,
        rotation: Rotation3<f64>,
        translation: Vector3<f64>,
    ) -> Self {
        Self {
            to,
            from,
            rotation,
            translation,
        }
    }

    /// Identity map between two (possibly distinct) frame labels.
    pub fn identity(to: FrameId, from: FrameId) -> Self {
        Self::from_parts(to, from, Rotation3::identity(), Vector3::zeros())
    }

    pub fn from_translation(to: FrameId, from: FrameId, t: Vector3<f64>) -> Self {
        Self::from_parts(to, from, Rotation3::identity(), t)
    }

    /// Parses a homogeneous 4×4 matrix; the bottom row must be `(0 0 0 1)`.
    pub fn from_matrix(to: FrameId, from: FrameId, m: &Matrix4<f64>) -> Result<Self> {
        let bottom = m.fixed_view::<1, 4>(3, 0);
        if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).norm() > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!(
                "bottom row {bottom} is not (0 0 0 1)"
            )));
        }
        Self::new(
            to,
            from,
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn to_frame(&self) -> &FrameId {
        &self.to
    }

    pub fn from_frame(&self) -> &FrameId {
        &self.from
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    /// Same numbers, new frame labels.
    pub fn relabel(&self, to: FrameId, from: FrameId) -> Self {
        Self {
            to,
            from,
            ..self.clone()
        }
    }

    /// `self ∘ inner`; requires `inner.to == self.from`.
    pub fn compose(&self, inner: &RigidTransform) -> Result<Self> {
        if inner.to != self.from {
            return Err(Error::FrameMismatch {
                expected: self.from.clone(),
                found: inner.to.clone(),
            });
        }
        let r = self.rotation.matrix() * inner.rotation.matrix();
        let rotation = if orthonormality_error(&r) > REORTHONORMALIZE_THRESHOLD {
            nearest_rotation(&r)
        } else {
            Rotation3::from_matrix_unchecked(r)
        };
        Ok(Self {
            to: self.to.clone(),
            from: inner.from.clone(),
            rotation,
            translation: self.rotation * inner.translation + self.translation,
        })
    }

    /// Analytic inverse `(Rᵀ, −Rᵀt)` with swapped frame labels.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self {
            to: self.from.clone(),
            from: self.to.clone(),
            translation: -(rt * self.translation),
            rotation: rt,
        }
    }

    /// Frame-checked application to a homogeneous point.
    pub fn apply(&self, p: &HomogeneousPoint) -> Result<HomogeneousPoint> {
        if p.frame != self.from {
            return Err(Error::FrameMismatch {
                expected: self.from.clone(),
                found: p.frame.clone(),
            });
        }
        Ok(HomogeneousPoint {
            frame: self.to.clone(),
            point: self.transform_point(&p.point),
        })
    }

    /// Unchecked point mapping for callers that already track frames.
    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle (rad) and translation distance (mm) between two
    /// transforms with matching frames.
    pub fn difference(&self, other: &RigidTransform) -> (f64, f64) {
        (
            rotation_distance(&self.rotation, &other.rotation),
            (self.translation - other.translation).norm(),
        )
    }
}

/// `h_bc ∘ h_ab`.
pub fn compose(h_bc: &RigidTransform, h_ab: &RigidTransform) -> Result<RigidTransform> {
    h_bc.compose(h_ab)
}

pub fn invert(h: &RigidTransform) -> RigidTransform {
    h.inverse()
}

pub fn apply(h: &RigidTransform, p: &HomogeneousPoint) -> Result<HomogeneousPoint> {
    h.apply(p)
}

/// Outcome of a rigid registration.
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
    /// Root-mean-square residual `‖target − H·source‖` in mm.
    pub rms_mm: f64,
}

impl Registration {
    pub fn transform(&self, to: FrameId, from: FrameId) -> RigidTransform {
        RigidTransform::from_parts(to, from, self.rotation, self.translation)
    }
}

/// Least-squares rigid alignment (no scale) minimising
/// `Σ ‖target_i − (R·source_i + t)‖²`, via SVD of the cross-covariance with
/// the determinant-sign correction.
pub fn register_points(source: &[Point3<f64>], target: &[Point3<f64>]) -> Result<Registration> {
    if source.len() != target.len() {
        return Err(Error::LengthMismatch {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "register_points needs at least 3 correspondences, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let cs = source.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let ct = target.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;

    let second = second_singular_value(source);
    if second <= COLLINEARITY_THRESHOLD_MM {
        return Err(Error::DegenerateConfiguration(format!(
            "register_points: source points are collinear or coincident \
             (second singular value {second:e} mm)"
        )));
    }
    let mut cov = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        cov += (s.coords - cs) * (t.coords - ct).transpose();
    }

    let (u, _, v_t) = sorted_svd(&cov);
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = polish_rotation(
        Rotation3::from_matrix_unchecked(r),
        source,
        target,
        &cs,
        &ct,
    );
    let translation = ct - rotation * cs;

    let sq: f64 = source
        .iter()
        .zip(target)
        .map(|(s, t)| (t.coords - (rotation * s.coords + translation)).norm_squared())
        .sum();
    Ok(Registration {
        rotation,
        translation,
        rms_mm: (sq / n).sqrt(),
    })
}
