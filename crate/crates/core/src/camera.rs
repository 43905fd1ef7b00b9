//! Pinhole camera with radial polynomial distortion, the image-to-scene
//! rectification map, and pose estimation against a planar target.
//!
//! Camera axes: x along increasing column, y along increasing row, z along
//! the optical axis. Distortion acts on normalized image coordinates
//! `(x/z, y/z)`:
//!
//! ```text
//! x_d = x_u · (1 + k1·r² + k2·r⁴ + k3·r⁶),   r = ‖x_u‖
//! ```

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, FrameId, Point3, RigidTransform};

const UNDISTORT_MAX_ITERATIONS: usize = 20;

/// Largest admissible incidence angle between optical axis and plate normal.
pub const MAX_INCIDENCE_DEG: f64 = 89.0;

/// Sub-pixel image location. `row` grows downwards, `col` to the right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub row: f64,
    pub col: f64,
}

impl ImagePoint {
    pub fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn is_finite(&self) -> bool {
        self.row.is_finite() && self.col.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub focal_mm: f64,
    pub sx_mm: f64,
    pub sy_mm: f64,
    pub cx_px: f64,
    pub cy_px: f64,
    /// Radial coefficients k1, k2, k3.
    pub k: [f64; 3],
    pub rows: u32,
    pub cols: u32,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        focal_mm: f64,
        sx_mm: f64,
        sy_mm: f64,
        cx_px: f64,
        cy_px: f64,
        k: [f64; 3],
        rows: u32,
        cols: u32,
    ) -> Result<Self> {
        let model = Self {
            focal_mm,
            sx_mm,
            sy_mm,
            cx_px,
            cy_px,
            k,
            rows,
            cols,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks parameter ranges and that the distortion polynomial is
    /// invertible over the whole sensor.
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.focal_mm,
            self.sx_mm,
            self.sy_mm,
            self.cx_px,
            self.cy_px,
        ]
        .iter()
        .chain(self.k.iter())
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidCamera("non-finite parameter".into()));
        }
        if self.focal_mm <= 0.0 {
            return Err(Error::InvalidCamera(format!(
                "focal length {} mm",
                self.focal_mm
            )));
        }
        if self.sx_mm <= 0.0 || self.sy_mm <= 0.0 {
            return Err(Error::InvalidCamera(format!(
                "pixel pitch ({}, {}) mm",
                self.sx_mm, self.sy_mm
            )));
        }
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::InvalidCamera(format!(
                "image size {}x{} below 2x2",
                self.rows, self.cols
            )));
        }
        // The forward radial map must be strictly increasing up to the
        // undistorted radius of the farthest sensor corner.
        let r_max = self
            .corners()
            .iter()
            .map(|q| self.pixel_to_distorted(q).norm())
            .fold(0.0, f64::max);
        let r_u_max = self.undistort_radius(r_max)?;
        let steps = 256;
        for i in 0..=steps {
            let r = r_u_max * 1.05 * i as f64 / steps as f64;
            if self.radial_derivative(r) <= 0.0 {
                return Err(Error::InvalidCamera(format!(
                    "distortion polynomial not monotone at normalized radius {r:.4}"
                )));
            }
        }
        Ok(())
    }

    fn radial_factor(&self, r2: f64) -> f64 {
        let [k1, k2, k3] = self.k;
        1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    }

    /// d/dr of `r · factor(r²)`.
    fn radial_derivative(&self, r: f64) -> f64 {
        let [k1, k2, k3] = self.k;
        let r2 = r * r;
        1.0 + r2 * (3.0 * k1 + r2 * (5.0 * k2 + r2 * 7.0 * k3))
    }

    /// Applies radial distortion to normalized coordinates.
    pub fn distort(&self, xy: &Vector2<f64>) -> Vector2<f64> {
        xy * self.radial_factor(xy.norm_squared())
    }

    fn undistort_radius(&self, r_d: f64) -> Result<f64> {
        let mut r = r_d;
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            let f = r * self.radial_factor(r * r) - r_d;
            let step = f / self.radial_derivative(r);
            r -= step;
            if step.abs() <= 1e-15 * (1.0 + r.abs()) {
                return Ok(r);
            }
        }
        Err(Error::NonConvergence {
            iterations: UNDISTORT_MAX_ITERATIONS,
            last_step: f64::NAN,
        })
    }

    /// Inverts [`distort`](Self::distort) by Newton iteration on the radius.
    pub fn undistort(&self, xy_d: &Vector2<f64>) -> Vector2<f64> {
        let r_d = xy_d.norm();
        if r_d == 0.0 || self.k == [0.0; 3] {
            return *xy_d;
        }
        // Convergence is guaranteed by the monotonicity check in validate().
        let r_u = self.undistort_radius(r_d).unwrap_or(r_d);
        xy_d * (r_u / r_d)
    }

    pub fn distorted_to_pixel(&self, xy_d: &Vector2<f64>) -> ImagePoint {
        ImagePoint {
            row: self.cy_px + self.focal_mm * xy_d.y / self.sy_mm,
            col: self.cx_px + self.focal_mm * xy_d.x / self.sx_mm,
        }
    }

    pub fn pixel_to_distorted(&self, q: &ImagePoint) -> Vector2<f64> {
        Vector2::new(
            (q.col - self.cx_px) * self.sx_mm / self.focal_mm,
            (q.row - self.cy_px) * self.sy_mm / self.focal_mm,
        )
    }

    /// True when the point lies on the sensor, pixel centres spanning
    /// `[0, rows − 1] × [0, cols − 1]`.
    pub fn contains(&self, q: &ImagePoint) -> bool {
        q.is_finite()
            && q.row >= 0.0
            && q.col >= 0.0
            && q.row <= (self.rows - 1) as f64
            && q.col <= (self.cols - 1) as f64
    }

    /// The four corner pixel centres.
    pub fn corners(&self) -> [ImagePoint; 4] {
        let r = (self.rows - 1) as f64;
        let c = (self.cols - 1) as f64;
        [
            ImagePoint::new(0.0, 0.0),
            ImagePoint::new(0.0, c),
            ImagePoint::new(r, 0.0),
            ImagePoint::new(r, c),
        ]
    }

    pub fn image_center(&self) -> ImagePoint {
        ImagePoint::new((self.rows - 1) as f64 / 2.0, (self.cols - 1) as f64 / 2.0)
    }

    /// Projects a camera-frame point, without sensor bounds checks.
    pub fn project_cam(&self, p: &Point3<f64>) -> Result<ImagePoint> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { depth_mm: p.z });
        }
        let xy = Vector2::new(p.x / p.z, p.y / p.z);
        Ok(self.distorted_to_pixel(&self.distort(&xy)))
    }

    /// Viewing ray `(x, y, 1)` in camera coordinates for an image point.
    pub fn back_project(&self, q: &ImagePoint) -> Vector3<f64> {
        let xy = self.undistort(&self.pixel_to_distorted(q));
        Vector3::new(xy.x, xy.y, 1.0)
    }
}

/// Projects a world point through `h_cam_world` into distorted pixel
/// coordinates. Points off the sensor yield [`Error::OutsideSensor`].
pub fn project(
    model: &CameraModel,
    h_cam_world: &RigidTransform,
    p: &Point3<f64>,
) -> Result<ImagePoint> {
    let q = model.project_cam(&h_cam_world.transform_point(p))?;
    if !model.contains(&q) {
        return Err(Error::OutsideSensor {
            row: q.row,
            col: q.col,
        });
    }
    Ok(q)
}

/// Intersects the ray `s·dir` (s > 0) with the plane `normal·(p − origin) = 0`.
fn intersect_ray_plane(
    dir: &Vector3<f64>,
    origin: &Vector3<f64>,
    normal: &Vector3<f64>,
) -> Option<Point3<f64>> {
    let denom = normal.dot(dir);
    if denom.abs() < 1e-12 * dir.norm() {
        return None;
    }
    let s = normal.dot(origin) / denom;
    (s > 0.0).then(|| Point3::from(dir * s))
}

/// The scene system together with the camera model. The rectification map
/// is a pure function of these two: image points are back-projected and
/// intersected with the scene xy-plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub camera: CameraModel,
    /// `scn <- cam`.
    pub h_scn_cam: RigidTransform,
}

impl SceneFrame {
    pub fn new(camera: CameraModel, h_scn_cam: RigidTransform) -> Result<Self> {
        if h_scn_cam.to_frame() != &FrameId::Scn || h_scn_cam.from_frame() != &FrameId::Cam {
            return Err(Error::FrameMismatch {
                expected: FrameId::Scn,
                found: h_scn_cam.to_frame().clone(),
            });
        }
        Ok(Self { camera, h_scn_cam })
    }

    /// Scene plane in camera coordinates as (point, upward normal).
    fn plane_in_camera(&self) -> (Vector3<f64>, Vector3<f64>) {
        let h_cam_scn = self.h_scn_cam.inverse();
        (
            *h_cam_scn.translation(),
            h_cam_scn.rotation() * Vector3::z(),
        )
    }

    /// Image point to scene xy coordinates (mm).
    pub fn map(&self, q: &ImagePoint) -> Result<Vector2<f64>> {
        let p = self.map_to_camera(q)?;
        let s = self.h_scn_cam.transform_point(&p);
        Ok(Vector2::new(s.x, s.y))
    }

    /// Intersection of the viewing ray of `q` with the scene plane, in
    /// camera coordinates.
    pub fn map_to_camera(&self, q: &ImagePoint) -> Result<Point3<f64>> {
        let (origin, normal) = self.plane_in_camera();
        intersect_ray_plane(&self.camera.back_project(q), &origin, &normal).ok_or_else(|| {
            Error::DegenerateViewingGeometry(format!(
                "ray of ({:.3}, {:.3}) does not meet the scene plane",
                q.row, q.col
            ))
        })
    }

    /// Projects a scene xy location back into the image.
    pub fn lift(&self, xy: &Vector2<f64>) -> Result<ImagePoint> {
        let p = self
            .h_scn_cam
            .inverse()
            .transform_point(&Point3::new(xy.x, xy.y, 0.0));
        self.camera.project_cam(&p)
    }
}

/// Builds the scene system for a camera observing the plate plane.
///
/// The plate plane is the PCS xy-plane seen through `h_cam_ref`. The scene
/// x-axis follows the image row direction at the image centre, the y-axis
/// completes a right-handed basis with the upward normal (so it follows the
/// column direction), and the origin is placed at the componentwise minimum
/// of the projected image corners so the full image maps into the positive
/// quadrant.
pub fn build_rectification_map(
    model: &CameraModel,
    h_cam_ref: &RigidTransform,
) -> Result<SceneFrame> {
    if h_cam_ref.to_frame() != &FrameId::Cam {
        return Err(Error::FrameMismatch {
            expected: FrameId::Cam,
            found: h_cam_ref.to_frame().clone(),
        });
    }
    let plate_origin = *h_cam_ref.translation();
    let plate_z = h_cam_ref.rotation() * Vector3::z();
    let distance = plate_z.dot(&plate_origin);
    if distance <= 1e-9 {
        return Err(Error::DegenerateViewingGeometry(format!(
            "camera is not in front of the plate surface (signed distance {distance:e} mm)"
        )));
    }
    let incidence = plate_z.z.abs().clamp(-1.0, 1.0).acos().to_degrees();
    if incidence >= MAX_INCIDENCE_DEG {
        return Err(Error::DegenerateViewingGeometry(format!(
            "incidence angle {incidence:.3} deg"
        )));
    }

    let hit = |q: &ImagePoint| {
        intersect_ray_plane(&model.back_project(q), &plate_origin, &plate_z).ok_or_else(|| {
            Error::DegenerateViewingGeometry(format!(
                "image point ({:.1}, {:.1}) does not project onto the plate plane",
                q.row, q.col
            ))
        })
    };

    let up = -plate_z;
    let center = model.image_center();
    let p0 = hit(&center)?;
    let p1 = hit(&ImagePoint::new(center.row + 1.0, center.col))?;
    let row_dir = p1 - p0;
    let x_axis = (row_dir - up * up.dot(&row_dir)).normalize();
    let y_axis = up.cross(&x_axis);

    let mut min_a = f64::INFINITY;
    let mut min_b = f64::INFINITY;
    for corner in model.corners() {
        let d = hit(&corner)? - p0;
        min_a = min_a.min(x_axis.dot(&d));
        min_b = min_b.min(y_axis.dot(&d));
    }
    let origin = p0.coords + x_axis * min_a + y_axis * min_b;

    let cam_r_scn = Matrix3::from_columns(&[x_axis, y_axis, up]);
    let h_cam_scn = RigidTransform::from_parts(
        FrameId::Cam,
        FrameId::Scn,
        nearest_rotation(&cam_r_scn),
        origin,
    );
    SceneFrame::new(model.clone(), h_cam_scn.inverse())
}

/// Camera pose relative to the plate with its reprojection residual.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatePoseEstimate {
    /// `cam <- ref`.
    pub h_cam_ref: RigidTransform,
    pub rms_px: f64,
    pub iterations: usize,
}

pub const POSE_MAX_ITERATIONS: usize = 100;
pub const POSE_STEP_TOLERANCE: f64 = 1e-10;

/// Hartley normalisation: centroid to the origin, mean distance √2.
fn normalizing_transform(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Direct linear estimate of the plane-to-image homography.
fn estimate_homography(plane: &[Vector2<f64>], image: &[Vector2<f64>]) -> Matrix3<f64> {
    let tp = normalizing_transform(plane);
    let ti = normalizing_transform(image);
    let rows = (2 * plane.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in plane.iter().zip(image).enumerate() {
        let p = tp * Vector3::new(p.x, p.y, 1.0);
        let q = ti * Vector3::new(q.x, q.y, 1.0);
        let (x, y) = (p.x / p.z, p.y / p.z);
        let (u, v) = (q.x / q.z, q.y / q.z);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, -v]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nine singular values");
    let h = v_t.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    ti.try_inverse().expect("normalisation is invertible") * hn * tp
}

fn reprojection_residuals(
    model: &CameraModel,
    rotation: &Rotation3<f64>,
    translation: &Vector3<f64>,
    observed: &[(ImagePoint, Point3<f64>)],
) -> Option<DVector<f64>> {
    let mut r = DVector::zeros(2 * observed.len());
    for (i, (q, p)) in observed.iter().enumerate() {
        let proj = model
            .project_cam(&Point3::from(rotation * p.coords + translation))
            .ok()?;
        r[2 * i] = proj.row - q.row;
        r[2 * i + 1] = proj.col - q.col;
    }
    Some(r)
}

fn perturb(
    rotation: &Rotation3<f64>,
    translation: &Vector3<f64>,
    delta: &Vector6<f64>,
) -> (Rotation3<f64>, Vector3<f64>) {
    let omega = Vector3::new(delta[0], delta[1], delta[2]);
    (
        Rotation3::new(omega) * rotation,
        translation + Vector3::new(delta[3], delta[4], delta[5]),
    )
}

/// Estimates `cam <- ref` from image observations of plate points lying on
/// the PCS xy-plane: homography decomposition for the initial pose, then
/// damped Gauss-Newton on the pixel reprojection error.
pub fn estimate_plate_pose_from_image(
    model: &CameraModel,
    observed: &[(ImagePoint, Point3<f64>)],
) -> Result<PlatePoseEstimate> {
    if observed.len() < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "plate pose needs at least 4 correspondences, got {}",
            observed.len()
        )));
    }
    if let Some((_, p)) = observed.iter().find(|(_, p)| p.z.abs() > 1e-9) {
        return Err(Error::DegenerateConfiguration(format!(
            "target point ({}, {}, {}) is off the plate plane",
            p.x, p.y, p.z
        )));
    }
    let plane: Vec<Vector2<f64>> = observed.iter().map(|(_, p)| p.xy().coords).collect();
    let image: Vec<Vector2<f64>> = observed
        .iter()
        .map(|(q, _)| model.undistort(&model.pixel_to_distorted(q)))
        .collect();

    // Non-collinearity of the plate points.
    let n = plane.len() as f64;
    let c = plane.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let scatter = plane.iter().fold(nalgebra::Matrix2::zeros(), |a, p| {
        a + (p - c) * (p - c).transpose()
    });
    let min_eig = scatter.symmetric_eigenvalues().min();
    if min_eig.max(0.0).sqrt() <= crate::geometry::COLLINEARITY_THRESHOLD_MM {
        return Err(Error::DegenerateConfiguration(
            "plate target points are collinear".into(),
        ));
    }

    let h = estimate_homography(&plane, &image);
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();
    let mut lambda = 2.0 / (h1.norm() + h2.norm());
    if (h3 * lambda).z < 0.0 {
        lambda = -lambda;
    }
    let r1 = h1 * lambda;
    let r2 = h2 * lambda;
    let mut rotation = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
    let mut translation = h3 * lambda;

    let mut residual = reprojection_residuals(model, &rotation, &translation, observed)
        .ok_or_else(|| {
            Error::DegenerateConfiguration("initial pose places target behind the camera".into())
        })?;
    let mut cost = residual.norm_squared();
    let mut damping = 1e-3;
    let mut last_step = f64::INFINITY;
    let m = residual.len();

    for iteration in 1..=POSE_MAX_ITERATIONS {
        let mut jac = DMatrix::<f64>::zeros(m, 6);
        for j in 0..6 {
            let step = if j < 3 { 1e-7 } else { 1e-5 };
            let mut d = Vector6::zeros();
            d[j] = step;
            let (rp, tp) = perturb(&rotation, &translation, &d);
            d[j] = -step;
            let (rm, tm) = perturb(&rotation, &translation, &d);
            let (Some(fp), Some(fm)) = (
                reprojection_residuals(model, &rp, &tp, observed),
                reprojection_residuals(model, &rm, &tm, observed),
            ) else {
                return Err(Error::DegenerateConfiguration(
                    "pose iterate moved target behind the camera".into(),
                ));
            };
            jac.set_column(j, &((fp - fm) / (2.0 * step)));
        }
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &residual;

        loop {
            let mut a = jtj.clone();
            for i in 0..6 {
                a[(i, i)] += damping * jtj[(i, i)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|c| c.solve(&(-&grad))) else {
                damping *= 10.0;
                if damping > 1e16 {
                    break;
                }
                continue;
            };
            let delta = Vector6::from_column_slice(delta.as_slice());
            last_step = delta.norm();
            let (r_new, t_new) = perturb(&rotation, &translation, &delta);
            match reprojection_residuals(model, &r_new, &t_new, observed) {
                Some(res_new) if res_new.norm_squared() <= cost => {
                    rotation = r_new;
                    translation = t_new;
                    cost = res_new.norm_squared();
                    residual = res_new;
                    damping = (damping / 10.0).max(1e-12);
                    break;
                }
                _ => {
                    damping *= 10.0;
                    if damping > 1e16 {
                        break;
                    }
                }
            }
        }

        if last_step < POSE_STEP_TOLERANCE || damping > 1e16 || cost == 0.0 {
            return Ok(PlatePoseEstimate {
                h_cam_ref: RigidTransform::from_parts(
                    FrameId::Cam,
                    FrameId::Ref,
                    rotation,
                    translation,
                ),
                rms_px: (cost / observed.len() as f64).sqrt(),
                iterations: iteration,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: POSE_MAX_ITERATIONS,
        last_step,
    })
}
