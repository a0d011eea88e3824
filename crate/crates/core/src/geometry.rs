//! Pinhole cameras, rigid transforms and ray generation.
//!
//! Camera frame convention: +x right, +y down, +z forward (optical axis).
//! Poses are stored camera-to-world, so a ray origin is simply the pose
//! translation.
//!
//! Image coordinates are continuous: pixel `(u, v)` covers `[u, u+1) x [v, v+1)`
//! and its center is `(u + 0.5, v + 0.5)`. [`pixel_to_ray`] always shoots
//! through `px + 0.5`, and [`project_point`] returns continuous coordinates, so
//! `project_point(pixel_to_ray(px).at(t)) == px + 0.5`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, format_err, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Depth below which a projected point counts as behind the camera.
pub const BEHIND_EPS: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(domain(format!(
                "focal lengths must be positive, got {fx}, {fy}"
            )));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(domain(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square image with the principal point at the image center and the given
    /// horizontal field of view.
    pub fn from_fov(fov_x: f64, width: usize, height: usize) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Camera-to-world rigid pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`. `up` is the world direction that
    /// should appear upward in the image (image +y points down).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(domain("look_at: eye and target coincide"));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(domain("look_at: up is parallel to the viewing direction"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_columns(&[x, y, z]);
        Self::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    /// Camera center in world coordinates.
    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_transform(&self) -> RigidTransform {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        RigidTransform { matrix: m }
    }
}

fn check_rotation(r: &Mat3) -> Result<()> {
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    if !(err <= ORTHO_TOL) {
        return Err(domain(format!(
            "rotation is not orthonormal (error {err:e})"
        )));
    }
    let det = r.determinant();
    if !((det - 1.0).abs() <= ORTHO_TOL) {
        return Err(domain(format!(
            "rotation determinant is {det}, expected +1"
        )));
    }
    Ok(())
}

/// 4x4 homogeneous transform whose linear block is orthonormal.
///
/// Reflections are allowed (augmentation flips produce them); the bottom row
/// must be exactly `(0, 0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    matrix: Matrix4<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        let bottom = [
            matrix[(3, 0)],
            matrix[(3, 1)],
            matrix[(3, 2)],
            matrix[(3, 3)],
        ];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(domain(format!(
                "bottom row must be (0,0,0,1), got {bottom:?}"
            )));
        }
        let linear: Mat3 = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (linear.transpose() * linear - Mat3::identity()).abs().max();
        if !(err <= ORTHO_TOL) {
            return Err(domain(format!(
                "linear block is not orthonormal (error {err:e})"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn from_rows(rows: &[f64]) -> Result<Self> {
        if rows.len() != 16 {
            return Err(format_err(format!(
                "expected 16 matrix entries, got {}",
                rows.len()
            )));
        }
        Self::from_matrix(Matrix4::from_row_slice(rows))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn linear(&self) -> Mat3 {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_rows(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.linear() * p + self.translation()
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.linear() * v
    }

    /// Pose of a camera after the scene has been moved by `self`. Only valid
    /// for proper rotations with unit scale.
    pub fn apply_to_pose(&self, pose: &Pose) -> Result<Pose> {
        Pose::new(
            self.linear() * pose.rotation(),
            self.apply_point(pose.translation()),
        )
    }

    pub fn to_pose(&self) -> Result<Pose> {
        Pose::new(self.linear(), self.translation())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(domain("ray direction must be a finite non-zero vector"));
        }
        Ok(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|k| !(min[k] < max[k])) {
            return Err(domain(format!("box min {min:?} must be below max {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn padded(&self, pad: f64) -> Result<Self> {
        Self::new(
            [self.min[0] - pad, self.min[1] - pad, self.min[2] - pad],
            [self.max[0] + pad, self.max[1] + pad, self.max[2] + pad],
        )
    }
}

/// Continuous pixel coordinates plus camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    /// Depth is at or below [`BEHIND_EPS`]; `pixel` is meaningless then.
    pub behind: bool,
}

/// Ray through the center of pixel `px` (i.e. through `px + 0.5`).
pub fn pixel_to_ray(intr: &Intrinsics, pose: &Pose, px: [f64; 2]) -> Result<Ray> {
    if !(px[0] >= 0.0 && px[0] < intr.width as f64 && px[1] >= 0.0 && px[1] < intr.height as f64) {
        return Err(domain(format!(
            "pixel {px:?} outside {}x{} image",
            intr.width, intr.height
        )));
    }
    let cam = Vec3::new(
        (px[0] + 0.5 - intr.cx) / intr.fx,
        (px[1] + 0.5 - intr.cy) / intr.fy,
        1.0,
    );
    Ray::new(*pose.translation(), pose.rotation() * cam)
}

pub fn project_point(intr: &Intrinsics, pose: &Pose, p: &Vec3) -> Projection {
    let c = pose.world_to_camera(p);
    let depth = c.z;
    if depth <= BEHIND_EPS {
        return Projection {
            pixel: [f64::NAN, f64::NAN],
            depth,
            behind: true,
        };
    }
    Projection {
        pixel: [
            intr.fx * c.x / depth + intr.cx,
            intr.fy * c.y / depth + intr.cy,
        ],
        depth,
        behind: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// Deterministic bin centers.
    UniformCenter,
    /// One uniform draw per bin.
    Stratified,
}

/// `count` strictly increasing ray parameters in `[near, far)`.
pub fn sample_t_values<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    count: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(near >= 0.0 && near < far && far.is_finite()) {
        return Err(domain(format!("invalid sampling interval [{near}, {far})")));
    }
    if count == 0 {
        return Err(domain("sample count must be at least 1"));
    }
    let step = (far - near) / count as f64;
    let ts = (0..count)
        .map(|j| {
            let u = match mode {
                SampleMode::UniformCenter => 0.5,
                SampleMode::Stratified => rng.gen::<f64>(),
            };
            near + step * (j as f64 + u)
        })
        .collect();
    Ok(ts)
}

/// Slab test; returns the intersection interval clipped to `t >= 0`.
pub fn ray_aabb_clip(ray: &Ray, aabb: &Aabb) -> Option<(f64, f64)> {
    let mut t_enter = 0.0_f64;
    let mut t_exit = f64::INFINITY;
    for k in 0..3 {
        let o = ray.origin[k];
        let d = ray.direction[k];
        if d == 0.0 {
            if o < aabb.min[k] || o > aabb.max[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let mut t0 = (aabb.min[k] - o) * inv;
        let mut t1 = (aabb.max[k] - o) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_enter = t_enter.max(t0);
        t_exit = t_exit.min(t1);
    }
    (t_exit > t_enter).then_some((t_enter, t_exit))
}

/// Intrinsics plus pose, as stored in camera files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    cam_to_world: Vec<f64>,
}

impl Camera {
    pub fn ray(&self, px: [f64; 2]) -> Result<Ray> {
        pixel_to_ray(&self.intrinsics, &self.pose, px)
    }

    pub fn project(&self, p: &Vec3) -> Projection {
        project_point(&self.intrinsics, &self.pose, p)
    }

    fn to_record(self) -> CameraRecord {
        let i = self.intrinsics;
        CameraRecord {
            fx: i.fx,
            fy: i.fy,
            cx: i.cx,
            cy: i.cy,
            width: i.width,
            height: i.height,
            cam_to_world: self.pose.to_transform().to_rows().to_vec(),
        }
    }

    fn from_record(r: CameraRecord) -> Result<Self> {
        let intrinsics = Intrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)?;
        let pose = RigidTransform::from_rows(&r.cam_to_world)?.to_pose()?;
        Ok(Self { intrinsics, pose })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_record()).expect("camera serializes")
    }

    pub fn trajectory_to_json(cameras: &[Camera]) -> String {
        let records: Vec<_> = cameras.iter().map(|c| c.to_record()).collect();
        serde_json::to_string_pretty(&records).expect("cameras serialize")
    }

    /// Parses either a single camera object or an array of them.
    pub fn parse_json(text: &str) -> Result<Vec<Camera>> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let records: Vec<CameraRecord> = if value.is_array() {
            serde_json::from_value(value)?
        } else {
            vec![serde_json::from_value(value)?]
        };
        if records.is_empty() {
            return Err(Error::Format("camera file holds no cameras".into()));
        }
        records.into_iter().map(Camera::from_record).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn approx3(a: &Vec3, b: [f64; 3], tol: f64) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let ray = pixel_to_ray(&intr(), &Pose::identity(), [49.5, 49.5]).unwrap();
        approx3(&ray.direction, [0.0, 0.0, 1.0], 1e-15);
        approx3(&ray.origin, [0.0, 0.0, 0.0], 0.0);
    }

    #[test]
    fn off_axis_pixel_direction() {
        // (u - cx) / fx = 1 needs u = 150, so the sensor must be wider than 100.
        let wide = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 100).unwrap();
        let ray = pixel_to_ray(&wide, &Pose::identity(), [149.5, 49.5]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        approx3(&ray.direction, [h, 0.0, h], 1e-12);
    }

    #[test]
    fn rotated_pose_flips_axis() {
        let rot = Mat3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        let pose = Pose::new(rot, Vec3::zeros()).unwrap();
        let ray = pixel_to_ray(&intr(), &pose, [49.5, 49.5]).unwrap();
        approx3(&ray.direction, [0.0, 0.0, -1.0], 1e-15);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        assert!(pixel_to_ray(&intr(), &Pose::identity(), [100.0, 3.0]).is_err());
        assert!(pixel_to_ray(&intr(), &Pose::identity(), [-0.1, 3.0]).is_err());
    }

    #[test]
    fn projection_examples() {
        let p = project_point(&intr(), &Pose::identity(), &Vec3::new(0.0, 0.0, 1.0));
        assert_eq!((p.pixel, p.depth, p.behind), ([50.0, 50.0], 1.0, false));
        let p = project_point(&intr(), &Pose::identity(), &Vec3::new(0.5, 0.0, 1.0));
        assert_eq!(p.pixel, [100.0, 50.0]);
        let p = project_point(&intr(), &Pose::identity(), &Vec3::new(0.0, 0.0, -1.0));
        assert!(p.behind);
        let p = project_point(&intr(), &Pose::identity(), &Vec3::new(0.0, 0.0, 0.0));
        assert!(p.behind);
    }

    #[test]
    fn uniform_center_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_t_values(0.0, 1.0, 4, SampleMode::UniformCenter, &mut rng).unwrap();
        assert_eq!(t, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(sample_t_values(2.0, 2.0, 8, SampleMode::UniformCenter, &mut rng).is_err());
        assert!(sample_t_values(0.0, 1.0, 0, SampleMode::UniformCenter, &mut rng).is_err());
    }

    #[test]
    fn stratified_samples_stay_in_their_bins() {
        let (near, far, d) = (0.3, 2.1, 16usize);
        let delta = (far - near) / d as f64;
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = sample_t_values(near, far, d, SampleMode::Stratified, &mut rng).unwrap();
            for (j, &tj) in t.iter().enumerate() {
                assert!(tj >= near + j as f64 * delta && tj < near + (j + 1) as f64 * delta);
            }
            assert!(t.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn aabb_clip_examples() {
        let unit = Aabb::new([-1.0; 3], [1.0; 3]).unwrap();
        let r = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(ray_aabb_clip(&r, &unit), Some((1.0, 3.0)));
        let r = Ray::new(Vec3::new(0.0, 0.0, 5.0), Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(ray_aabb_clip(&r, &unit), None);
        let r = Ray::new(Vec3::new(0.2, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(ray_aabb_clip(&r, &unit), Some((0.0, 1.0)));
        let r = Ray::new(Vec3::new(0.0, 3.0, 0.0), Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(ray_aabb_clip(&r, &unit), None);
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let pose = Pose::look_at(
            Vec3::new(1.0, -2.0, 0.7),
            Vec3::new(0.1, 0.2, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        let id = pose.compose(&pose.inverse());
        assert!((id.rotation() - Mat3::identity()).abs().max() < 1e-9);
        assert!(id.translation().norm() < 1e-9);
    }

    #[test]
    fn invalid_rotation_is_rejected() {
        let r = Mat3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Pose::new(r, Vec3::zeros()).is_err());
        let reflect = Mat3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Pose::new(reflect, Vec3::zeros()).is_err());
    }

    #[test]
    fn camera_json_round_trip() {
        let pose = Pose::look_at(
            Vec3::new(2.0, 0.5, 1.0),
            Vec3::zeros(),
            Vec3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        let cam = Camera {
            intrinsics: intr(),
            pose,
        };
        let back = Camera::parse_json(&cam.to_json()).unwrap();
        assert_eq!(back, vec![cam]);
        let traj = Camera::parse_json(&Camera::trajectory_to_json(&[cam, cam])).unwrap();
        assert_eq!(traj.len(), 2);
    }

    #[test]
    fn look_at_points_the_optical_axis_at_the_target() {
        let eye = Vec3::new(0.0, -3.0, 1.0);
        let pose = Pose::look_at(eye, Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let p = project_point(&intr(), &pose, &Vec3::zeros());
        assert!((p.pixel[0] - 50.0).abs() < 1e-9 && (p.pixel[1] - 50.0).abs() < 1e-9);
        // World up lands in the upper half of the image.
        let up = project_point(&intr(), &pose, &Vec3::new(0.0, 0.0, 0.5));
        assert!(up.pixel[1] < 50.0);
    }

    proptest::proptest! {
        #[test]
        fn pixel_ray_projection_round_trip(
            u in 0.0f64..99.99, v in 0.0f64..99.99, t in 0.01f64..50.0,
            ex in -3.0f64..3.0, ey in -3.0f64..3.0,
        ) {
            let pose = Pose::look_at(
                Vec3::new(ex, ey, 2.0), Vec3::new(0.1, -0.2, 0.0), Vec3::new(0.0, 0.0, 1.0),
            ).unwrap();
            let ray = pixel_to_ray(&intr(), &pose, [u, v]).unwrap();
            let p = project_point(&intr(), &pose, &ray.at(t));
            proptest::prop_assert!(!p.behind);
            proptest::prop_assert!((p.pixel[0] - (u + 0.5)).abs() < 1e-6);
            proptest::prop_assert!((p.pixel[1] - (v + 0.5)).abs() < 1e-6);
        }
    }
}
