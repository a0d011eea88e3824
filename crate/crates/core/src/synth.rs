//! Analytic scenes, a sphere-tracing ground-truth renderer, and synthetic
//! RGB-D datasets.
//!
//! Depth maps store camera z-depth (the RGB-D sensor convention), so they
//! back-project with [`crate::pointcloud::backproject_rgbd`] and agree with
//! [`crate::geometry::project_point`].

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, format_err, Result};
use crate::geometry::{Aabb, Camera, Intrinsics, Pose, Vec3};
use crate::image::{read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm, Image};
use crate::pointcloud::{backproject_rgbd, merge, read_ply, write_ply, PointCloud};

pub const TRACE_STEPS: usize = 64;
pub const TRACE_EPS: f64 = 1e-5;
/// Class id of pixels that hit nothing.
pub const VOID_CLASS: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    Plane {
        normal: [f64; 3],
        offset: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PrimitiveRecord", into = "PrimitiveRecord")]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
    pub class: u8,
}

/// Flat file form of a primitive; which geometric fields are required
/// depends on `type`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrimitiveRecord {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    center: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    half_extents: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normal: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offset: Option<f64>,
    albedo: [f64; 3],
    class: u8,
}

impl TryFrom<PrimitiveRecord> for Primitive {
    type Error = String;

    fn try_from(r: PrimitiveRecord) -> std::result::Result<Self, String> {
        let need = |field: &str| format!("`{}` primitive needs `{field}`", r.kind);
        let shape = match r.kind.as_str() {
            "sphere" => Shape::Sphere {
                center: r.center.ok_or_else(|| need("center"))?,
                radius: r.radius.ok_or_else(|| need("radius"))?,
            },
            "box" => Shape::Box {
                center: r.center.ok_or_else(|| need("center"))?,
                half_extents: r.half_extents.ok_or_else(|| need("half_extents"))?,
            },
            "plane" => Shape::Plane {
                normal: r.normal.ok_or_else(|| need("normal"))?,
                offset: r.offset.ok_or_else(|| need("offset"))?,
            },
            other => return Err(format!("unknown primitive type `{other}`")),
        };
        Ok(Primitive {
            shape,
            albedo: r.albedo,
            class: r.class,
        })
    }
}

impl From<Primitive> for PrimitiveRecord {
    fn from(p: Primitive) -> Self {
        let mut r = PrimitiveRecord {
            kind: String::new(),
            center: None,
            radius: None,
            half_extents: None,
            normal: None,
            offset: None,
            albedo: p.albedo,
            class: p.class,
        };
        match p.shape {
            Shape::Sphere { center, radius } => {
                r.kind = "sphere".into();
                (r.center, r.radius) = (Some(center), Some(radius));
            }
            Shape::Box {
                center,
                half_extents,
            } => {
                r.kind = "box".into();
                (r.center, r.half_extents) = (Some(center), Some(half_extents));
            }
            Shape::Plane { normal, offset } => {
                r.kind = "plane".into();
                (r.normal, r.offset) = (Some(normal), Some(offset));
            }
        }
        r
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl Shape {
    pub fn distance(&self, p: &[f64; 3]) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => {
                norm3([p[0] - center[0], p[1] - center[1], p[2] - center[2]]) - radius
            }
            Shape::Box {
                center,
                half_extents,
            } => {
                let q: [f64; 3] =
                    std::array::from_fn(|k| (p[k] - center[k]).abs() - half_extents[k]);
                let outside = norm3(q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Shape::Plane { normal, offset } => {
                normal[0] * p[0] + normal[1] * p[1] + normal[2] * p[2] - offset
            }
        }
    }

    fn bounds(&self) -> Option<Aabb> {
        let (c, h) = match *self {
            Shape::Sphere { center, radius } => (center, [radius; 3]),
            Shape::Box {
                center,
                half_extents,
            } => (center, half_extents),
            Shape::Plane { .. } => return None,
        };
        Some(Aabb {
            min: std::array::from_fn(|k| c[k] - h[k]),
            max: std::array::from_fn(|k| c[k] + h[k]),
        })
    }
}

/// Signed distance and surface attributes at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSample {
    pub distance: f64,
    pub albedo: [f64; 3],
    pub class: u8,
}

/// Min-union of primitives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
}

impl AnalyticScene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let scene = Self { primitives };
        scene.validate()?;
        Ok(scene)
    }

    fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(domain("a scene needs at least one primitive"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let ok = match p.shape {
                Shape::Sphere { radius, .. } => radius > 0.0,
                Shape::Box { half_extents, .. } => half_extents.iter().all(|&h| h > 0.0),
                Shape::Plane { normal, .. } => (norm3(normal) - 1.0).abs() < 1e-9,
            };
            if !ok {
                return Err(domain(format!(
                    "primitive {i} has a non-positive size or non-unit normal"
                )));
            }
        }
        Ok(())
    }

    /// Parses the JSON scene format; errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let scene: AnalyticScene =
            serde_json::from_str(text).map_err(|e| format_err(format!("scene file: {e}")))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    /// Two spheres resting on a floor slab.
    pub fn demo() -> Self {
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Box {
                        center: [0.0, 0.0, -0.05],
                        half_extents: [0.8, 0.8, 0.05],
                    },
                    albedo: [0.75, 0.75, 0.7],
                    class: 1,
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: [-0.3, 0.15, 0.3],
                        radius: 0.3,
                    },
                    albedo: [0.85, 0.25, 0.2],
                    class: 2,
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: [0.35, -0.25, 0.2],
                        radius: 0.2,
                    },
                    albedo: [0.2, 0.4, 0.9],
                    class: 3,
                },
            ],
        }
    }

    pub fn sample(&self, p: &[f64; 3]) -> SceneSample {
        let mut best = SceneSample {
            distance: f64::INFINITY,
            albedo: [0.0; 3],
            class: VOID_CLASS,
        };
        for prim in &self.primitives {
            let d = prim.shape.distance(p);
            if d < best.distance {
                best = SceneSample {
                    distance: d,
                    albedo: prim.albedo,
                    class: prim.class,
                };
            }
        }
        best
    }

    pub fn distance(&self, p: &[f64; 3]) -> f64 {
        self.sample(p).distance
    }

    /// Unit outward normal by central differences.
    pub fn normal(&self, p: &[f64; 3]) -> [f64; 3] {
        let h = 1e-6;
        let g: [f64; 3] = std::array::from_fn(|k| {
            let mut a = *p;
            let mut b = *p;
            a[k] += h;
            b[k] -= h;
            (self.distance(&a) - self.distance(&b)) / (2.0 * h)
        });
        let n = norm3(g);
        if n > 0.0 {
            g.map(|v| v / n)
        } else {
            [0.0, 0.0, 1.0]
        }
    }

    /// Box around the finite primitives; `None` for plane-only scenes.
    pub fn bounds(&self) -> Option<Aabb> {
        let mut it = self.primitives.iter().filter_map(|p| p.shape.bounds());
        let first = it.next()?;
        Some(it.fold(first, |a, b| Aabb {
            min: std::array::from_fn(|k| a.min[k].min(b.min[k])),
            max: std::array::from_fn(|k| a.max[k].max(b.max[k])),
        }))
    }

    /// Diagonal of [`AnalyticScene::bounds`].
    pub fn diameter(&self) -> Option<f64> {
        self.bounds().map(|b| b.diagonal())
    }
}

/// Sphere-traced ground truth for one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFrame {
    pub rgb: Image,
    /// Camera z-depth; 0 where nothing was hit.
    pub depth: Image,
    pub classes: Vec<u8>,
}

/// Marches from the ray origin; returns the hit parameter, if any.
pub fn sphere_trace(scene: &AnalyticScene, origin: &Vec3, dir: &Vec3, max_t: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..TRACE_STEPS {
        let p = origin + dir * t;
        let d = scene.distance(&[p.x, p.y, p.z]);
        if d < TRACE_EPS {
            return Some(t);
        }
        t += d;
        if t > max_t {
            return None;
        }
    }
    None
}

/// Lambertian shading: `albedo * (0.9 * max(0, n . light) + 0.1)`.
pub fn oracle_render(
    scene: &AnalyticScene,
    camera: &Camera,
    light: [f64; 3],
) -> Result<OracleFrame> {
    let light = Vec3::from(light);
    let ln = light.norm();
    if !(ln > 0.0) {
        return Err(domain("light direction must be non-zero"));
    }
    let light = light / ln;
    let max_t = 2.0 * scene.diameter().unwrap_or(50.0);
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let forward: Vec3 = camera.pose.rotation().column(2).into();
    let mut rgb = Image::zeros(w, h, 3);
    let mut depth = Image::zeros(w, h, 1);
    let mut classes = vec![VOID_CLASS; w * h];
    for y in 0..h {
        for x in 0..w {
            let ray = camera.ray([x as f64, y as f64])?;
            let Some(t) = sphere_trace(scene, &ray.origin, &ray.direction, max_t) else {
                continue;
            };
            let p: [f64; 3] = ray.at(t).into();
            let s = scene.sample(&p);
            let n = Vec3::from(scene.normal(&p));
            let shade = 0.9 * n.dot(&light).max(0.0) + 0.1;
            rgb.pixel_mut(x, y)
                .copy_from_slice(&s.albedo.map(|a| a * shade));
            depth.pixel_mut(x, y)[0] = t * ray.direction.dot(&forward);
            classes[y * w + x] = s.class;
        }
    }
    Ok(OracleFrame {
        rgb,
        depth,
        classes,
    })
}

/// One supervision view.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub camera: Camera,
    pub rgb: Image,
    pub depth: Image,
    pub classes: Vec<u8>,
}

/// Where the synthetic cameras sit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingSpec {
    /// Camera distance in units of the scene's bounding radius.
    pub distance_factor: f64,
    /// Elevation above the horizontal plane through the scene center.
    pub elevation: f64,
    /// Maximum random azimuth jitter, as a fraction of the view spacing.
    pub jitter: f64,
    pub light: [f64; 3],
}

impl Default for RingSpec {
    fn default() -> Self {
        Self {
            distance_factor: 2.2,
            elevation: 0.6,
            jitter: 0.1,
            light: [0.3, -0.4, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    /// Fused cloud of the first `fused_views` frames: RGB then unit normals.
    pub cloud: PointCloud,
}

/// Number of held-out views: the last `ceil(20%)`.
pub fn heldout_count(n_views: usize) -> usize {
    (n_views as f64 * 0.2).ceil() as usize
}

impl Dataset {
    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.frames.len() - heldout_count(self.frames.len())
    }

    pub fn heldout_indices(&self) -> std::ops::Range<usize> {
        self.frames.len() - heldout_count(self.frames.len())..self.frames.len()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, f) in self.frames.iter().enumerate() {
            fs::write(dir.join(format!("cam_{i:03}.json")), f.camera.to_json())?;
            write_ppm(
                &mut BufWriter::new(fs::File::create(dir.join(format!("rgb_{i:03}.ppm")))?),
                &f.rgb,
            )?;
            write_pfm(
                &mut BufWriter::new(fs::File::create(dir.join(format!("depth_{i:03}.pfm")))?),
                &f.depth,
            )?;
            write_pgm(
                &mut BufWriter::new(fs::File::create(dir.join(format!("sem_{i:03}.pgm")))?),
                f.rgb.width,
                f.rgb.height,
                &f.classes,
            )?;
        }
        write_ply(
            &mut BufWriter::new(fs::File::create(dir.join("cloud.ply"))?),
            &self.cloud,
        )?;
        Ok(())
    }

    /// Reads a dataset directory. Colors come back quantized to 8 bits.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut frames = Vec::new();
        for i in 0.. {
            let cam_path = dir.join(format!("cam_{i:03}.json"));
            if !cam_path.exists() {
                break;
            }
            let camera = *Camera::parse_json(&fs::read_to_string(&cam_path)?)?
                .first()
                .expect("parse_json never returns an empty list");
            let open = |name: String| -> Result<BufReader<fs::File>> {
                Ok(BufReader::new(fs::File::open(dir.join(name))?))
            };
            let rgb = read_ppm(&mut open(format!("rgb_{i:03}.ppm"))?)?;
            let depth = read_pfm(&mut open(format!("depth_{i:03}.pfm"))?)?;
            let (w, h, classes) = read_pgm(&mut open(format!("sem_{i:03}.pgm"))?)?;
            let (iw, ih) = (camera.intrinsics.width, camera.intrinsics.height);
            if (rgb.width, rgb.height) != (iw, ih)
                || (depth.width, depth.height) != (iw, ih)
                || (w, h) != (iw, ih)
            {
                return Err(format_err(format!(
                    "frame {i}: image sizes disagree with the camera"
                )));
            }
            frames.push(Frame {
                camera,
                rgb,
                depth,
                classes,
            });
        }
        if frames.is_empty() {
            return Err(format_err(format!("no frames in {}", dir.display())));
        }
        let cloud = read_ply(BufReader::new(fs::File::open(dir.join("cloud.ply"))?))?;
        Ok(Self { frames, cloud })
    }
}

/// Ring camera looking at the center of `bounds`.
pub fn ring_camera(
    bounds: &Aabb,
    ring: &RingSpec,
    azimuth: f64,
    resolution: usize,
) -> Result<Camera> {
    let c: [f64; 3] = std::array::from_fn(|k| 0.5 * (bounds.min[k] + bounds.max[k]));
    let radius = 0.5 * bounds.diagonal();
    let dist = ring.distance_factor * radius;
    let eye = Vec3::new(
        c[0] + dist * ring.elevation.cos() * azimuth.cos(),
        c[1] + dist * ring.elevation.cos() * azimuth.sin(),
        c[2] + dist * ring.elevation.sin(),
    );
    let fov = 2.0 * (1.0 / ring.distance_factor).asin() * 1.05;
    Ok(Camera {
        intrinsics: Intrinsics::from_fov(fov, resolution, resolution)?,
        pose: Pose::look_at(eye, Vec3::from(c), Vec3::new(0.0, 0.0, 1.0))?,
    })
}

/// Renders `n_views` ring views and fuses the first `fused_views` into a
/// cloud whose features are RGB followed by the analytic unit normal.
pub fn make_dataset<R: Rng + ?Sized>(
    scene: &AnalyticScene,
    n_views: usize,
    resolution: usize,
    fused_views: usize,
    ring: &RingSpec,
    rng: &mut R,
) -> Result<Dataset> {
    if n_views < 2 {
        return Err(domain(format!(
            "a dataset needs at least 2 views, got {n_views}"
        )));
    }
    if fused_views == 0 || fused_views > n_views {
        return Err(domain(format!(
            "cannot fuse {fused_views} of {n_views} views"
        )));
    }
    let bounds = scene
        .bounds()
        .ok_or_else(|| domain("scene has no finite primitive to frame"))?;
    let spacing = std::f64::consts::TAU / n_views as f64;
    let mut frames = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let azimuth = spacing * (i as f64 + ring.jitter * rng.gen_range(-1.0..1.0));
        let camera = ring_camera(&bounds, ring, azimuth, resolution)?;
        let o = oracle_render(scene, &camera, ring.light)?;
        frames.push(Frame {
            camera,
            rgb: o.rgb,
            depth: o.depth,
            classes: o.classes,
        });
    }
    let clouds = frames[..fused_views]
        .iter()
        .map(|f| backproject_rgbd(&f.depth, &f.rgb, &f.camera.intrinsics, &f.camera.pose))
        .collect::<Result<Vec<_>>>()?;
    let rgb_cloud = merge(&clouds)?;
    let mut feats = Vec::with_capacity(rgb_cloud.len() * 6);
    for (i, p) in rgb_cloud.coords().iter().enumerate() {
        feats.extend_from_slice(rgb_cloud.feat(i));
        feats.extend_from_slice(&scene.normal(p));
    }
    let cloud = PointCloud::new(rgb_cloud.coords().to_vec(), feats, 6)?.with_normals_at(3)?;
    Ok(Dataset { frames, cloud })
}

/// Back-projected ground-truth surface points of the given frames.
pub fn visible_surface(frames: &[Frame]) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::new();
    for f in frames {
        let pc = backproject_rgbd(&f.depth, &f.rgb, &f.camera.intrinsics, &f.camera.pose)?;
        out.extend_from_slice(pc.coords());
    }
    Ok(out)
}
