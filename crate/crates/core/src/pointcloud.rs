//! Point clouds: grid sampling, augmentation, group masking, RGB-D
//! back-projection, and the ASCII PLY codec.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::Rotation3;
use rand::seq::index;
use rand::Rng;

use crate::error::{contract, domain, format_err, Result};
use crate::geometry::{Intrinsics, Mat3, Pose, RigidTransform, Vec3};
use crate::image::Image;

/// `n` coordinates (meters) with `channels` feature columns each.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f64; 3]>,
    feats: Vec<f64>,
    channels: usize,
    /// First column of a 3-wide block of unit normals, if the cloud has one.
    normals_at: Option<usize>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>, feats: Vec<f64>, channels: usize) -> Result<Self> {
        if feats.len() != coords.len() * channels {
            return Err(contract(format!(
                "{} points with {channels} channels need {} feature values, got {}",
                coords.len(),
                coords.len() * channels,
                feats.len()
            )));
        }
        if coords
            .iter()
            .flatten()
            .chain(feats.iter())
            .any(|v| !v.is_finite())
        {
            return Err(domain("point cloud holds a non-finite value"));
        }
        Ok(Self {
            coords,
            feats,
            channels,
            normals_at: None,
        })
    }

    pub fn empty(channels: usize) -> Self {
        Self {
            coords: Vec::new(),
            feats: Vec::new(),
            channels,
            normals_at: None,
        }
    }

    /// Tags columns `col..col+3` as unit normals.
    pub fn with_normals_at(mut self, col: usize) -> Result<Self> {
        if col + 3 > self.channels {
            return Err(contract(format!(
                "normal block at column {col} does not fit {} channels",
                self.channels
            )));
        }
        self.normals_at = Some(col);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn normals_at(&self) -> Option<usize> {
        self.normals_at
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn feat(&self, i: usize) -> &[f64] {
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    /// Sub-cloud made of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> PointCloud {
        let coords = rows.iter().map(|&i| self.coords[i]).collect();
        let mut feats = Vec::with_capacity(rows.len() * self.channels);
        for &i in rows {
            feats.extend_from_slice(self.feat(i));
        }
        PointCloud {
            coords,
            feats,
            channels: self.channels,
            normals_at: self.normals_at,
        }
    }

    /// Axis-aligned bounds, `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = self.coords.first()?;
        let (mut lo, mut hi) = (*first, *first);
        for p in &self.coords {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Some((lo, hi))
    }
}

/// Quantization grid with cell size `cell` anchored at `origin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub cell: [f64; 3],
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(cell: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if cell.iter().any(|&c| !(c > 0.0)) {
            return Err(domain(format!("grid cell {cell:?} must be positive")));
        }
        Ok(Self { cell, origin })
    }

    pub fn isotropic(cell: f64) -> Result<Self> {
        Self::new([cell; 3], [0.0; 3])
    }

    pub fn cell_of(&self, p: &[f64; 3]) -> [i64; 3] {
        std::array::from_fn(|k| ((p[k] - self.origin[k]) / self.cell[k]).floor() as i64)
    }

    pub fn center_of(&self, c: [i64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| self.origin[k] + (c[k] as f64 + 0.5) * self.cell[k])
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Keeps one point per occupied cell: the one nearest the cell center, ties
/// going to the lowest input index. Output is ordered by `(iz, iy, ix)`.
pub fn grid_sample(pc: &PointCloud, grid: &GridSpec) -> PointCloud {
    let mut best: HashMap<[i64; 3], (usize, f64)> = HashMap::new();
    for (i, p) in pc.coords.iter().enumerate() {
        let cell = grid.cell_of(p);
        let d = dist2(p, &grid.center_of(cell));
        best.entry(cell)
            .and_modify(|e| {
                if d < e.1 {
                    *e = (i, d);
                }
            })
            .or_insert((i, d));
    }
    let mut cells: Vec<([i64; 3], usize)> = best.into_iter().map(|(c, (i, _))| (c, i)).collect();
    cells.sort_unstable_by_key(|(c, _)| (c[2], c[1], c[0]));
    let rows: Vec<usize> = cells.into_iter().map(|(_, i)| i).collect();
    pc.select(&rows)
}

/// Concrete augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub rot_z: f64,
    pub scale: f64,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rot_z: 0.0,
        scale: 1.0,
        flip_x: false,
        flip_y: false,
    };
}

/// Ranges the pre-training loop draws augmentations from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRanges {
    /// Rotation about z is drawn from `[-max_rot_z, max_rot_z]`.
    pub max_rot_z: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_x_prob: f64,
    pub flip_y_prob: f64,
}

impl AugmentRanges {
    pub const NONE: AugmentRanges = AugmentRanges {
        max_rot_z: 0.0,
        scale_min: 1.0,
        scale_max: 1.0,
        flip_x_prob: 0.0,
        flip_y_prob: 0.0,
    };

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        let rot_z = if self.max_rot_z > 0.0 {
            rng.gen_range(-self.max_rot_z..=self.max_rot_z)
        } else {
            0.0
        };
        let scale = if self.scale_max > self.scale_min {
            rng.gen_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        let flip_x = rng.gen::<f64>() < self.flip_x_prob;
        let flip_y = rng.gen::<f64>() < self.flip_y_prob;
        AugmentParams {
            rot_z,
            scale,
            flip_x,
            flip_y,
        }
    }
}

/// The transform an augmentation applied: `p -> scale * linear * p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    /// Rotation about z followed by the axis flips (orthonormal, det ±1).
    pub linear: RigidTransform,
    pub scale: f64,
}

impl Augmentation {
    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.linear.apply_point(p) * self.scale
    }

    pub fn apply_direction(&self, d: &Vec3) -> Vec3 {
        self.linear.apply_vector(d)
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.linear == RigidTransform::identity()
    }
}

pub fn augment(pc: &PointCloud, params: &AugmentParams) -> Result<(PointCloud, Augmentation)> {
    if !(params.scale > 0.0 && params.scale.is_finite()) {
        return Err(domain(format!(
            "augmentation scale must be positive, got {}",
            params.scale
        )));
    }
    if *params == AugmentParams::IDENTITY {
        let linear = RigidTransform::identity();
        return Ok((pc.clone(), Augmentation { linear, scale: 1.0 }));
    }
    let rot = *Rotation3::from_axis_angle(&Vec3::z_axis(), params.rot_z).matrix();
    let flip = Mat3::from_diagonal(&Vec3::new(
        if params.flip_x { -1.0 } else { 1.0 },
        if params.flip_y { -1.0 } else { 1.0 },
        1.0,
    ));
    let linear = flip * rot;
    let mut out = pc.clone();
    for p in out.coords.iter_mut() {
        let q = linear * Vec3::from(*p) * params.scale;
        *p = [q.x, q.y, q.z];
    }
    if let Some(col) = pc.normals_at {
        for i in 0..out.len() {
            let row = &mut out.feats[i * pc.channels + col..i * pc.channels + col + 3];
            let n = linear * Vec3::new(row[0], row[1], row[2]);
            row.copy_from_slice(&[n.x, n.y, n.z]);
        }
    }
    let mut m = nalgebra::Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
    let linear = RigidTransform::from_matrix(m)?;
    Ok((
        out,
        Augmentation {
            linear,
            scale: params.scale,
        },
    ))
}

/// The partition drawn by [`mask_groups_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMask {
    /// Group id per input point.
    pub assignment: Vec<usize>,
    /// Which groups were dropped.
    pub removed: Vec<bool>,
    /// Surviving input rows, ascending.
    pub kept: Vec<usize>,
}

/// Effective group count: `num_groups`, capped by the point count and, when
/// `group_size > 0`, by `ceil(n / group_size)`.
pub fn effective_groups(n: usize, num_groups: usize, group_size: usize) -> usize {
    let mut k = num_groups.min(n);
    if group_size > 0 {
        k = k.min(n.div_ceil(group_size));
    }
    k
}

pub fn mask_groups_detailed<R: Rng + ?Sized>(
    pc: &PointCloud,
    num_groups: usize,
    group_size: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<GroupMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(domain(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let n = pc.len();
    let k = effective_groups(n, num_groups, group_size);
    if k == 0 || ratio == 0.0 {
        return Ok(GroupMask {
            assignment: vec![0; n],
            removed: vec![false; k],
            kept: (0..n).collect(),
        });
    }
    let seeds = index::sample(rng, n, k).into_vec();
    let centers: Vec<[f64; 3]> = seeds.iter().map(|&i| pc.coords[i]).collect();
    let assignment: Vec<usize> = pc
        .coords
        .iter()
        .map(|p| {
            let mut best = (0usize, f64::INFINITY);
            for (g, c) in centers.iter().enumerate() {
                let d = dist2(p, c);
                if d < best.1 {
                    best = (g, d);
                }
            }
            best.0
        })
        .collect();
    // floor(ratio * k), tolerant of products like 0.29 * 100 = 28.999...
    let drop = ((ratio * k as f64) + 1e-9).floor() as usize;
    let mut removed = vec![false; k];
    for g in index::sample(rng, k, drop.min(k)).into_iter() {
        removed[g] = true;
    }
    let kept = (0..n).filter(|&i| !removed[assignment[i]]).collect();
    Ok(GroupMask {
        assignment,
        removed,
        kept,
    })
}

/// Drops `floor(ratio * groups)` nearest-seed groups at random.
pub fn mask_groups<R: Rng + ?Sized>(
    pc: &PointCloud,
    num_groups: usize,
    group_size: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    let mask = mask_groups_detailed(pc, num_groups, group_size, ratio, rng)?;
    Ok(pc.select(&mask.kept))
}

/// One world-space point per pixel with finite positive z-depth; features
/// are the pixel's RGB.
pub fn backproject_rgbd(
    depth: &Image,
    color: &Image,
    intr: &Intrinsics,
    pose: &Pose,
) -> Result<PointCloud> {
    if depth.channels != 1 || color.channels != 3 || !depth.same_size(color) {
        return Err(contract(
            "depth (1 channel) and color (3 channels) must share H x W",
        ));
    }
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let z = depth.get(u, v, 0);
            if !(z.is_finite() && z > 0.0) {
                continue;
            }
            let cam = Vec3::new(
                (u as f64 + 0.5 - intr.cx) / intr.fx * z,
                (v as f64 + 0.5 - intr.cy) / intr.fy * z,
                z,
            );
            let w = pose.camera_to_world(&cam);
            coords.push([w.x, w.y, w.z]);
            feats.extend_from_slice(color.pixel(u, v));
        }
    }
    PointCloud::new(coords, feats, 3)
}

pub fn merge(clouds: &[PointCloud]) -> Result<PointCloud> {
    let Some(first) = clouds.first() else {
        return Err(contract("merge needs at least one cloud"));
    };
    let mut out = PointCloud::empty(first.channels);
    out.normals_at = first.normals_at;
    for c in clouds {
        if c.channels != first.channels || c.normals_at != first.normals_at {
            return Err(domain(format!(
                "cannot merge clouds with {} and {} channels",
                first.channels, c.channels
            )));
        }
        out.coords.extend_from_slice(&c.coords);
        out.feats.extend_from_slice(&c.feats);
    }
    Ok(out)
}

/// PLY layouts this crate reads and writes.
fn ply_layout(pc: &PointCloud) -> Result<(bool, bool)> {
    match (pc.channels, pc.normals_at) {
        (0, None) => Ok((false, false)),
        (3, None) => Ok((true, false)),
        (3, Some(0)) => Ok((false, true)),
        (6, Some(3)) => Ok((true, true)),
        (ch, n) => Err(format_err(format!(
            "no PLY layout for {ch} channels with normals at {n:?}"
        ))),
    }
}

/// ASCII PLY with `x y z`, optional `red green blue` (uchar), optional
/// `nx ny nz`.
pub fn write_ply<W: Write>(w: &mut W, pc: &PointCloud) -> Result<()> {
    let (color, normals) = ply_layout(pc)?;
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", pc.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if color {
        writeln!(
            w,
            "property uchar red\nproperty uchar green\nproperty uchar blue"
        )?;
    }
    if normals {
        writeln!(w, "property float nx\nproperty float ny\nproperty float nz")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..pc.len() {
        let p = pc.coords[i];
        write!(w, "{} {} {}", p[0], p[1], p[2])?;
        let f = pc.feat(i);
        if color {
            for c in &f[..3] {
                write!(w, " {}", crate::image::to_byte(*c))?;
            }
        }
        if let (true, Some(col)) = (normals, pc.normals_at) {
            write!(w, " {} {} {}", f[col], f[col + 1], f[col + 2])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_ply<R: BufRead>(r: R) -> Result<PointCloud> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| format_err("unexpected end of PLY file"))?
            .map_err(Into::into)
    };
    if next()?.trim() != "ply" {
        return Err(format_err("missing `ply` magic"));
    }
    let fmt = next()?;
    if fmt.trim() != "format ascii 1.0" {
        return Err(format_err(format!(
            "unsupported PLY format `{}`",
            fmt.trim()
        )));
    }
    let mut count = None;
    let mut props: Vec<(String, String)> = Vec::new();
    loop {
        let line = next()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| format_err("bad vertex count"))?,
                )
            }
            ["element", other, ..] => {
                return Err(format_err(format!("unsupported element `{other}`")))
            }
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            _ => return Err(format_err(format!("unexpected header line `{line}`"))),
        }
    }
    let count = count.ok_or_else(|| format_err("missing `element vertex`"))?;
    let expected: [(&str, &str); 9] = [
        ("float", "x"),
        ("float", "y"),
        ("float", "z"),
        ("uchar", "red"),
        ("uchar", "green"),
        ("uchar", "blue"),
        ("float", "nx"),
        ("float", "ny"),
        ("float", "nz"),
    ];
    let names: Vec<&str> = props.iter().map(|(_, n)| n.as_str()).collect();
    let color = names.len() >= 6 && names[3..6] == ["red", "green", "blue"];
    let normals_start = if color { 6 } else { 3 };
    let normals = names.len() >= normals_start + 3
        && names[normals_start..normals_start + 3] == ["nx", "ny", "nz"];
    let allowed: Vec<(&str, &str)> = expected[..3]
        .iter()
        .chain(if color { &expected[3..6] } else { &[][..] })
        .chain(if normals { &expected[6..9] } else { &[][..] })
        .copied()
        .collect();
    for (i, (ty, name)) in props.iter().enumerate() {
        match allowed.get(i) {
            Some((ety, ename)) if ety == ty && ename == name => {}
            _ => {
                return Err(format_err(format!(
                    "unsupported PLY property `{ty} {name}`"
                )))
            }
        }
    }
    if props.len() != allowed.len() {
        return Err(format_err("PLY must declare x, y and z"));
    }
    let channels = 3 * (color as usize + normals as usize);
    let mut coords = Vec::with_capacity(count);
    let mut feats = Vec::with_capacity(count * channels);
    for row in 0..count {
        let line = next()?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format_err(format!("bad number in vertex row {row}")))?;
        if vals.len() != props.len() {
            return Err(format_err(format!(
                "vertex row {row} has {} values",
                vals.len()
            )));
        }
        coords.push([vals[0], vals[1], vals[2]]);
        if color {
            feats.extend(vals[3..6].iter().map(|c| c / 255.0));
        }
        if normals {
            feats.extend_from_slice(&vals[normals_start..normals_start + 3]);
        }
    }
    let pc = PointCloud::new(coords, feats, channels)?;
    if normals {
        pc.with_normals_at(if color { 3 } else { 0 })
    } else {
        Ok(pc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_point, Intrinsics};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;
    use std::f64::consts::FRAC_PI_2;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        let feats = (0..points.len()).map(|i| i as f64).collect();
        PointCloud::new(points.to_vec(), feats, 1).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let feats = (0..n * 3).map(|_| rng.gen()).collect();
        PointCloud::new(coords, feats, 3).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_mismatched_rows() {
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]], vec![], 0).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![1.0, 2.0], 1).is_err());
    }

    #[test]
    fn grid_sample_examples() {
        let g = GridSpec::isotropic(0.02).unwrap();
        let pc = cloud(&[[0.001, 0.0, 0.0], [0.002, 0.0, 0.0], [0.009, 0.0, 0.0]]);
        assert_eq!(grid_sample(&pc, &g).len(), 1);

        let pc = cloud(&[[0.021, 0.0, 0.0], [0.001, 0.0, 0.0]]);
        let out = grid_sample(&pc, &g);
        assert_eq!(out.coords(), &[[0.001, 0.0, 0.0], [0.021, 0.0, 0.0]]);

        // Center of the first cell along x is 0.010; 0.011 is closer than 0.004.
        let pc = cloud(&[[0.004, 0.01, 0.01], [0.011, 0.01, 0.01]]);
        let out = grid_sample(&pc, &g);
        assert_eq!(out.coords(), &[[0.011, 0.01, 0.01]]);
        assert_eq!(out.feats(), &[1.0]);

        assert!(grid_sample(&PointCloud::empty(2), &g).is_empty());
    }

    #[test]
    fn grid_sample_ties_keep_lowest_index() {
        let g = GridSpec::isotropic(1.0).unwrap();
        let pc = cloud(&[[0.4, 0.5, 0.5], [0.6, 0.5, 0.5]]);
        assert_eq!(grid_sample(&pc, &g).feats(), &[0.0]);
    }

    #[test]
    fn grid_sample_orders_by_z_then_y_then_x() {
        let g = GridSpec::isotropic(1.0).unwrap();
        let pc = cloud(&[[0.5, 0.5, 1.5], [1.5, 0.5, 0.5], [0.5, 1.5, 0.5]]);
        assert_eq!(grid_sample(&pc, &g).feats(), &[1.0, 2.0, 0.0]);
    }

    #[test]
    fn augment_examples() {
        let pc = PointCloud::new(vec![[1.0, 0.0, 0.0]], vec![0.2, 0.3, 0.4, 1.0, 0.0, 0.0], 6)
            .unwrap()
            .with_normals_at(3)
            .unwrap();
        let (same, t) = augment(&pc, &AugmentParams::IDENTITY).unwrap();
        assert_eq!(same, pc);
        assert!(t.is_identity());

        let rot = AugmentParams {
            rot_z: FRAC_PI_2,
            ..AugmentParams::IDENTITY
        };
        let (out, _) = augment(&pc, &rot).unwrap();
        let p = out.coords()[0];
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && p[2] == 0.0);

        let flip = AugmentParams {
            flip_x: true,
            ..AugmentParams::IDENTITY
        };
        let (out, t) = augment(&pc, &flip).unwrap();
        assert_eq!(&out.feat(0)[3..], &[-1.0, 0.0, 0.0]);
        assert_eq!(&out.feat(0)[..3], &[0.2, 0.3, 0.4]);
        assert_eq!(
            t.apply_point(&Vec3::new(1.0, 2.0, 3.0)),
            Vec3::new(-1.0, 2.0, 3.0)
        );

        let bad = AugmentParams {
            scale: 0.0,
            ..AugmentParams::IDENTITY
        };
        assert!(augment(&pc, &bad).is_err());
    }

    #[test]
    fn augment_reports_the_applied_transform() {
        let pc = random_cloud(50, 3);
        let params = AugmentParams {
            rot_z: 0.7,
            scale: 1.3,
            flip_x: false,
            flip_y: true,
        };
        let (out, t) = augment(&pc, &params).unwrap();
        for (a, b) in pc.coords().iter().zip(out.coords()) {
            let q = t.apply_point(&Vec3::from(*a));
            assert!((q - Vec3::from(*b)).norm() < 1e-12);
        }
    }

    #[test]
    fn mask_ratio_extremes() {
        let pc = random_cloud(100, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(mask_groups(&pc, 4, 0, 0.0, &mut rng).unwrap(), pc);
        assert!(mask_groups(&pc, 4, 0, 1.0, &mut rng).unwrap().is_empty());
        assert!(mask_groups(&pc, 4, 0, 1.5, &mut rng).is_err());
        assert!(mask_groups(&pc, 4, 0, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mask_keeps_exactly_the_surviving_group() {
        let pc = random_cloud(100, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = mask_groups_detailed(&pc, 4, 0, 0.75, &mut rng).unwrap();
        assert_eq!(m.removed.iter().filter(|&&r| r).count(), 3);
        let survivor = m.removed.iter().position(|&r| !r).unwrap();
        let members: Vec<usize> = (0..100).filter(|&i| m.assignment[i] == survivor).collect();
        assert_eq!(m.kept, members);
        let out = mask_groups(&pc, 4, 0, 0.75, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(out.len(), members.len());
    }

    #[test]
    fn mask_is_deterministic_under_a_seed() {
        let pc = random_cloud(300, 4);
        let a = mask_groups(&pc, 16, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = mask_groups(&pc, 16, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn group_size_caps_the_group_count() {
        assert_eq!(effective_groups(100, 4, 0), 4);
        assert_eq!(effective_groups(100, 2048, 64), 2);
        assert_eq!(effective_groups(3, 10, 0), 3);
    }

    #[test]
    fn backproject_examples() {
        let intr = Intrinsics::new(10.0, 10.0, 0.5, 0.5, 1, 1).unwrap();
        let depth = Image::from_data(1, 1, 1, vec![1.0]).unwrap();
        let color = Image::from_data(1, 1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let pc = backproject_rgbd(&depth, &color, &intr, &Pose::identity()).unwrap();
        assert_eq!(pc.coords(), &[[0.0, 0.0, 1.0]]);
        assert_eq!(pc.feats(), &[0.1, 0.2, 0.3]);

        let zero = Image::zeros(1, 1, 1);
        assert!(backproject_rgbd(&zero, &color, &intr, &Pose::identity())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn backprojection_round_trips_through_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let intr = Intrinsics::new(40.0, 42.0, 16.0, 15.0, 32, 30).unwrap();
        let pose = Pose::look_at(
            Vec3::new(1.5, -2.0, 1.0),
            Vec3::new(0.0, 0.0, 0.2),
            Vec3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        let depth_data = (0..32 * 30)
            .map(|i| {
                if i % 7 == 0 {
                    0.0
                } else {
                    rng.gen_range(0.3..5.0)
                }
            })
            .collect();
        let depth = Image::from_data(32, 30, 1, depth_data).unwrap();
        let color = Image::zeros(32, 30, 3);
        let pc = backproject_rgbd(&depth, &color, &intr, &pose).unwrap();
        let mut k = 0;
        for v in 0..30 {
            for u in 0..32 {
                let z = depth.get(u, v, 0);
                if z <= 0.0 {
                    continue;
                }
                let proj = project_point(&intr, &pose, &Vec3::from(pc.coords()[k]));
                assert!((proj.pixel[0] - (u as f64 + 0.5)).abs() < 1e-6);
                assert!((proj.pixel[1] - (v as f64 + 0.5)).abs() < 1e-6);
                assert!((proj.depth - z).abs() < 1e-12 * z.max(1.0));
                k += 1;
            }
        }
        assert_eq!(k, pc.len());
    }

    #[test]
    fn merge_examples() {
        let a = random_cloud(10, 1);
        let b = random_cloud(7, 2);
        assert_eq!(merge(std::slice::from_ref(&a)).unwrap(), a);
        let ab = merge(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab.len(), 17);
        assert_eq!(&ab.coords()[10..], b.coords());
        assert!(merge(&[a.clone(), PointCloud::empty(2)]).is_err());

        let g = GridSpec::isotropic(0.1).unwrap();
        let cells = |pc: &PointCloud| -> HashSet<[i64; 3]> {
            grid_sample(pc, &g)
                .coords()
                .iter()
                .map(|p| g.cell_of(p))
                .collect()
        };
        let union = cells(&a).union(&cells(&b)).copied().collect::<HashSet<_>>();
        assert_eq!(cells(&ab), union);
    }

    #[test]
    fn ply_round_trip_and_rejection() {
        let pc = PointCloud::new(
            vec![[0.5, -1.25, 3.0], [1e-3, 2.0, -0.5]],
            vec![
                1.0,
                0.0,
                128.0 / 255.0,
                0.0,
                0.0,
                1.0,
                0.0,
                1.0,
                0.0,
                1.0,
                0.0,
                0.0,
            ],
            6,
        )
        .unwrap()
        .with_normals_at(3)
        .unwrap();
        let mut buf = Vec::new();
        write_ply(&mut buf, &pc).unwrap();
        assert_eq!(read_ply(std::io::Cursor::new(&buf)).unwrap(), pc);

        let bad = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
                   property float z\nproperty float intensity\nend_header\n0 0 0 1\n";
        let err = read_ply(std::io::Cursor::new(bad)).unwrap_err().to_string();
        assert!(err.contains("intensity"), "{err}");
    }

    proptest::proptest! {
        #[test]
        fn grid_sample_is_idempotent_and_bounded(seed in 0u64..500, n in 1usize..200) {
            let pc = random_cloud(n, seed);
            let g = GridSpec::new([0.1, 0.15, 0.2], [0.01, -0.02, 0.0]).unwrap();
            let once = grid_sample(&pc, &g);
            let twice = grid_sample(&once, &g);
            proptest::prop_assert_eq!(&once, &twice);
            let occupied: HashSet<[i64; 3]> = pc.coords().iter().map(|p| g.cell_of(p)).collect();
            proptest::prop_assert_eq!(once.len(), occupied.len().min(n));
        }
    }
}
