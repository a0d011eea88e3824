//! Dense feature volumes.
//!
//! Layout: voxel `(ix, iy, iz)` is row `(ix * ly + iy) * lz + iz` of an
//! `nvox x channels` matrix, i.e. x-major, then y, then z, then channel.
//! Values live at voxel centers `origin + (i + 0.5) * voxel`.

use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::SparseFeatures;
use crate::error::{contract, domain, format_err, Result};
use crate::geometry::{Aabb, Camera, Vec3};
use crate::image::Image;
use crate::nn::Activation;
use crate::sparse::SparseMix;
use crate::tensor::{axpy, linear_row, Tensor};

/// Number of taps in a 3x3x3 kernel.
pub const TAPS: usize = 27;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseVolume {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel: [f64; 3],
    /// `nvox x channels`.
    pub data: Tensor,
}

/// Where a volume sits in space, independent of its contents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeGeometry {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel: [f64; 3],
}

impl VolumeGeometry {
    pub fn new(dims: [usize; 3], origin: [f64; 3], voxel: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) || voxel.iter().any(|&v| !(v > 0.0)) {
            return Err(domain(format!(
                "invalid volume dims {dims:?} / voxel {voxel:?}"
            )));
        }
        Ok(Self {
            dims,
            origin,
            voxel,
        })
    }

    /// Grid over `bounds` whose longest axis has `resolution` voxels; the
    /// other axes get proportionally many (at least one), with the voxel
    /// size stretched per axis so the grid covers `bounds` exactly.
    pub fn fit(bounds: &Aabb, resolution: usize) -> Result<Self> {
        let e = bounds.extent();
        let longest = e[0].max(e[1]).max(e[2]);
        let dims: [usize; 3] =
            std::array::from_fn(|k| ((resolution as f64 * e[k] / longest).round() as usize).max(1));
        let voxel = std::array::from_fn(|k| e[k] / dims[k] as f64);
        Self::new(dims, bounds.min, voxel)
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.dims[1] + i[1]) * self.dims[2] + i[2]
    }

    pub fn center(&self, i: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|k| self.origin[k] + (i[k] as f64 + 0.5) * self.voxel[k])
    }

    pub fn bounds(&self) -> Aabb {
        let max = std::array::from_fn(|k| self.origin[k] + self.dims[k] as f64 * self.voxel[k]);
        Aabb {
            min: self.origin,
            max,
        }
    }

    /// Voxel containing `p`, if inside the grid.
    pub fn voxel_of(&self, p: &[f64; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for k in 0..3 {
            let f = ((p[k] - self.origin[k]) / self.voxel[k]).floor();
            if !(f >= 0.0 && f < self.dims[k] as f64) {
                return None;
            }
            out[k] = f as usize;
        }
        Some(out)
    }

    pub fn min_voxel(&self) -> f64 {
        self.voxel[0].min(self.voxel[1]).min(self.voxel[2])
    }

    /// Trilinear weights over the eight surrounding voxel centers, or `None`
    /// outside the hull of the voxel-center lattice.
    pub fn trilinear_stencil(&self, p: &[f64; 3]) -> Option<[(usize, f64); 8]> {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0; 3];
        for k in 0..3 {
            let u = (p[k] - self.origin[k]) / self.voxel[k] - 0.5;
            let top = (self.dims[k] - 1) as f64;
            if !(u >= 0.0 && u <= top) {
                return None;
            }
            if self.dims[k] == 1 {
                continue;
            }
            let i0 = (u.floor() as usize).min(self.dims[k] - 2);
            lo[k] = i0;
            hi[k] = i0 + 1;
            frac[k] = u - i0 as f64;
        }
        let mut out = [(0usize, 0.0); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let pick = |k: usize| (c >> (2 - k)) & 1 == 1;
            let idx: [usize; 3] = std::array::from_fn(|k| if pick(k) { hi[k] } else { lo[k] });
            let w: f64 = (0..3)
                .map(|k| if pick(k) { frac[k] } else { 1.0 - frac[k] })
                .product();
            *slot = (self.index(idx), w);
        }
        Some(out)
    }
}

impl DenseVolume {
    pub fn zeros(geometry: VolumeGeometry, channels: usize) -> Self {
        Self {
            dims: geometry.dims,
            origin: geometry.origin,
            voxel: geometry.voxel,
            data: Tensor::zeros(geometry.voxel_count(), channels),
        }
    }

    pub fn from_tensor(geometry: VolumeGeometry, data: Tensor) -> Result<Self> {
        if data.rows() != geometry.voxel_count() {
            return Err(contract(format!(
                "volume needs {} rows, tensor has {}",
                geometry.voxel_count(),
                data.rows()
            )));
        }
        Ok(Self {
            dims: geometry.dims,
            origin: geometry.origin,
            voxel: geometry.voxel,
            data,
        })
    }

    pub fn geometry(&self) -> VolumeGeometry {
        VolumeGeometry {
            dims: self.dims,
            origin: self.origin,
            voxel: self.voxel,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn at(&self, i: [usize; 3]) -> &[f64] {
        self.data.row(self.geometry().index(i))
    }

    /// Trilinear interpolation of the channel vector at `p`; zero outside
    /// the voxel-center hull.
    pub fn trilinear_query(&self, p: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.channels()];
        self.trilinear_into(p, &mut out);
        out
    }

    pub fn trilinear_into(&self, p: &[f64; 3], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if let Some(st) = self.geometry().trilinear_stencil(p) {
            for (j, w) in st {
                axpy(w, self.data.row(j), out);
            }
        }
    }
}

/// Per-voxel averaging operator for points at `coords`; also returns how
/// many points fell outside the grid.
pub fn densify_mix(coords: &[[f64; 3]], geometry: &VolumeGeometry) -> (SparseMix, usize) {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); geometry.voxel_count()];
    let mut dropped = 0;
    for (i, p) in coords.iter().enumerate() {
        match geometry.voxel_of(p) {
            Some(v) => members[geometry.index(v)].push(i),
            None => dropped += 1,
        }
    }
    let mut b = SparseMix::builder(coords.len());
    for m in &members {
        let c = 1.0 / m.len().max(1) as f64;
        for &i in m {
            b.push(i, c);
        }
        b.end_row();
    }
    (b.build(), dropped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Densified {
    pub volume: DenseVolume,
    /// Points outside the grid, ignored.
    pub dropped: usize,
}

/// Mean of the features of the points in each voxel; empty voxels are zero.
pub fn densify(sf: &SparseFeatures, geometry: &VolumeGeometry) -> Result<Densified> {
    let (mix, dropped) = densify_mix(&sf.coords, geometry);
    if dropped > 0 {
        log::warn!(
            "densify: {dropped} of {} points fall outside the volume",
            sf.coords.len()
        );
    }
    let data = mix.apply(&sf.feats)?;
    Ok(Densified {
        volume: DenseVolume::from_tensor(*geometry, data)?,
        dropped,
    })
}

/// One zero-padded 3x3x3 convolution layer followed by a pointwise
/// nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `out x (27 * in)`, tap-major: column `tap * in + c_in` with
    /// `tap = (dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl ConvParams {
    pub fn init<R: Rng + ?Sized>(
        ch_in: usize,
        ch_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let fan_in = TAPS * ch_in;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..ch_out * fan_in)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::from_vec(ch_out, fan_in, w).expect("sizes match"),
            bias: Tensor::zeros(1, ch_out),
            activation,
        }
    }

    /// Center tap = identity, zero bias, linear output.
    pub fn identity(channels: usize) -> Self {
        let mut weight = Tensor::zeros(channels, TAPS * channels);
        for c in 0..channels {
            weight.row_mut(c)[13 * channels + c] = 1.0;
        }
        Self {
            weight,
            bias: Tensor::zeros(1, channels),
            activation: Activation::Linear,
        }
    }

    pub fn ch_in(&self) -> usize {
        self.weight.cols() / TAPS
    }

    pub fn ch_out(&self) -> usize {
        self.weight.rows()
    }
}

fn gather_patch(x: &Tensor, dims: [usize; 3], at: [usize; 3], patch: &mut [f64]) {
    let cin = x.cols();
    let mut tap = 0;
    for dx in -1i64..=1 {
        for dy in -1i64..=1 {
            for dz in -1i64..=1 {
                let dst = &mut patch[tap * cin..(tap + 1) * cin];
                let n = [at[0] as i64 + dx, at[1] as i64 + dy, at[2] as i64 + dz];
                if (0..3).all(|k| n[k] >= 0 && n[k] < dims[k] as i64) {
                    let row = (n[0] as usize * dims[1] + n[1] as usize) * dims[2] + n[2] as usize;
                    dst.copy_from_slice(x.row(row));
                } else {
                    dst.iter_mut().for_each(|v| *v = 0.0);
                }
                tap += 1;
            }
        }
    }
}

fn for_each_voxel(dims: [usize; 3], mut f: impl FnMut(usize, [usize; 3])) {
    let mut row = 0;
    for ix in 0..dims[0] {
        for iy in 0..dims[1] {
            for iz in 0..dims[2] {
                f(row, [ix, iy, iz]);
                row += 1;
            }
        }
    }
}

/// Pre-activation output of a zero-padded 3x3x3 convolution.
pub fn conv3d_forward(x: &Tensor, dims: [usize; 3], w: &Tensor, b: &[f64]) -> Result<Tensor> {
    let nvox = dims[0] * dims[1] * dims[2];
    if x.rows() != nvox || w.cols() != TAPS * x.cols() || b.len() != w.rows() {
        return Err(contract(format!(
            "conv3d: input {:?} for dims {dims:?}, kernel {:?}, bias {}",
            x.shape(),
            w.shape(),
            b.len()
        )));
    }
    let mut y = Tensor::zeros(nvox, w.rows());
    let mut patch = vec![0.0; w.cols()];
    for_each_voxel(dims, |row, at| {
        gather_patch(x, dims, at, &mut patch);
        linear_row(&patch, w, b, y.row_mut(row));
    });
    Ok(y)
}

/// Adjoint of [`conv3d_forward`]; accumulates into `gx`, `gw`, `gb`.
pub fn conv3d_backward(
    x: &Tensor,
    dims: [usize; 3],
    w: &Tensor,
    gy: &Tensor,
    mut gx: Option<&mut Tensor>,
    gw: &mut Tensor,
    gb: &mut [f64],
) {
    let cin = x.cols();
    let mut patch = vec![0.0; w.cols()];
    let mut gpatch = vec![0.0; w.cols()];
    for_each_voxel(dims, |row, at| {
        let g = gy.row(row);
        if g.iter().all(|&v| v == 0.0) {
            return;
        }
        axpy(1.0, g, gb);
        gather_patch(x, dims, at, &mut patch);
        gpatch.iter_mut().for_each(|v| *v = 0.0);
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            axpy(go, &patch, gw.row_mut(o));
            axpy(go, w.row(o), &mut gpatch);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let mut tap = 0;
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dz in -1i64..=1 {
                        let n = [at[0] as i64 + dx, at[1] as i64 + dy, at[2] as i64 + dz];
                        if (0..3).all(|k| n[k] >= 0 && n[k] < dims[k] as i64) {
                            let r =
                                (n[0] as usize * dims[1] + n[1] as usize) * dims[2] + n[2] as usize;
                            axpy(1.0, &gpatch[tap * cin..(tap + 1) * cin], gx.row_mut(r));
                        }
                        tap += 1;
                    }
                }
            }
        }
    });
}

/// Shallow dense refinement: convolution plus nonlinearity, same dims.
pub fn refine(v: &DenseVolume, params: &ConvParams) -> Result<DenseVolume> {
    if params.ch_in() != v.channels() {
        return Err(domain(format!(
            "refine: kernel expects {} channels, volume has {}",
            params.ch_in(),
            v.channels()
        )));
    }
    let mut y = conv3d_forward(&v.data, v.dims, &params.weight, params.bias.data())?;
    y.data_mut()
        .iter_mut()
        .for_each(|x| *x = params.activation.apply(*x));
    DenseVolume::from_tensor(v.geometry(), y)
}

/// Feature volumes at one or more resolutions; queries concatenate levels.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeStack {
    pub levels: Vec<DenseVolume>,
}

impl VolumeStack {
    pub fn channels(&self) -> usize {
        self.levels.iter().map(DenseVolume::channels).sum()
    }

    pub fn query(&self, p: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.channels()];
        self.query_into(p, &mut out);
        out
    }

    pub fn query_into(&self, p: &[f64; 3], out: &mut [f64]) {
        let mut off = 0;
        for v in &self.levels {
            let c = v.channels();
            v.trilinear_into(p, &mut out[off..off + c]);
            off += c;
        }
    }

    /// Smallest voxel edge over all levels.
    pub fn min_voxel(&self) -> f64 {
        self.levels
            .iter()
            .map(|v| v.geometry().min_voxel())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bounds(&self) -> Aabb {
        self.levels[0].geometry().bounds()
    }
}

/// Zeroes `floor(ratio * blocks)` random `patch x patch` blocks (edge blocks
/// may be ragged). Returns the masked image and a per-pixel bitmap.
pub fn mask_image<R: Rng + ?Sized>(
    img: &Image,
    patch: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<(Image, Vec<bool>)> {
    if patch == 0 {
        return Err(domain("mask patch size must be positive"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(domain(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let bx = img.width.div_ceil(patch);
    let by = img.height.div_ceil(patch);
    let blocks = bx * by;
    let count = ((ratio * blocks as f64) + 1e-9).floor() as usize;
    let mut out = img.clone();
    let mut bitmap = vec![false; img.width * img.height];
    for b in index::sample(rng, blocks, count.min(blocks)).into_iter() {
        let (x0, y0) = ((b % bx) * patch, (b / bx) * patch);
        for y in y0..(y0 + patch).min(img.height) {
            for x in x0..(x0 + patch).min(img.width) {
                out.pixel_mut(x, y).iter_mut().for_each(|v| *v = 0.0);
                bitmap[y * img.width + x] = true;
            }
        }
    }
    Ok((out, bitmap))
}

/// Per-view 2D feature maps paired with the cameras that observed them.
#[derive(Debug, Clone)]
pub struct ImageFeatureSet {
    pub maps: Vec<Image>,
    pub cameras: Vec<Camera>,
    /// Pixels zeroed by [`mask_image`], per view, if masking was applied.
    pub masks: Vec<Option<Vec<bool>>>,
}

impl ImageFeatureSet {
    pub fn new(maps: Vec<Image>, cameras: Vec<Camera>) -> Result<Self> {
        if maps.len() != cameras.len() {
            return Err(contract("every feature map needs a camera"));
        }
        if maps.windows(2).any(|w| w[0].channels != w[1].channels) {
            return Err(contract("feature maps disagree on channel count"));
        }
        let masks = vec![None; maps.len()];
        Ok(Self {
            maps,
            cameras,
            masks,
        })
    }
}

/// Bilinear sample of `map` at image-space pixel coordinates of a
/// `width x height` image, with border clamping.
pub fn bilinear(map: &Image, px: [f64; 2], width: usize, height: usize, out: &mut [f64]) {
    let sx = map.width as f64 / width as f64;
    let sy = map.height as f64 / height as f64;
    let qx = (px[0] * sx - 0.5).clamp(0.0, (map.width - 1) as f64);
    let qy = (px[1] * sy - 0.5).clamp(0.0, (map.height - 1) as f64);
    let (x0, y0) = (qx.floor() as usize, qy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(map.width - 1), (y0 + 1).min(map.height - 1));
    let (fx, fy) = (qx - x0 as f64, qy - y0 as f64);
    out.iter_mut().for_each(|v| *v = 0.0);
    for (x, y, w) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        axpy(w, map.pixel(x, y), out);
    }
}

/// Populates a grid by projecting each voxel center into every view and
/// averaging the bilinear feature samples of the views that see it.
pub fn lift_images(feats: &ImageFeatureSet, geometry: &VolumeGeometry) -> Result<DenseVolume> {
    let Some(first) = feats.maps.first() else {
        return Err(contract("lift_images needs at least one view"));
    };
    let ch = first.channels;
    let mut vol = DenseVolume::zeros(*geometry, ch);
    let mut sample = vec![0.0; ch];
    for_each_voxel(geometry.dims, |row, at| {
        let c = geometry.center(at);
        let p = Vec3::from(c);
        let mut count = 0usize;
        let acc = vol.data.row_mut(row);
        for (map, cam) in feats.maps.iter().zip(&feats.cameras) {
            let proj = cam.project(&p);
            let (w, h) = (cam.intrinsics.width as f64, cam.intrinsics.height as f64);
            if proj.behind
                || !(proj.pixel[0] >= 0.0 && proj.pixel[0] < w)
                || !(proj.pixel[1] >= 0.0 && proj.pixel[1] < h)
            {
                continue;
            }
            bilinear(
                map,
                proj.pixel,
                cam.intrinsics.width,
                cam.intrinsics.height,
                &mut sample,
            );
            axpy(1.0, &sample, acc);
            count += 1;
        }
        if count > 1 {
            let inv = 1.0 / count as f64;
            acc.iter_mut().for_each(|v| *v *= inv);
        }
    });
    Ok(vol)
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    dims: [usize; 3],
    channels: usize,
    origin: [f64; 3],
    voxel: [f64; 3],
    dtype: String,
}

/// JSON header line, newline, then little-endian `f64` data in volume layout.
pub fn write_volume_dump<W: Write>(w: &mut W, v: &DenseVolume) -> Result<()> {
    let header = DumpHeader {
        dims: v.dims,
        channels: v.channels(),
        origin: v.origin,
        voxel: v.voxel,
        dtype: "f64".into(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for x in v.data.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_volume_dump<R: BufRead>(r: &mut R) -> Result<DenseVolume> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: DumpHeader = serde_json::from_str(line.trim_end())?;
    if header.dtype != "f64" {
        return Err(format_err(format!("unsupported dtype `{}`", header.dtype)));
    }
    let geometry = VolumeGeometry::new(header.dims, header.origin, header.voxel)?;
    let n = geometry.voxel_count() * header.channels;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    DenseVolume::from_tensor(
        geometry,
        Tensor::from_vec(geometry.voxel_count(), header.channels, data)?,
    )
}
