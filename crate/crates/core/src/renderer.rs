//! SDF-driven alpha compositing of ray samples into color, depth, weight
//! sum and semantic features.
//!
//! For consecutive samples with SDF values `x_j`, `x_{j+1}` and sharpness
//! `s`, the interval opacity is
//! `alpha_j = max((sig(s x_j) - sig(s x_{j+1})) / sig(s x_j), 0)`, clamped
//! to `[0, 1 - 1e-7]`; the last sample of a ray gets `alpha = 0`. Weights
//! are `w_j = T_j alpha_j` with `T_j = prod_{k<j} (1 - alpha_k)`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{contract, domain, Result};
use crate::fields::FieldBundle;
use crate::geometry::{ray_aabb_clip, sample_t_values, Camera, Ray, SampleMode, Vec3};
use crate::nn::log_sigmoid;
use crate::rng::{stream, Stream};
use crate::tensor::{axpy, dot, Tensor};
use crate::volume::VolumeStack;

/// Upper clamp on alpha; keeps transmittance strictly positive.
pub const ALPHA_MAX: f64 = 1.0 - 1e-7;

/// Output columns of a composite: color (3), depth, weight sum, semantics.
pub const COL_DEPTH: usize = 3;
pub const COL_WEIGHT: usize = 4;
pub const COL_SEM: usize = 5;

/// Alpha of one interval and whether it lies on the differentiable branch.
#[inline]
fn alpha_pair(x0: f64, x1: f64, sharpness: f64) -> (f64, bool) {
    let diff = log_sigmoid(sharpness * x1) - log_sigmoid(sharpness * x0);
    if diff >= 0.0 {
        return (0.0, false);
    }
    let a = -diff.exp_m1();
    if a > ALPHA_MAX {
        (ALPHA_MAX, false)
    } else {
        (a, true)
    }
}

/// Opacity of the interval between two consecutive SDF samples.
pub fn alpha_from_sdf(s_j: f64, s_next: f64, sharpness: f64) -> Result<f64> {
    if !(sharpness > 0.0) || !sharpness.is_finite() {
        return Err(domain(format!(
            "sharpness must be positive, got {sharpness}"
        )));
    }
    if !s_j.is_finite() || !s_next.is_finite() {
        return Err(contract("alpha_from_sdf: non-finite SDF value"));
    }
    Ok(alpha_pair(s_j, s_next, sharpness).0)
}

/// `(weights, transmittances)` for a sequence of alphas.
pub fn weights_from_alphas(alphas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut t = 1.0;
    let mut weights = Vec::with_capacity(alphas.len());
    let mut trans = Vec::with_capacity(alphas.len());
    for &a in alphas {
        trans.push(t);
        weights.push(t * a);
        t *= 1.0 - a;
    }
    (weights, trans)
}

/// Per-sample bookkeeping of a batched composite, kept for the reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeRecord {
    pub samples_per_ray: usize,
    pub t: Vec<f64>,
    pub alphas: Vec<f64>,
    pub trans: Vec<f64>,
    pub weights: Vec<f64>,
    /// Whether each alpha is on its differentiable (unclamped) branch.
    pub active: Vec<bool>,
}

impl CompositeRecord {
    pub fn rays(&self) -> usize {
        self.t.len() / self.samples_per_ray
    }
}

/// Adjoints produced by [`composite_backward`].
#[derive(Debug, Clone)]
pub struct CompositeGrads {
    pub sdf: Vec<f64>,
    pub color: Tensor,
    pub sem: Option<Tensor>,
    /// Derivative with respect to the sharpness itself (not its log).
    pub sharpness: f64,
}

/// Composites `rays x samples_per_ray` samples laid out ray-major.
pub fn composite_forward(
    sdf: &[f64],
    color: &Tensor,
    sem: Option<&Tensor>,
    sharpness: f64,
    t: &[f64],
    samples_per_ray: usize,
) -> Result<(Tensor, CompositeRecord)> {
    if let Some(bad) = sdf.iter().find(|v| !v.is_finite()) {
        return Err(contract(format!("composite: non-finite SDF value {bad}")));
    }
    if !(sharpness > 0.0) || !sharpness.is_finite() {
        return Err(domain(format!(
            "sharpness must be positive, got {sharpness}"
        )));
    }
    let n = sdf.len();
    let m = samples_per_ray;
    let sem_dim = sem.map_or(0, Tensor::cols);
    let rays = n / m;
    let mut out = Tensor::zeros(rays, COL_SEM + sem_dim);
    let mut alphas = vec![0.0; n];
    let mut active = vec![false; n];
    for r in 0..rays {
        for j in r * m..(r + 1) * m - 1 {
            (alphas[j], active[j]) = alpha_pair(sdf[j], sdf[j + 1], sharpness);
        }
    }
    let mut weights = vec![0.0; n];
    let mut trans = vec![0.0; n];
    for r in 0..rays {
        let span = r * m..(r + 1) * m;
        let (w, tr) = weights_from_alphas(&alphas[span.clone()]);
        weights[span.clone()].copy_from_slice(&w);
        trans[span.clone()].copy_from_slice(&tr);
        let row = out.row_mut(r);
        for j in span {
            let wj = weights[j];
            axpy(wj, color.row(j), &mut row[..3]);
            row[COL_DEPTH] += wj * t[j];
            row[COL_WEIGHT] += wj;
            if let Some(s) = sem {
                axpy(wj, s.row(j), &mut row[COL_SEM..]);
            }
        }
    }
    let record = CompositeRecord {
        samples_per_ray: m,
        t: t.to_vec(),
        alphas,
        trans,
        weights,
        active,
    };
    Ok((out, record))
}

/// Reverse pass of [`composite_forward`] for output adjoint `g`.
pub fn composite_backward(
    record: &CompositeRecord,
    sdf: &[f64],
    color: &Tensor,
    sem: Option<&Tensor>,
    sharpness: f64,
    g: &Tensor,
) -> CompositeGrads {
    let n = sdf.len();
    let m = record.samples_per_ray;
    let mut gsdf = vec![0.0; n];
    let mut gcolor = Tensor::zeros(n, 3);
    let mut gsem = sem.map(|s| Tensor::zeros(n, s.cols()));
    let mut gsharp = 0.0;
    let mut gw = vec![0.0; m];
    for r in 0..n / m {
        let go = g.row(r);
        let base = r * m;
        for k in 0..m {
            let j = base + k;
            let w = record.weights[j];
            let mut acc =
                dot(&go[..3], color.row(j)) + go[COL_DEPTH] * record.t[j] + go[COL_WEIGHT];
            axpy(w, &go[..3], gcolor.row_mut(j));
            if let (Some(s), Some(gs)) = (sem, gsem.as_mut()) {
                acc += dot(&go[COL_SEM..], s.row(j));
                axpy(w, &go[COL_SEM..], gs.row_mut(j));
            }
            gw[k] = acc;
        }
        // suffix = sum_{j > k} gw_j w_j
        let mut suffix = 0.0;
        for k in (0..m).rev() {
            let j = base + k;
            let a = record.alphas[j];
            if record.active[j] {
                let galpha = gw[k] * record.trans[j] - suffix / (1.0 - a);
                let ratio = 1.0 - a;
                let (x0, x1) = (sdf[j], sdf[j + 1]);
                let d0 = 1.0 - crate::nn::sigmoid(sharpness * x0);
                let d1 = 1.0 - crate::nn::sigmoid(sharpness * x1);
                gsdf[j] += galpha * ratio * sharpness * d0;
                gsdf[j + 1] -= galpha * ratio * sharpness * d1;
                gsharp -= galpha * ratio * (x1 * d1 - x0 * d0);
            }
            suffix += gw[k] * record.weights[j];
        }
    }
    CompositeGrads {
        sdf: gsdf,
        color: gcolor,
        sem: gsem,
        sharpness: gsharp,
    }
}

/// Everything computed along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleBatch {
    pub ray: Ray,
    pub t: Vec<f64>,
    pub points: Vec<[f64; 3]>,
    pub sdf: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub semantic: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub trans: Vec<f64>,
    pub weights: Vec<f64>,
    pub rgb: [f64; 3],
    /// Expected ray parameter `sum w_j t_j`.
    pub depth: f64,
    pub weight_sum: f64,
    pub sem_out: Vec<f64>,
    /// The ray never entered the volume; nothing was sampled.
    pub miss: bool,
}

impl RaySampleBatch {
    fn missed(ray: Ray, sem_dim: usize) -> Self {
        Self {
            ray,
            t: Vec::new(),
            points: Vec::new(),
            sdf: Vec::new(),
            color: Vec::new(),
            semantic: Vec::new(),
            alphas: Vec::new(),
            trans: Vec::new(),
            weights: Vec::new(),
            rgb: [0.0; 3],
            depth: 0.0,
            weight_sum: 0.0,
            sem_out: vec![0.0; sem_dim],
            miss: true,
        }
    }
}

/// Samples `count` points on `[near, far)` and composites the fields there.
#[allow(clippy::too_many_arguments)]
pub fn render_ray<R: Rng + ?Sized>(
    volume: &VolumeStack,
    bundle: &FieldBundle,
    ray: &Ray,
    near: f64,
    far: f64,
    count: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<RaySampleBatch> {
    let t = sample_t_values(near, far, count, mode, rng)?;
    let points: Vec<[f64; 3]> = t.iter().map(|&ti| ray.at(ti).into()).collect();
    let dir: [f64; 3] = ray.direction.into();
    let eps = 0.5 * volume.min_voxel();
    let mut sdf = Vec::with_capacity(count);
    let mut color = Vec::with_capacity(count);
    let mut semantic = Vec::with_capacity(count);
    let mut colors = Tensor::zeros(count, 3);
    let sem_dim = bundle.sem_dim();
    let mut sems = Tensor::zeros(count, sem_dim);
    for (j, p) in points.iter().enumerate() {
        let f = volume.query(p);
        let (s, h) = bundle.eval_sdf(p, &f)?;
        let n = bundle.eval_normal_eps(volume, p, eps).n;
        let c = bundle.eval_rgb(p, &f, &dir, &n, &h)?;
        sdf.push(s);
        color.push(c);
        colors.row_mut(j).copy_from_slice(&c);
        if bundle.semantic.is_some() {
            let l = bundle.eval_semantic(p, &f, &n, &h)?;
            sems.row_mut(j).copy_from_slice(&l);
            semantic.push(l);
        }
    }
    let sem_ref = bundle.semantic.is_some().then_some(&sems);
    let (out, rec) = composite_forward(&sdf, &colors, sem_ref, bundle.sharpness(), &t, count)?;
    let row = out.row(0);
    Ok(RaySampleBatch {
        ray: *ray,
        t,
        points,
        sdf,
        color,
        semantic,
        alphas: rec.alphas,
        trans: rec.trans,
        weights: rec.weights,
        rgb: [row[0], row[1], row[2]],
        depth: row[COL_DEPTH],
        weight_sum: row[COL_WEIGHT],
        sem_out: row[COL_SEM..].to_vec(),
        miss: false,
    })
}

/// Clips `ray` against the volume and renders it, or reports a miss.
pub fn render_ray_clipped<R: Rng + ?Sized>(
    volume: &VolumeStack,
    bundle: &FieldBundle,
    ray: &Ray,
    count: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<RaySampleBatch> {
    match ray_aabb_clip(ray, &volume.bounds()) {
        Some((near, far)) => render_ray(volume, bundle, ray, near, far, count, mode, rng),
        None => Ok(RaySampleBatch::missed(*ray, bundle.sem_dim())),
    }
}

/// Per-pixel render results in input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelBatch {
    pub rgb: Vec<[f64; 3]>,
    /// Expected ray parameter.
    pub depth: Vec<f64>,
    pub weight_sum: Vec<f64>,
    pub semantic: Vec<Vec<f64>>,
    pub miss: Vec<bool>,
}

/// Renders integer pixels `(x, y)` of `camera`. Each pixel draws its samples
/// from its own stream keyed by `y * width + x`, so results do not depend on
/// batching or thread count.
pub fn render_pixels(
    volume: &VolumeStack,
    bundle: &FieldBundle,
    camera: &Camera,
    pixels: &[[usize; 2]],
    count: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<PixelBatch> {
    let width = camera.intrinsics.width;
    let rays: Vec<RaySampleBatch> = pixels
        .par_iter()
        .map(|&[x, y]| {
            let ray = camera.ray([x as f64, y as f64])?;
            let mut rng = stream(seed, Stream::Samples, (y * width + x) as u64);
            render_ray_clipped(volume, bundle, &ray, count, mode, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut out = PixelBatch::default();
    for r in rays {
        out.rgb.push(r.rgb);
        out.depth.push(r.depth);
        out.weight_sum.push(r.weight_sum);
        out.semantic.push(r.sem_out);
        out.miss.push(r.miss);
    }
    Ok(out)
}

/// Factor converting a ray parameter along `ray` into camera z-depth.
pub fn z_factor(camera: &Camera, ray: &Ray) -> f64 {
    let forward: Vec3 = camera.pose.rotation().column(2).into();
    ray.direction.dot(&forward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_from_sdf(0.3, 0.3, 5.0).unwrap(), 0.0);
        assert_eq!(alpha_from_sdf(-1.0, 1.0, 1.0).unwrap(), 0.0);
        // sig(-x) / sig(x) = e^{-x}, so a symmetric crossing gives 1 - e^{-s x_j}.
        let a = alpha_from_sdf(1.0, -1.0, 1.0).unwrap();
        assert!((a - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!(alpha_from_sdf(f64::NAN, 0.0, 1.0).is_err());
        assert!(alpha_from_sdf(0.0, 0.0, 0.0).is_err());
        assert_eq!(alpha_from_sdf(10.0, -10.0, 1e3).unwrap(), ALPHA_MAX);
    }

    #[test]
    fn weight_examples() {
        let (w, t) = weights_from_alphas(&[0.7]);
        assert_eq!((w, t), (vec![0.7], vec![1.0]));
        let (w, _) = weights_from_alphas(&[0.5, 0.5]);
        assert_eq!(w, vec![0.5, 0.25]);
        let (w, _) = weights_from_alphas(&[0.0; 4]);
        assert!(w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn plane_crossing_at_large_sharpness() {
        // SDF 1 - t along the ray: samples at t = 0.5, 1.0, 1.5.
        let sdf = [0.5, 0.0, -0.5];
        let color = Tensor::zeros(3, 3);
        let (out, rec) = composite_forward(&sdf, &color, None, 1e3, &[0.5, 1.0, 1.5], 3).unwrap();
        assert!((rec.alphas[0] - 0.5).abs() < 1e-12);
        assert_eq!(rec.alphas[1], ALPHA_MAX);
        assert_eq!(rec.alphas[2], 0.0);
        assert!((out.get(0, COL_DEPTH) - 0.75).abs() < 1e-6);
    }

    fn loss_of(sdf: &[f64], color: &Tensor, sem: &Tensor, s: f64, t: &[f64], g: &Tensor) -> f64 {
        let (out, _) = composite_forward(sdf, color, Some(sem), s, t, 4).unwrap();
        out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 8;
        let sdf: Vec<f64> = (0..n)
            .map(|i| 0.6 - 0.2 * (i % 4) as f64 + rng.gen_range(-0.05..0.05))
            .collect();
        let color = Tensor::from_vec(n, 3, (0..3 * n).map(|_| rng.gen()).collect()).unwrap();
        let sem =
            Tensor::from_vec(n, 2, (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let t: Vec<f64> = (0..n).map(|i| 0.5 + 0.25 * (i % 4) as f64).collect();
        let g =
            Tensor::from_vec(2, 7, (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let s = 4.0;
        let (_, rec) = composite_forward(&sdf, &color, Some(&sem), s, &t, 4).unwrap();
        let grads = composite_backward(&rec, &sdf, &color, Some(&sem), s, &g);
        let h = 1e-6;
        for i in 0..n {
            let mut p = sdf.clone();
            p[i] += h;
            let mut m = sdf.clone();
            m[i] -= h;
            let fd = (loss_of(&p, &color, &sem, s, &t, &g) - loss_of(&m, &color, &sem, s, &t, &g))
                / (2.0 * h);
            assert!(
                (fd - grads.sdf[i]).abs() < 1e-7,
                "sdf {i}: {fd} vs {}",
                grads.sdf[i]
            );
        }
        for k in 0..3 * n {
            let mut p = color.clone();
            p.data_mut()[k] += h;
            let mut m = color.clone();
            m.data_mut()[k] -= h;
            let fd = (loss_of(&sdf, &p, &sem, s, &t, &g) - loss_of(&sdf, &m, &sem, s, &t, &g))
                / (2.0 * h);
            assert!((fd - grads.color.data()[k]).abs() < 1e-7);
        }
        let fd = (loss_of(&sdf, &color, &sem, s + h, &t, &g)
            - loss_of(&sdf, &color, &sem, s - h, &t, &g))
            / (2.0 * h);
        assert!(
            (fd - grads.sharpness).abs() < 1e-7,
            "{fd} vs {}",
            grads.sharpness
        );
        let gs = grads.sem.unwrap();
        assert_eq!(
            gs.row(1),
            &[rec.weights[1] * g.get(0, 5), rec.weights[1] * g.get(0, 6)]
        );
    }
}
