//! Analytic gradients of the full pipeline loss against central finite
//! differences.
//!
//! The probe perturbs every parameter scalar by `±h` and re-records the
//! forward pass with the base normals frozen, since normals are treated as
//! constants by the analytic gradient.

use rand::Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::geometry::{ray_aabb_clip, sample_t_values, Ray, SampleMode, Vec3};
use crate::pointcloud::PointCloud;
use crate::rng::{stream, Stream};
use crate::volume::VolumeGeometry;

use super::graph::{
    forward, level_geometries, volume_bounds, ForwardOptions, Normals, RayBatch, VolumeInput,
};
use super::loss::{ClassEmbedding, LossWeights, RayTarget};
use super::model::{Model, ParamGroup};

/// Gradient magnitude above which relative errors are always reported.
pub const SIGNIFICANT: f64 = 1e-6;

/// A small fixed problem covering every parameter group.
#[derive(Debug, Clone)]
pub struct MicroScene {
    pub model: Model,
    pub input: VolumeInput,
    pub geoms: Vec<VolumeGeometry>,
    pub batch: RayBatch,
    pub opts: ForwardOptions,
}

/// Settings of the micro-scene model.
pub fn micro_config(seed: u64) -> RunConfig {
    let mut c = RunConfig {
        seed,
        ..RunConfig::default()
    };
    for (k, v) in [
        ("encoder_hidden", "5"),
        ("encoder_out", "3"),
        ("pool_radius", "0.3"),
        ("volume_res", "4"),
        ("volume_channels", "3"),
        ("pe_bands", "1"),
        ("sdf_layers", "3"),
        ("rgb_layers", "2"),
        ("sem_layers", "2"),
        ("hidden", "6"),
        ("h_dim", "4"),
        ("sem_dim", "3"),
        ("sdf_bias_init", "0.0"),
        ("sdf_out_init", "0.5"),
        ("color_weight_floor", "0.0"),
        ("lambda_sem", "0.5"),
    ] {
        c.set(k, v).expect("valid micro config");
    }
    c
}

/// `rays` rays of `samples` samples each through a 40-point cloud.
pub fn micro_scene(seed: u64, rays: usize, samples: usize, f32_volume: bool) -> Result<MicroScene> {
    let mut cfg = micro_config(seed);
    cfg.volume_f32 = f32_volume;
    let mut rng = stream(seed, Stream::Synth, 0);
    let n = 40;
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-0.4..0.4)))
        .collect();
    let mut feats = Vec::with_capacity(6 * n);
    for p in &coords {
        feats.extend((0..3).map(|_| rng.gen::<f64>()));
        let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-9);
        feats.extend(p.iter().map(|v| v / norm));
    }
    let cloud = PointCloud::new(coords, feats, 6)?.with_normals_at(3)?;
    let geoms = level_geometries(&volume_bounds(&cloud, 0.1)?, &cfg)?;
    let model = Model::init(&cfg, 6)?;
    let emb = ClassEmbedding::new(cfg.sem_dim, seed);
    let bounds = geoms[0].bounds();
    let eye = Vec3::new(0.2, -1.5, 0.4);
    let mut batch = RayBatch {
        rays: vec![],
        t: vec![],
        samples_per_ray: samples,
        targets: vec![],
    };
    while batch.rays.len() < rays {
        let aim = Vec3::new(
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        );
        let ray = Ray::new(eye, aim - eye)?;
        let Some((near, far)) = ray_aabb_clip(&ray, &bounds) else {
            continue;
        };
        batch.t.extend(sample_t_values(
            near,
            far,
            samples,
            SampleMode::Stratified,
            &mut rng,
        )?);
        let class = (batch.rays.len() % 4) as u8;
        batch.targets.push(RayTarget {
            rgb: std::array::from_fn(|_| rng.gen()),
            depth: Some(rng.gen_range(near..far)),
            semantic: emb.get(class)?.map(<[f64]>::to_vec),
        });
        batch.rays.push(ray);
    }
    let opts = ForwardOptions {
        weights: LossWeights::new(cfg.lambda_c, cfg.lambda_d, cfg.lambda_sem)?,
        color_weight_floor: cfg.color_weight_floor,
        f32_volume,
    };
    Ok(MicroScene {
        model,
        input: VolumeInput::Points(cloud),
        geoms,
        batch,
        opts,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub scalars: usize,
    /// Largest `|a - n| / max(|a|, |n|)` among entries that are judged
    /// relatively or have magnitude at least [`SIGNIFICANT`].
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.failures == 0)
    }
}

/// Compares analytic and numeric gradients for every scalar. With
/// `corrupt`, the analytic entry of largest magnitude is scaled by 1.05
/// before comparison (a self-test of the checker).
pub fn gradcheck(
    scene: &MicroScene,
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
    corrupt: bool,
) -> Result<GradcheckReport> {
    let base = forward(
        &scene.model,
        &scene.input,
        &scene.geoms,
        &scene.batch,
        &scene.opts,
        &Normals::Estimate,
    )?;
    let loss = base.loss_value();
    let frozen = Normals::Fixed(base.normals.clone());
    let mut analytic = base.gradients()?;
    if corrupt {
        if let Some(k) =
            (0..analytic.len()).max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
        {
            analytic[k] *= 1.05;
        }
    }
    let groups = scene.model.group_mask();
    let flat = scene.model.flatten();
    let mut probe = scene.model.clone();
    let mut eval = |k: usize, v: f64| -> Result<f64> {
        let mut p = flat.clone();
        p[k] = v;
        probe.set_flat(&p)?;
        Ok(forward(
            &probe,
            &scene.input,
            &scene.geoms,
            &scene.batch,
            &scene.opts,
            &frozen,
        )?
        .loss_value())
    };
    let mut reports: Vec<GroupReport> = ParamGroup::ALL
        .iter()
        .filter(|g| groups.contains(g))
        .map(|&group| GroupReport {
            group,
            scalars: 0,
            worst_rel: 0.0,
            worst_abs: 0.0,
            failures: 0,
        })
        .collect();
    for k in 0..flat.len() {
        let numeric = (eval(k, flat[k] + h)? - eval(k, flat[k] - h)?) / (2.0 * h);
        let a = analytic[k];
        let diff = (a - numeric).abs();
        let r = reports
            .iter_mut()
            .find(|r| r.group == groups[k])
            .expect("group listed");
        r.scalars += 1;
        r.worst_abs = r.worst_abs.max(diff);
        let scale = a.abs().max(numeric.abs());
        let rel = if diff > 0.0 { diff / scale } else { 0.0 };
        if diff > abs_tol || scale >= SIGNIFICANT {
            r.worst_rel = r.worst_rel.max(rel);
        }
        if diff > abs_tol && rel > rel_tol {
            r.failures += 1;
        }
    }
    Ok(GradcheckReport {
        loss,
        h,
        rel_tol,
        abs_tol,
        groups: reports,
    })
}
