//! The full training forward pass recorded on a [`GradientTape`].
//!
//! ```text
//! points -> encoder MLP -> radius mean -> densify (per level) -> conv3d -> act
//!        -> trilinear query at ray samples -> SDF / color / semantic MLPs
//!        -> composite -> weighted L1
//! ```
//!
//! In image mode the per-level volumes are lifted from the feature maps and
//! the encoder MLP runs per voxel instead of per point.
//!
//! Normals fed to the color and semantic heads are central differences of
//! the current SDF and carry no gradient. [`Normals::Fixed`] replays a
//! previous set so that finite-difference probes see the same inputs.

use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::{GradientTape, Var};
use crate::config::RunConfig;
use crate::encoder::neighbor_mix;
use crate::error::{contract, domain, Result};
use crate::geometry::{Aabb, Ray};
use crate::nn::{pe_dim, positional_encoding, Mlp};
use crate::pointcloud::PointCloud;
use crate::sparse::SparseMix;
use crate::tensor::Tensor;
use crate::volume::{
    densify_mix, lift_images, DenseVolume, ImageFeatureSet, VolumeGeometry, VolumeStack,
};

use super::loss::{l1_operands, LossParts, LossWeights, RayTarget};
use super::model::Model;

/// What the feature volume is built from.
#[derive(Debug, Clone)]
pub enum VolumeInput {
    Points(PointCloud),
    Images(ImageFeatureSet),
}

/// Padded cloud bounds: each side grows by `pad * longest extent`.
pub fn volume_bounds(cloud: &PointCloud, pad: f64) -> Result<Aabb> {
    let (min, max) = cloud
        .bounds()
        .ok_or_else(|| domain("cannot bound an empty cloud"))?;
    let longest = (0..3)
        .map(|k| max[k] - min[k])
        .fold(0.0, f64::max)
        .max(1e-3);
    Aabb::new(min, max)?.padded(pad * longest)
}

/// One grid per entry of `volume_res`, all covering `bounds`.
pub fn level_geometries(bounds: &Aabb, cfg: &RunConfig) -> Result<Vec<VolumeGeometry>> {
    cfg.volume_res
        .iter()
        .map(|&r| VolumeGeometry::fit(bounds, r))
        .collect()
}

/// Rays with their sample parameters and supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    /// `rays.len() * samples_per_ray` ray parameters, ray-major.
    pub t: Vec<f64>,
    pub samples_per_ray: usize,
    pub targets: Vec<RayTarget>,
}

impl RayBatch {
    pub fn points(&self) -> Vec<[f64; 3]> {
        let spr = self.samples_per_ray;
        self.t
            .iter()
            .enumerate()
            .map(|(k, &t)| self.rays[k / spr].at(t).into())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Normals {
    Estimate,
    Fixed(Vec<[f64; 3]>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub weights: LossWeights,
    pub color_weight_floor: f64,
    pub f32_volume: bool,
}

impl ForwardOptions {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            weights: LossWeights::new(cfg.lambda_c, cfg.lambda_d, cfg.lambda_sem)?,
            color_weight_floor: cfg.color_weight_floor,
            f32_volume: cfg.volume_f32,
        })
    }
}

/// Parameter handles grouped by role.
struct ModelVars {
    all: Vec<Var>,
    encoder: Vec<(Var, Var)>,
    convs: Vec<(Var, Var)>,
    sdf: Vec<(Var, Var)>,
    rgb: Vec<(Var, Var)>,
    semantic: Option<Vec<(Var, Var)>>,
    log_s: Var,
}

fn register(tape: &mut GradientTape, model: &Model, requires_grad: bool) -> ModelVars {
    let all: Vec<Var> = model
        .param_tensors()
        .into_iter()
        .map(|t| tape.leaf(t, requires_grad))
        .collect();
    let mut it = all.iter().copied();
    let mut pairs = |n: usize| -> Vec<(Var, Var)> {
        (0..n)
            .map(|_| (it.next().expect("layout"), it.next().expect("layout")))
            .collect()
    };
    let encoder = pairs(model.encoder.mlp.layers.len());
    let convs = pairs(model.convs.len());
    let sdf = pairs(model.fields.sdf.layers.len());
    let rgb = pairs(model.fields.rgb.layers.len());
    let semantic = model
        .fields
        .semantic
        .as_ref()
        .map(|m| pairs(m.layers.len()));
    let log_s = *all.last().expect("log_s");
    ModelVars {
        all,
        encoder,
        convs,
        sdf,
        rgb,
        semantic,
        log_s,
    }
}

/// Runs `mlp`'s layers on the tape; returns the output and the input of the
/// final layer.
fn mlp_on_tape(
    tape: &mut GradientTape,
    mlp: &Mlp,
    vars: &[(Var, Var)],
    x: Var,
) -> Result<(Var, Var)> {
    let mut cur = x;
    let mut hidden = x;
    for (l, (layer, &(w, b))) in mlp.layers.iter().zip(vars).enumerate() {
        if l + 1 == mlp.layers.len() {
            hidden = cur;
        }
        let y = tape.linear(cur, w, b)?;
        cur = tape.activation(y, layer.activation)?;
    }
    Ok((cur, hidden))
}

fn record_volume(
    tape: &mut GradientTape,
    model: &Model,
    vars: &ModelVars,
    input: &VolumeInput,
    geoms: &[VolumeGeometry],
    f32_volume: bool,
) -> Result<Vec<Var>> {
    if geoms.len() != model.convs.len() {
        return Err(contract(format!(
            "{} level grids for {} convolutions",
            geoms.len(),
            model.convs.len()
        )));
    }
    let pre: Vec<Var> = match input {
        VolumeInput::Points(cloud) => {
            if cloud.is_empty() {
                return Err(domain("empty point cloud"));
            }
            let x = tape.constant(crate::encoder::input_tensor(cloud, &model.encoder)?);
            let (m, _) = mlp_on_tape(tape, &model.encoder.mlp, &vars.encoder, x)?;
            let pooled = tape.mix(m, neighbor_mix(cloud.coords(), model.encoder.radius))?;
            let mut out = Vec::with_capacity(geoms.len());
            for g in geoms {
                let (mix, _) = densify_mix(cloud.coords(), g);
                out.push(tape.mix(pooled, Arc::new(mix))?);
            }
            out
        }
        VolumeInput::Images(set) => {
            let mut out = Vec::with_capacity(geoms.len());
            for g in geoms {
                let lifted = lift_images(set, g)?;
                if lifted.channels() != model.encoder.ch_in() {
                    return Err(domain(format!(
                        "encoder expects {} channels, feature maps have {}",
                        model.encoder.ch_in(),
                        lifted.channels()
                    )));
                }
                let x = tape.constant(lifted.data);
                out.push(mlp_on_tape(tape, &model.encoder.mlp, &vars.encoder, x)?.0);
            }
            out
        }
    };
    let mut levels = Vec::with_capacity(geoms.len());
    for (((g, x), conv), &(w, b)) in geoms.iter().zip(pre).zip(&model.convs).zip(&vars.convs) {
        let y = tape.conv3d(x, w, b, g.dims)?;
        let mut y = tape.activation(y, conv.activation)?;
        if f32_volume {
            y = tape.round_f32(y)?;
        }
        levels.push(y);
    }
    Ok(levels)
}

fn query_mix(geom: &VolumeGeometry, points: &[[f64; 3]]) -> Arc<SparseMix> {
    let mut b = SparseMix::builder(geom.voxel_count());
    for p in points {
        if let Some(stencil) = geom.trilinear_stencil(p) {
            for (j, w) in stencil {
                if w != 0.0 {
                    b.push(j, w);
                }
            }
        }
        b.end_row();
    }
    Arc::new(b.build())
}

/// The refined volume stack for inference (no gradients recorded).
pub fn volume_stack(
    model: &Model,
    input: &VolumeInput,
    geoms: &[VolumeGeometry],
    f32_volume: bool,
) -> Result<VolumeStack> {
    let mut tape = GradientTape::new();
    let vars = register(&mut tape, model, false);
    let levels = record_volume(&mut tape, model, &vars, input, geoms, f32_volume)?;
    let levels = levels
        .iter()
        .zip(geoms)
        .map(|(&v, g)| DenseVolume::from_tensor(*g, tape.value(v).clone()))
        .collect::<Result<_>>()?;
    Ok(VolumeStack { levels })
}

/// A recorded forward pass, ready for [`GradientTape::backward`].
pub struct Forward {
    pub tape: GradientTape,
    pub loss: Var,
    /// Parameter leaves in [`Model::tensors`] order.
    pub params: Vec<Var>,
    /// Composite output: one row per ray.
    pub output: Var,
    pub parts: LossParts,
    /// Normals used at every sample.
    pub normals: Vec<[f64; 3]>,
}

impl Forward {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).data()[0]
    }

    /// Runs the reverse sweep and returns parameter gradients in flat order.
    pub fn gradients(mut self) -> Result<Vec<f64>> {
        let mut g = self.tape.backward(self.loss)?;
        let mut flat = Vec::new();
        for v in &self.params {
            let t = g
                .take(*v)
                .ok_or_else(|| contract("parameter without an adjoint slot"))?;
            flat.extend_from_slice(t.data());
        }
        Ok(flat)
    }
}

/// Records the whole pipeline for `batch` and its loss.
pub fn forward(
    model: &Model,
    input: &VolumeInput,
    geoms: &[VolumeGeometry],
    batch: &RayBatch,
    opts: &ForwardOptions,
    normals: &Normals,
) -> Result<Forward> {
    let spr = batch.samples_per_ray;
    let n = batch.t.len();
    if batch.rays.is_empty()
        || spr == 0
        || n != batch.rays.len() * spr
        || batch.targets.len() != batch.rays.len()
    {
        return Err(contract("ray batch shapes disagree"));
    }
    let mut tape = GradientTape::new();
    let vars = register(&mut tape, model, true);
    let levels = record_volume(&mut tape, model, &vars, input, geoms, opts.f32_volume)?;

    let points = batch.points();
    let mut feats = Vec::with_capacity(levels.len());
    for (&v, g) in levels.iter().zip(geoms) {
        feats.push(tape.mix(v, query_mix(g, &points))?);
    }
    let f = tape.concat(&feats)?;

    let bands = model.fields.pe_bands;
    let mut pe = Vec::with_capacity(n * pe_dim(bands));
    for p in &points {
        positional_encoding(p, bands, &mut pe);
    }
    let pe = tape.constant(Tensor::from_vec(n, pe_dim(bands), pe)?);

    let x_sdf = tape.concat(&[pe, f])?;
    let (sdf, h) = mlp_on_tape(&mut tape, &model.fields.sdf, &vars.sdf, x_sdf)?;

    let normals = match normals {
        Normals::Fixed(v) if v.len() == n => v.clone(),
        Normals::Fixed(_) => return Err(contract("fixed normals do not match the sample count")),
        Normals::Estimate => {
            let stack = VolumeStack {
                levels: levels
                    .iter()
                    .zip(geoms)
                    .map(|(&v, g)| DenseVolume::from_tensor(*g, tape.value(v).clone()))
                    .collect::<Result<_>>()?,
            };
            let eps = 0.5 * stack.min_voxel();
            points
                .par_iter()
                .map(|p| model.fields.eval_normal_eps(&stack, p, eps).n)
                .collect()
        }
    };
    let dirs: Vec<f64> = (0..n)
        .flat_map(|k| <[f64; 3]>::from(batch.rays[k / spr].direction))
        .collect();
    let dirs = tape.constant(Tensor::from_vec(n, 3, dirs)?);
    let nrm = tape.constant(Tensor::from_vec(
        n,
        3,
        normals.iter().flatten().copied().collect(),
    )?);

    let x_rgb = tape.concat(&[pe, f, dirs, nrm, h])?;
    let (color, _) = mlp_on_tape(&mut tape, &model.fields.rgb, &vars.rgb, x_rgb)?;
    let sem = match (&model.fields.semantic, &vars.semantic) {
        (Some(mlp), Some(v)) => {
            let x_sem = tape.concat(&[pe, f, nrm, h])?;
            Some(mlp_on_tape(&mut tape, mlp, v, x_sem)?.0)
        }
        _ => None,
    };

    let output = tape.composite(sdf, color, sem, vars.log_s, batch.t.clone(), spr)?;
    let (target, weight, parts) = l1_operands(
        tape.value(output),
        &batch.targets,
        &opts.weights,
        opts.color_weight_floor,
    )?;
    let loss = tape.weighted_l1(output, target, weight)?;
    Ok(Forward {
        tape,
        loss,
        params: vars.all,
        output,
        parts,
        normals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode;
    use crate::renderer::composite_forward;
    use crate::training::gradcheck::micro_scene;
    use crate::volume::{densify, refine};

    #[test]
    fn volume_matches_the_plain_pipeline() {
        let scene = micro_scene(3, 4, 8, false).unwrap();
        let VolumeInput::Points(cloud) = &scene.input else {
            unreachable!()
        };
        let stack = volume_stack(&scene.model, &scene.input, &scene.geoms, false).unwrap();
        let sf = encode(cloud, &scene.model.encoder).unwrap();
        for ((level, g), conv) in stack
            .levels
            .iter()
            .zip(&scene.geoms)
            .zip(&scene.model.convs)
        {
            let dense = densify(&sf, g).unwrap().volume;
            let want = refine(&dense, conv).unwrap();
            for (a, b) in level.data.data().iter().zip(want.data.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn tape_output_matches_per_sample_evaluation() {
        let scene = micro_scene(4, 4, 8, false).unwrap();
        let fwd = forward(
            &scene.model,
            &scene.input,
            &scene.geoms,
            &scene.batch,
            &scene.opts,
            &Normals::Estimate,
        )
        .unwrap();
        let out = fwd.tape.value(fwd.output).clone();
        let stack = volume_stack(&scene.model, &scene.input, &scene.geoms, false).unwrap();
        let b = &scene.model.fields;
        let spr = scene.batch.samples_per_ray;
        let eps = 0.5 * stack.min_voxel();
        for (r, ray) in scene.batch.rays.iter().enumerate() {
            let t = &scene.batch.t[r * spr..(r + 1) * spr];
            let dir: [f64; 3] = ray.direction.into();
            let mut sdf = Vec::new();
            let mut color = Tensor::zeros(spr, 3);
            let mut sem = Tensor::zeros(spr, b.sem_dim());
            for (j, &tj) in t.iter().enumerate() {
                let p: [f64; 3] = ray.at(tj).into();
                let f = stack.query(&p);
                let (s, h) = b.eval_sdf(&p, &f).unwrap();
                let n = b.eval_normal_eps(&stack, &p, eps).n;
                assert_eq!(n, fwd.normals[r * spr + j]);
                sdf.push(s);
                color
                    .row_mut(j)
                    .copy_from_slice(&b.eval_rgb(&p, &f, &dir, &n, &h).unwrap());
                sem.row_mut(j)
                    .copy_from_slice(&b.eval_semantic(&p, &f, &n, &h).unwrap());
            }
            let (want, _) =
                composite_forward(&sdf, &color, Some(&sem), b.sharpness(), t, spr).unwrap();
            for (a, w) in out.row(r).iter().zip(want.row(0)) {
                assert!(
                    (a - w).abs() <= 1e-12 * (1.0 + w.abs()),
                    "ray {r}: {a} vs {w}"
                );
            }
        }
    }

    #[test]
    fn loss_is_invariant_to_ray_order() {
        let scene = micro_scene(5, 6, 4, false).unwrap();
        let order = [3, 0, 5, 1, 4, 2];
        let spr = scene.batch.samples_per_ray;
        let b = &scene.batch;
        let permuted = RayBatch {
            rays: order.iter().map(|&i| b.rays[i]).collect(),
            t: order
                .iter()
                .flat_map(|&i| b.t[i * spr..(i + 1) * spr].to_vec())
                .collect(),
            samples_per_ray: spr,
            targets: order.iter().map(|&i| b.targets[i].clone()).collect(),
        };
        let run = |batch: &RayBatch| {
            forward(
                &scene.model,
                &scene.input,
                &scene.geoms,
                batch,
                &scene.opts,
                &Normals::Estimate,
            )
            .unwrap()
            .loss_value()
        };
        assert_eq!(run(b).to_bits(), run(&permuted).to_bits());
    }

    #[test]
    fn zero_loss_weights_give_zero_gradients() {
        let mut scene = micro_scene(6, 4, 4, false).unwrap();
        scene.opts.weights = LossWeights::new(0.0, 0.0, 0.0).unwrap();
        let fwd = forward(
            &scene.model,
            &scene.input,
            &scene.geoms,
            &scene.batch,
            &scene.opts,
            &Normals::Estimate,
        )
        .unwrap();
        assert_eq!(fwd.loss_value(), 0.0);
        assert!(fwd.gradients().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn f32_volume_gradients_stay_close() {
        let exact = micro_scene(7, 4, 4, false).unwrap();
        let rounded = micro_scene(7, 4, 4, true).unwrap();
        let grads = |s: &super::super::gradcheck::MicroScene| {
            forward(
                &s.model,
                &s.input,
                &s.geoms,
                &s.batch,
                &s.opts,
                &Normals::Estimate,
            )
            .unwrap()
            .gradients()
            .unwrap()
        };
        let (a, b) = (grads(&exact), grads(&rounded));
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(norm > 0.0 && diff <= 1e-4 * norm, "{diff} vs {norm}");
    }

    #[test]
    fn batch_shape_errors() {
        let scene = micro_scene(8, 2, 4, false).unwrap();
        let mut bad = scene.batch.clone();
        bad.t.pop();
        assert!(forward(
            &scene.model,
            &scene.input,
            &scene.geoms,
            &bad,
            &scene.opts,
            &Normals::Estimate
        )
        .is_err());
        let fixed = Normals::Fixed(vec![[0.0, 0.0, 1.0]; 3]);
        assert!(forward(
            &scene.model,
            &scene.input,
            &scene.geoms,
            &scene.batch,
            &scene.opts,
            &fixed
        )
        .is_err());
        assert!(forward(
            &scene.model,
            &scene.input,
            &scene.geoms[..0],
            &scene.batch,
            &scene.opts,
            &Normals::Estimate
        )
        .is_err());
    }
}
