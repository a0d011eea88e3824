//! The pre-training loop.
//!
//! Every step is a pure function of `(config, dataset, parameters, step)`:
//! augmentation, masking, frame choice, pixel choice and sample placement
//! each draw from their own stream keyed by the step index. Resuming from a
//! checkpoint therefore reproduces the uninterrupted run exactly.

use std::io::Write;

use log::{info, warn};
use rand::seq::index;
use rand::Rng;

use crate::config::{InputKind, RunConfig, SampleKind};
use crate::error::{domain, Error, Result};
use crate::geometry::{ray_aabb_clip, sample_t_values, Ray, RigidTransform, SampleMode};
use crate::pointcloud::{
    augment, grid_sample, mask_groups, AugmentRanges, Augmentation, GridSpec, PointCloud,
};
use crate::renderer::z_factor;
use crate::rng::{stream, Stream};
use crate::synth::{Dataset, Frame};
use crate::volume::{mask_image, ImageFeatureSet, VolumeGeometry, VolumeStack};

use super::checkpoint::{cloud_fingerprint, Checkpoint};
use super::eval::{evaluate_frames, Metrics};
use super::graph::{
    forward, level_geometries, volume_bounds, volume_stack, ForwardOptions, Normals, RayBatch,
    VolumeInput,
};
use super::loss::{ClassEmbedding, RayTarget};
use super::model::Model;
use super::optim::{AdamW, Schedule};

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub loss_c: f64,
    pub loss_d: f64,
    pub loss_sem: f64,
    pub lr: f64,
    /// Non-miss rays in the batch.
    pub rays: usize,
}

pub const CSV_HEADER: &str = "step,loss,loss_c,loss_d,loss_sem,lr";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.loss, self.loss_c, self.loss_d, self.loss_sem, self.lr
        )
    }
}

pub fn write_csv<W: Write>(w: &mut W, log: &[StepLog]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for row in log {
        writeln!(w, "{}", row.csv_row())?;
    }
    Ok(())
}

/// Why a frame cannot supervise, if it cannot.
pub fn frame_problem(f: &Frame) -> Option<String> {
    let (w, h) = (f.camera.intrinsics.width, f.camera.intrinsics.height);
    if (f.rgb.width, f.rgb.height, f.rgb.channels) != (w, h, 3)
        || (f.depth.width, f.depth.height) != (w, h)
    {
        return Some("image sizes disagree with the camera".into());
    }
    if f.classes.len() != w * h {
        return Some("class map size disagrees with the camera".into());
    }
    if f.rgb.data.iter().any(|v| !v.is_finite()) {
        return Some("non-finite color".into());
    }
    None
}

fn sample_mode(kind: SampleKind) -> SampleMode {
    match kind {
        SampleKind::UniformCenter => SampleMode::UniformCenter,
        SampleKind::Stratified => SampleMode::Stratified,
    }
}

/// The cloud the volume is built from at inference time: the full fused
/// cloud, grid-sampled, without augmentation or masking.
pub fn inference_input(
    cfg: &RunConfig,
    data: &Dataset,
    usable: &[usize],
) -> Result<(VolumeInput, Vec<VolumeGeometry>)> {
    let geoms = level_geometries(&volume_bounds(&data.cloud, cfg.volume_pad)?, cfg)?;
    let input = match cfg.input {
        InputKind::Points => VolumeInput::Points(grid_sample(
            &data.cloud,
            &GridSpec::new(cfg.grid_cell()?, [0.0; 3])?,
        )),
        InputKind::Images => {
            let maps = usable.iter().map(|&i| data.frames[i].rgb.clone()).collect();
            let cams = usable.iter().map(|&i| data.frames[i].camera).collect();
            VolumeInput::Images(ImageFeatureSet::new(maps, cams)?)
        }
    };
    Ok((input, geoms))
}

/// Everything one training step consumes.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub input: VolumeInput,
    pub geoms: Vec<VolumeGeometry>,
    pub rays: RayBatch,
    pub augmentation: Augmentation,
}

/// Builds the batch of step `step`; `None` when no ray hits the volume.
pub fn prepare_step(
    cfg: &RunConfig,
    data: &Dataset,
    usable: &[usize],
    embedding: Option<&ClassEmbedding>,
    step: usize,
) -> Result<Option<StepBatch>> {
    let s = step as u64;
    let cell = GridSpec::new(cfg.grid_cell()?, [0.0; 3])?;
    let (input, geoms, aug) = match cfg.input {
        InputKind::Points => {
            let ranges = AugmentRanges {
                max_rot_z: cfg.aug_rot_z,
                scale_min: cfg.aug_scale_min,
                scale_max: cfg.aug_scale_max,
                flip_x_prob: cfg.aug_flip_x,
                flip_y_prob: cfg.aug_flip_y,
            };
            let params = ranges.draw(&mut stream(cfg.seed, Stream::Augment, s));
            let (cloud, aug) = augment(&data.cloud, &params)?;
            let geoms = level_geometries(&volume_bounds(&cloud, cfg.volume_pad)?, cfg)?;
            let mut mrng = stream(cfg.seed, Stream::Masking, s);
            let mask = |pc: &PointCloud, rng: &mut _| {
                mask_groups(
                    pc,
                    cfg.mask_groups,
                    cfg.mask_group_size,
                    cfg.mask_ratio,
                    rng,
                )
            };
            let cloud = if cfg.mask_before_grid {
                grid_sample(&mask(&cloud, &mut mrng)?, &cell)
            } else {
                mask(&grid_sample(&cloud, &cell), &mut mrng)?
            };
            if cloud.is_empty() {
                return Ok(None);
            }
            (VolumeInput::Points(cloud), geoms, aug)
        }
        InputKind::Images => {
            let aug = Augmentation {
                linear: RigidTransform::identity(),
                scale: 1.0,
            };
            let geoms = level_geometries(&volume_bounds(&data.cloud, cfg.volume_pad)?, cfg)?;
            let mut mrng = stream(cfg.seed, Stream::Masking, s);
            let mut maps = Vec::with_capacity(usable.len());
            let mut masks = Vec::with_capacity(usable.len());
            for &i in usable {
                let (img, bitmap) = mask_image(
                    &data.frames[i].rgb,
                    cfg.image_mask_patch,
                    cfg.image_mask_ratio,
                    &mut mrng,
                )?;
                maps.push(img);
                masks.push(Some(bitmap));
            }
            let cams = usable.iter().map(|&i| data.frames[i].camera).collect();
            let mut set = ImageFeatureSet::new(maps, cams)?;
            set.masks = masks;
            (VolumeInput::Images(set), geoms, aug)
        }
    };

    let k = cfg.frames_per_cloud.min(usable.len());
    let picks = index::sample(&mut stream(cfg.seed, Stream::Frames, s), usable.len(), k).into_vec();
    let bounds = geoms[0].bounds();
    let mut rrng = stream(cfg.seed, Stream::Rays, s);
    let mut srng = stream(cfg.seed, Stream::Samples, s);
    let mode = sample_mode(cfg.sample_mode);
    let mut rays = Vec::new();
    let mut t = Vec::new();
    let mut targets = Vec::new();
    for p in picks {
        let f = &data.frames[usable[p]];
        let (w, h) = (f.camera.intrinsics.width, f.camera.intrinsics.height);
        for _ in 0..cfg.rays_per_image {
            let (x, y) = (rrng.gen_range(0..w), rrng.gen_range(0..h));
            let world = f.camera.ray([x as f64, y as f64])?;
            let ray = Ray::new(
                aug.apply_point(&world.origin),
                aug.apply_direction(&world.direction),
            )?;
            let Some((near, far)) = ray_aabb_clip(&ray, &bounds) else {
                continue;
            };
            if !(far > near) {
                continue;
            }
            let z = f.depth.get(x, y, 0);
            let depth =
                (z.is_finite() && z > 0.0).then(|| z / z_factor(&f.camera, &world) * aug.scale);
            let semantic = match embedding {
                Some(e) => e.get(f.classes[y * w + x])?.map(<[f64]>::to_vec),
                None => None,
            };
            let px = f.rgb.pixel(x, y);
            targets.push(RayTarget {
                rgb: [px[0], px[1], px[2]],
                depth,
                semantic,
            });
            t.extend(sample_t_values(
                near,
                far,
                cfg.samples_per_ray,
                mode,
                &mut srng,
            )?);
            rays.push(ray);
        }
    }
    if rays.is_empty() {
        return Ok(None);
    }
    Ok(Some(StepBatch {
        input,
        geoms,
        rays: RayBatch {
            rays,
            t,
            samples_per_ray: cfg.samples_per_ray,
            targets,
        },
        augmentation: aug,
    }))
}

/// Training state over one dataset.
pub struct Trainer<'a> {
    pub cfg: RunConfig,
    pub model: Model,
    pub opt: AdamW,
    /// Index of the next step to run.
    pub step: usize,
    pub log: Vec<StepLog>,
    /// Periodic held-out metrics `(step, metrics)`.
    pub evals: Vec<(usize, Metrics)>,
    pub skipped_steps: usize,
    data: &'a Dataset,
    usable: Vec<usize>,
    embedding: Option<ClassEmbedding>,
    schedule: Schedule,
    opts: ForwardOptions,
}

/// Channels the encoder consumes for `cfg` on `data`.
pub fn input_channels(cfg: &RunConfig, data: &Dataset) -> usize {
    match cfg.input {
        InputKind::Points => data.cloud.channels(),
        InputKind::Images => 3,
    }
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: RunConfig, data: &'a Dataset) -> Result<Self> {
        let model = Model::init(&cfg, input_channels(&cfg, data))?;
        Self::with_model(cfg, data, model, None, 0)
    }

    /// Continues from existing parameters and optimizer state.
    pub fn with_model(
        cfg: RunConfig,
        data: &'a Dataset,
        model: Model,
        opt: Option<AdamW>,
        step: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.cloud.is_empty() {
            return Err(domain("dataset has an empty cloud"));
        }
        let mut usable = Vec::new();
        let train = data.train_indices();
        for i in train.clone() {
            match frame_problem(&data.frames[i]) {
                None => usable.push(i),
                Some(why) => warn!("skipping frame {i}: {why}"),
            }
        }
        if usable.is_empty() || 2 * (train.len() - usable.len()) > train.len() {
            return Err(domain(format!(
                "{} of {} training frames are unusable; aborting",
                train.len() - usable.len(),
                train.len()
            )));
        }
        let n = model.param_count();
        let opt = match opt {
            Some(o) if o.m.len() == n => o,
            Some(_) => {
                return Err(crate::error::contract(
                    "optimizer state does not match the model",
                ))
            }
            None => AdamW::new(n, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        };
        let embedding = cfg
            .semantic
            .then(|| ClassEmbedding::new(cfg.sem_dim, cfg.seed));
        Ok(Self {
            schedule: Schedule::from_config(&cfg),
            opts: ForwardOptions::from_config(&cfg)?,
            cfg,
            model,
            opt,
            step,
            log: Vec::new(),
            evals: Vec::new(),
            skipped_steps: 0,
            data,
            usable,
            embedding,
        })
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn usable_frames(&self) -> &[usize] {
        &self.usable
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    pub fn batch(&self, step: usize) -> Result<Option<StepBatch>> {
        prepare_step(
            &self.cfg,
            self.data,
            &self.usable,
            self.embedding.as_ref(),
            step,
        )
    }

    /// Loss of the current parameters on the batch of step `step`.
    pub fn loss_at(&self, step: usize) -> Result<Option<f64>> {
        let Some(b) = self.batch(step)? else {
            return Ok(None);
        };
        let fwd = forward(
            &self.model,
            &b.input,
            &b.geoms,
            &b.rays,
            &self.opts,
            &Normals::Estimate,
        )?;
        Ok(Some(fwd.loss_value()))
    }

    /// Runs one step. Returns `None` if the step was skipped.
    pub fn step(&mut self) -> Result<Option<StepLog>> {
        let step = self.step;
        self.step += 1;
        let Some(b) = self.batch(step)? else {
            self.skipped_steps += 1;
            warn!("step {step}: no ray hit the volume; skipped");
            if self.step >= 10 && 2 * self.skipped_steps > self.step {
                return Err(Error::Numeric(format!(
                    "{} of {} steps skipped; aborting",
                    self.skipped_steps, self.step
                )));
            }
            return Ok(None);
        };
        let fwd = forward(
            &self.model,
            &b.input,
            &b.geoms,
            &b.rays,
            &self.opts,
            &Normals::Estimate,
        )?;
        let loss = fwd.loss_value();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("step {step}: loss is {loss}")));
        }
        let parts = fwd.parts;
        let grads = fwd.gradients()?;
        let lr = self.schedule.lr(step);
        let mut flat = self.model.flatten();
        self.opt.step(
            &mut flat,
            &grads,
            &self.model.decay_mask(),
            lr,
            self.cfg.weight_decay,
        )?;
        self.model.set_flat(&flat)?;
        let row = StepLog {
            step,
            loss,
            loss_c: parts.color,
            loss_d: parts.depth,
            loss_sem: parts.semantic,
            lr,
            rays: parts.rays,
        };
        self.log.push(row);
        if self.cfg.eval_every > 0 && self.step.is_multiple_of(self.cfg.eval_every) {
            let m = self.evaluate_heldout()?;
            info!(
                "step {}: held-out psnr {:.2} dB, depth mae {:.4}, coverage {:.3}",
                self.step, m.psnr_rgb, m.mae_depth, m.weight_coverage
            );
            self.evals.push((self.step, m));
        }
        Ok(Some(row))
    }

    /// Steps until `self.step == until`.
    pub fn run_until(&mut self, until: usize, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        while self.step < until {
            if let Some(row) = self.step()? {
                on_step(&row);
            }
        }
        Ok(())
    }

    /// The refined volume of the full cloud under the current parameters.
    pub fn inference_volume(&self) -> Result<VolumeStack> {
        let (input, geoms) = inference_input(&self.cfg, self.data, &self.usable)?;
        volume_stack(&self.model, &input, &geoms, self.cfg.volume_f32)
    }

    pub fn evaluate(&self, frames: &[usize]) -> Result<Metrics> {
        let stack = self.inference_volume()?;
        let frames: Vec<Frame> = frames
            .iter()
            .map(|&i| self.data.frames[i].clone())
            .collect();
        evaluate_frames(&stack, &self.model.fields, &frames, self.cfg.render_samples)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.cfg.clone(),
            model: self.model.clone(),
            optimizer: self.opt.clone(),
            step: self.step,
            input_channels: input_channels(&self.cfg, self.data),
            data_fingerprint: cloud_fingerprint(&self.data.cloud),
            volume: self.inference_volume()?,
        })
    }

    /// Continues a run from `ckpt` on the dataset it was trained on.
    pub fn resume(ckpt: Checkpoint, data: &'a Dataset) -> Result<Self> {
        ckpt.check_dataset(data)?;
        Self::with_model(
            ckpt.config,
            data,
            ckpt.model,
            Some(ckpt.optimizer),
            ckpt.step,
        )
    }

    pub fn evaluate_heldout(&self) -> Result<Metrics> {
        self.evaluate(&self.data.heldout_indices().collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, AnalyticScene, RingSpec};

    fn tiny_data() -> Dataset {
        make_dataset(
            &AnalyticScene::demo(),
            5,
            16,
            2,
            &RingSpec::default(),
            &mut stream(0, Stream::Synth, 0),
        )
        .unwrap()
    }

    fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.apply_preset("desk").unwrap();
        c.volume_res = vec![6];
        c.rays_per_image = 6;
        c.samples_per_ray = 6;
        c.frames_per_cloud = 2;
        c.hidden = 8;
        c.render_samples = 8;
        c.iters = 4;
        c
    }

    #[test]
    fn same_seed_same_losses() {
        let data = tiny_data();
        let run = || {
            let mut t = Trainer::new(tiny_cfg(), &data).unwrap();
            t.run_until(3, |_| {}).unwrap();
            t.log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a, run());
        let mut other = tiny_cfg();
        other.seed = 1;
        let mut t = Trainer::new(other, &data).unwrap();
        t.run_until(3, |_| {}).unwrap();
        assert_ne!(
            a,
            t.log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_resume_reproduces_the_next_step() {
        let data = tiny_data();
        let mut straight = Trainer::new(tiny_cfg(), &data).unwrap();
        straight.run_until(2, |_| {}).unwrap();

        let mut first = Trainer::new(tiny_cfg(), &data).unwrap();
        first.run_until(1, |_| {}).unwrap();
        let ckpt = first.checkpoint().unwrap();
        let mut bytes = Vec::new();
        ckpt.write(&mut bytes).unwrap();
        let back = Checkpoint::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(again, bytes);

        let mut resumed = Trainer::resume(back, &data).unwrap();
        resumed.run_until(2, |_| {}).unwrap();
        assert_eq!(
            resumed.log[0].loss.to_bits(),
            straight.log[1].loss.to_bits()
        );
        assert_eq!(resumed.model, straight.model);
    }

    #[test]
    fn checkpoint_rejects_other_data() {
        let data = tiny_data();
        let t = Trainer::new(tiny_cfg(), &data).unwrap();
        let ckpt = t.checkpoint().unwrap();
        let other = make_dataset(
            &AnalyticScene::demo(),
            5,
            16,
            3,
            &RingSpec::default(),
            &mut stream(0, Stream::Synth, 0),
        )
        .unwrap();
        assert!(matches!(
            Trainer::resume(ckpt, &other),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_weights_only_decay() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.lambda_c = 0.0;
        cfg.lambda_d = 0.0;
        cfg.lambda_sem = 0.0;
        cfg.weight_decay = 0.05;
        cfg.lr_gamma = 1.0;
        let mut t = Trainer::new(cfg.clone(), &data).unwrap();
        let before = t.model.flatten();
        let decay = t.model.decay_mask();
        t.run_until(3, |_| {}).unwrap();
        let factor = (1.0 - cfg.lr * cfg.weight_decay).powi(3);
        for ((a, b), d) in t.model.flatten().iter().zip(&before).zip(&decay) {
            let want = if *d { b * factor } else { *b };
            assert!((a - want).abs() <= 1e-15 * (1.0 + b.abs()), "{a} vs {want}");
        }
    }

    #[test]
    fn logged_lr_follows_the_exponential_schedule() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let mut t = Trainer::new(cfg.clone(), &data).unwrap();
        t.run_until(4, |_| {}).unwrap();
        for row in &t.log {
            let want = cfg.lr * cfg.lr_gamma.powf(row.step as f64 / cfg.iters as f64);
            assert!((row.lr - want).abs() <= 1e-15 * want);
        }
        let mut csv = Vec::new();
        write_csv(&mut csv, &t.log).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("step,loss,loss_c,loss_d,loss_sem,lr\n0,"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn unusable_frames_are_skipped_until_half() {
        let mut data = tiny_data();
        data.frames[0].rgb.data[0] = f64::NAN;
        let t = Trainer::new(tiny_cfg(), &data).unwrap();
        assert_eq!(t.usable_frames(), &[1, 2, 3]);
        data.frames[1].rgb.data[0] = f64::NAN;
        data.frames[2].classes.pop();
        assert!(Trainer::new(tiny_cfg(), &data).is_err());
    }

    #[test]
    fn evaluation_is_repeatable() {
        let data = tiny_data();
        let t = Trainer::new(tiny_cfg(), &data).unwrap();
        let a = t.evaluate_heldout().unwrap();
        let b = t.evaluate_heldout().unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn image_branch_trains() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.input = InputKind::Images;
        cfg.image_mask_patch = 4;
        let mut t = Trainer::new(cfg, &data).unwrap();
        assert_eq!(t.model.encoder.ch_in(), 3);
        t.run_until(2, |_| {}).unwrap();
        assert!(t.log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn augmented_steps_stay_finite() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.aug_rot_z = 3.0;
        cfg.aug_scale_min = 0.8;
        cfg.aug_scale_max = 1.2;
        cfg.aug_flip_x = 0.5;
        cfg.mask_ratio = 0.5;
        let mut t = Trainer::new(cfg, &data).unwrap();
        t.run_until(3, |_| {}).unwrap();
        assert_eq!(t.log.len() + t.skipped_steps, 3);
    }
}
