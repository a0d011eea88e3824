//! Full-image renders and held-out view metrics.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::fields::FieldBundle;
use crate::geometry::{Camera, SampleMode};
use crate::image::Image;
use crate::renderer::{render_pixels, z_factor};
use crate::synth::Frame;
use crate::volume::VolumeStack;

/// PSNR reported when the color error is exactly zero.
pub const PSNR_CAP: f64 = 99.0;

/// A rendered view: color, camera z-depth and accumulated weight.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rgb: Image,
    pub depth: Image,
    pub acc: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Over all pixels and channels of all views, colors in `[0, 1]`.
    pub psnr_rgb: f64,
    /// Mean absolute z-depth error over pixels with valid ground truth.
    pub mae_depth: f64,
    /// Mean accumulated weight over all pixels.
    pub weight_coverage: f64,
}

/// Renders every pixel with bin-center samples (no sampling noise).
pub fn render_view(
    stack: &VolumeStack,
    bundle: &FieldBundle,
    camera: &Camera,
    samples: usize,
) -> Result<RenderedView> {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let pixels: Vec<[usize; 2]> = (0..h).flat_map(|y| (0..w).map(move |x| [x, y])).collect();
    let out = render_pixels(
        stack,
        bundle,
        camera,
        &pixels,
        samples,
        SampleMode::UniformCenter,
        0,
    )?;
    let mut rgb = Image::zeros(w, h, 3);
    let mut depth = Image::zeros(w, h, 1);
    let mut acc = Image::zeros(w, h, 1);
    for (k, &[x, y]) in pixels.iter().enumerate() {
        rgb.pixel_mut(x, y).copy_from_slice(&out.rgb[k]);
        let ray = camera.ray([x as f64, y as f64])?;
        depth.pixel_mut(x, y)[0] = out.depth[k] * z_factor(camera, &ray);
        acc.pixel_mut(x, y)[0] = out.weight_sum[k];
    }
    Ok(RenderedView { rgb, depth, acc })
}

fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

/// Running sums behind [`Metrics`].
#[derive(Debug, Clone, Copy, Default)]
struct Totals {
    sq: f64,
    channels: usize,
    depth_abs: f64,
    depth_px: usize,
    weight: f64,
    px: usize,
}

impl Totals {
    fn add(&mut self, view: &RenderedView, frame: &Frame) -> Result<()> {
        if !view.rgb.same_size(&frame.rgb) || !view.depth.same_size(&frame.depth) {
            return Err(contract("render and ground truth sizes differ"));
        }
        for (a, b) in view.rgb.data.iter().zip(&frame.rgb.data) {
            self.sq += (a - b) * (a - b);
        }
        self.channels += frame.rgb.data.len();
        for (a, b) in view.depth.data.iter().zip(&frame.depth.data) {
            if b.is_finite() && *b > 0.0 {
                self.depth_abs += (a - b).abs();
                self.depth_px += 1;
            }
        }
        self.weight += view.acc.data.iter().sum::<f64>();
        self.px += view.acc.data.len();
        Ok(())
    }

    fn metrics(&self) -> Metrics {
        Metrics {
            psnr_rgb: psnr(self.sq / self.channels.max(1) as f64),
            mae_depth: if self.depth_px > 0 {
                self.depth_abs / self.depth_px as f64
            } else {
                0.0
            },
            weight_coverage: self.weight / self.px.max(1) as f64,
        }
    }
}

/// Metrics of one rendered view against its ground truth.
pub fn view_metrics(view: &RenderedView, frame: &Frame) -> Result<Metrics> {
    let mut t = Totals::default();
    t.add(view, frame)?;
    Ok(t.metrics())
}

/// Renders each frame's camera and pools the errors over all of them.
pub fn evaluate_frames(
    stack: &VolumeStack,
    bundle: &FieldBundle,
    frames: &[Frame],
    samples: usize,
) -> Result<Metrics> {
    let mut t = Totals::default();
    for f in frames {
        let view = render_view(stack, bundle, &f.camera, samples)?;
        t.add(&view, f)?;
    }
    Ok(t.metrics())
}
