//! Neural decoders: signed distance, color and semantic fields.
//!
//! Every field takes the positional encoding of the query point and the
//! feature vector interpolated from the volume stack. The SDF network's last
//! hidden activation `h` (width `h_dim`) conditions the color and semantic
//! heads. Input layouts:
//!
//! * SDF: `[pe(p), f]`
//! * color: `[pe(p), f, d, n, h]`, logistic output
//! * semantic: `[pe(p), f, n, h]`, linear output

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, Result};
use crate::nn::{pe_dim, positional_encoding, Activation, Mlp};
use crate::volume::VolumeStack;

/// Softplus sharpness used for hidden layers.
pub const HIDDEN_BETA: f64 = 100.0;

/// Raw gradients shorter than this fall back to `+z`.
pub const NORMAL_FALLBACK_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Width of the interpolated volume feature.
    pub feat_dim: usize,
    pub pe_bands: usize,
    /// Linear layers in the SDF network (at least 2).
    pub sdf_layers: usize,
    /// Linear layers in the color network (at least 1).
    pub rgb_layers: usize,
    /// Linear layers in the semantic head (at least 1).
    pub sem_layers: usize,
    pub hidden: usize,
    pub h_dim: usize,
    /// Semantic feature width; `None` disables the head.
    pub sem_dim: Option<usize>,
    pub sdf_bias_init: f64,
    /// Half-width of the uniform draw of the SDF output weights.
    pub sdf_out_init: f64,
    pub log_s_init: f64,
}

impl FieldConfig {
    pub fn sdf_sizes(&self) -> Vec<usize> {
        let mut s = vec![pe_dim(self.pe_bands) + self.feat_dim];
        s.extend(std::iter::repeat_n(
            self.hidden,
            self.sdf_layers.saturating_sub(2),
        ));
        s.extend([self.h_dim, 1]);
        s
    }

    pub fn rgb_sizes(&self) -> Vec<usize> {
        let mut s = vec![pe_dim(self.pe_bands) + self.feat_dim + 6 + self.h_dim];
        s.extend(std::iter::repeat_n(
            self.hidden,
            self.rgb_layers.saturating_sub(1),
        ));
        s.push(3);
        s
    }

    pub fn sem_sizes(&self, sem_dim: usize) -> Vec<usize> {
        let mut s = vec![pe_dim(self.pe_bands) + self.feat_dim + 3 + self.h_dim];
        s.extend(std::iter::repeat_n(
            self.hidden,
            self.sem_layers.saturating_sub(1),
        ));
        s.push(sem_dim);
        s
    }
}

/// Result of a normal evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalEstimate {
    pub n: [f64; 3],
    /// The SDF gradient vanished and `n` is the `+z` fallback.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldBundle {
    pub sdf: Mlp,
    pub rgb: Mlp,
    pub semantic: Option<Mlp>,
    /// Sharpness is `exp(log_s)`, so it stays positive.
    pub log_s: f64,
    pub pe_bands: usize,
}

impl FieldBundle {
    pub fn init<R: Rng + ?Sized>(cfg: &FieldConfig, rng: &mut R) -> Result<Self> {
        if cfg.sdf_layers < 2 || cfg.rgb_layers == 0 || cfg.sem_layers == 0 {
            return Err(domain(
                "SDF needs 2+ layers; color and semantic heads need 1+",
            ));
        }
        let hidden = Activation::Softplus { beta: HIDDEN_BETA };
        let mut sdf = Mlp::init(&cfg.sdf_sizes(), hidden, Activation::Linear, rng)?;
        let out = sdf.layers.last_mut().expect("non-empty");
        let b = cfg.sdf_out_init;
        out.weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = if b > 0.0 { rng.gen_range(-b..b) } else { 0.0 });
        out.bias.data_mut()[0] = cfg.sdf_bias_init;
        let rgb = Mlp::init(&cfg.rgb_sizes(), hidden, Activation::Sigmoid, rng)?;
        let semantic = match cfg.sem_dim {
            Some(d) => Some(Mlp::init(
                &cfg.sem_sizes(d),
                hidden,
                Activation::Linear,
                rng,
            )?),
            None => None,
        };
        Ok(Self {
            sdf,
            rgb,
            semantic,
            log_s: cfg.log_s_init,
            pe_bands: cfg.pe_bands,
        })
    }

    pub fn sharpness(&self) -> f64 {
        self.log_s.exp()
    }

    pub fn feat_dim(&self) -> usize {
        self.sdf.in_dim() - pe_dim(self.pe_bands)
    }

    pub fn h_dim(&self) -> usize {
        self.sdf.layers.last().expect("non-empty").in_dim()
    }

    pub fn sem_dim(&self) -> usize {
        self.semantic.as_ref().map_or(0, Mlp::out_dim)
    }

    fn input(&self, p: &[f64; 3], parts: &[&[f64]]) -> Vec<f64> {
        let mut x = Vec::with_capacity(
            pe_dim(self.pe_bands) + parts.iter().map(|q| q.len()).sum::<usize>(),
        );
        positional_encoding(p, self.pe_bands, &mut x);
        for q in parts {
            x.extend_from_slice(q);
        }
        x
    }

    fn check_feat(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.feat_dim() {
            return Err(domain(format!(
                "fields expect {}-wide volume features, got {}",
                self.feat_dim(),
                f.len()
            )));
        }
        Ok(())
    }

    /// Signed distance and geometry feature at `p` given its volume feature.
    pub fn eval_sdf(&self, p: &[f64; 3], f: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_feat(f)?;
        let (out, h) = self.sdf.forward_with_hidden(&self.input(p, &[f]))?;
        Ok((out[0], h))
    }

    /// Signed distance of the field at `p`, querying features from `volume`.
    pub fn sdf_at(&self, volume: &VolumeStack, p: &[f64; 3]) -> Result<f64> {
        Ok(self.eval_sdf(p, &volume.query(p))?.0)
    }

    /// Normalized central-difference gradient with step `0.5 * min voxel`.
    pub fn eval_normal(&self, volume: &VolumeStack, p: &[f64; 3]) -> NormalEstimate {
        self.eval_normal_eps(volume, p, 0.5 * volume.min_voxel())
    }

    pub fn eval_normal_eps(&self, volume: &VolumeStack, p: &[f64; 3], eps: f64) -> NormalEstimate {
        normal_from_sdf(|q| self.sdf_at(volume, q).unwrap_or(0.0), p, eps)
    }

    pub fn eval_rgb(
        &self,
        p: &[f64; 3],
        f: &[f64],
        d: &[f64; 3],
        n: &[f64; 3],
        h: &[f64],
    ) -> Result<[f64; 3]> {
        self.check_feat(f)?;
        let c = self.rgb.forward(&self.input(p, &[f, d, n, h]))?;
        Ok([c[0], c[1], c[2]])
    }

    pub fn eval_semantic(
        &self,
        p: &[f64; 3],
        f: &[f64],
        n: &[f64; 3],
        h: &[f64],
    ) -> Result<Vec<f64>> {
        let head = self
            .semantic
            .as_ref()
            .ok_or_else(|| contract("bundle has no semantic head"))?;
        self.check_feat(f)?;
        head.forward(&self.input(p, &[f, n, h]))
    }
}

/// Central-difference unit gradient of `sdf` at `p`.
pub fn normal_from_sdf(sdf: impl Fn(&[f64; 3]) -> f64, p: &[f64; 3], eps: f64) -> NormalEstimate {
    let mut g = [0.0; 3];
    for k in 0..3 {
        let mut a = *p;
        let mut b = *p;
        a[k] += eps;
        b[k] -= eps;
        g[k] = (sdf(&a) - sdf(&b)) / (2.0 * eps);
    }
    let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    if !(norm >= NORMAL_FALLBACK_NORM) {
        return NormalEstimate {
            n: [0.0, 0.0, 1.0],
            fallback: true,
        };
    }
    NormalEstimate {
        n: g.map(|v| v / norm),
        fallback: false,
    }
}
