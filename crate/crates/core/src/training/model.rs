//! The trainable parameter set and its flat layout.
//!
//! Parameters are visited in a fixed order: encoder layers, one convolution
//! per volume level, SDF layers, color layers, semantic layers, then
//! `log_s`. Each layer contributes its weight and then its bias. The same
//! order is used by the optimizer state, the gradient tape and checkpoints.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::EncoderParams;
use crate::error::{contract, Result};
use crate::fields::{FieldBundle, FieldConfig, HIDDEN_BETA};
use crate::nn::{Activation, Mlp};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::volume::ConvParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Conv,
    Sdf,
    Rgb,
    Semantic,
    LogS,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::Conv,
        ParamGroup::Sdf,
        ParamGroup::Rgb,
        ParamGroup::Semantic,
        ParamGroup::LogS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Conv => "conv",
            ParamGroup::Sdf => "sdf",
            ParamGroup::Rgb => "rgb",
            ParamGroup::Semantic => "semantic",
            ParamGroup::LogS => "log_s",
        }
    }
}

/// One parameter tensor in the flat layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    pub shape: [usize; 2],
    /// Receives weight decay (weights do; biases and `log_s` do not).
    pub decay: bool,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    /// One refinement convolution per volume level.
    pub convs: Vec<ConvParams>,
    pub fields: FieldBundle,
}

fn field_config(cfg: &RunConfig) -> FieldConfig {
    FieldConfig {
        feat_dim: cfg.volume_res.len() * cfg.volume_channels,
        pe_bands: cfg.pe_bands,
        sdf_layers: cfg.sdf_layers,
        rgb_layers: cfg.rgb_layers,
        sem_layers: cfg.sem_layers,
        hidden: cfg.hidden,
        h_dim: cfg.h_dim,
        sem_dim: cfg.semantic.then_some(cfg.sem_dim),
        sdf_bias_init: cfg.sdf_bias_init,
        sdf_out_init: cfg.sdf_out_init,
        log_s_init: cfg.log_s_init,
    }
}

fn mlp_tensors<'a>(
    mlp: &'a Mlp,
    prefix: &str,
    group: ParamGroup,
    out: &mut Vec<(ParamInfo, &'a [f64])>,
) {
    for (l, layer) in mlp.layers.iter().enumerate() {
        for (suffix, t, decay) in [
            ("weight", &layer.weight, true),
            ("bias", &layer.bias, false),
        ] {
            let info = ParamInfo {
                name: format!("{prefix}.{l}.{suffix}"),
                group,
                shape: [t.rows(), t.cols()],
                decay,
            };
            out.push((info, t.data()));
        }
    }
}

fn mlp_tensors_mut<'a>(mlp: &'a mut Mlp, out: &mut Vec<&'a mut [f64]>) {
    for layer in mlp.layers.iter_mut() {
        out.push(layer.weight.data_mut());
        out.push(layer.bias.data_mut());
    }
}

impl Model {
    /// Fresh parameters for `in_channels` input features, drawn from the
    /// init stream of `cfg.seed`.
    pub fn init(cfg: &RunConfig, in_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, Stream::Init, 0);
        let mut sizes = vec![in_channels];
        sizes.extend(&cfg.encoder_hidden);
        sizes.push(cfg.encoder_out);
        let encoder = EncoderParams::init(&sizes, cfg.pool_radius, &mut rng)?;
        let act = Activation::Softplus { beta: HIDDEN_BETA };
        let convs = cfg
            .volume_res
            .iter()
            .map(|_| ConvParams::init(cfg.encoder_out, cfg.volume_channels, act, &mut rng))
            .collect();
        let fields = FieldBundle::init(&field_config(cfg), &mut rng)?;
        Ok(Self {
            encoder,
            convs,
            fields,
        })
    }

    /// Parameter tensors with their layout entries, in canonical order.
    pub fn tensors(&self) -> Vec<(ParamInfo, &[f64])> {
        let mut out = Vec::new();
        mlp_tensors(&self.encoder.mlp, "encoder", ParamGroup::Encoder, &mut out);
        for (l, c) in self.convs.iter().enumerate() {
            for (suffix, t, decay) in [("weight", &c.weight, true), ("bias", &c.bias, false)] {
                let info = ParamInfo {
                    name: format!("conv.{l}.{suffix}"),
                    group: ParamGroup::Conv,
                    shape: [t.rows(), t.cols()],
                    decay,
                };
                out.push((info, t.data()));
            }
        }
        mlp_tensors(&self.fields.sdf, "sdf", ParamGroup::Sdf, &mut out);
        mlp_tensors(&self.fields.rgb, "rgb", ParamGroup::Rgb, &mut out);
        if let Some(sem) = &self.fields.semantic {
            mlp_tensors(sem, "semantic", ParamGroup::Semantic, &mut out);
        }
        let info = ParamInfo {
            name: "log_s".into(),
            group: ParamGroup::LogS,
            shape: [1, 1],
            decay: false,
        };
        out.push((info, std::slice::from_ref(&self.fields.log_s)));
        out
    }

    /// Mutable views in the order of [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        mlp_tensors_mut(&mut self.encoder.mlp, &mut out);
        for c in self.convs.iter_mut() {
            out.push(c.weight.data_mut());
            out.push(c.bias.data_mut());
        }
        mlp_tensors_mut(&mut self.fields.sdf, &mut out);
        mlp_tensors_mut(&mut self.fields.rgb, &mut out);
        if let Some(sem) = self.fields.semantic.as_mut() {
            mlp_tensors_mut(sem, &mut out);
        }
        out.push(std::slice::from_mut(&mut self.fields.log_s));
        out
    }

    pub fn layout(&self) -> Vec<ParamInfo> {
        self.tensors().into_iter().map(|(i, _)| i).collect()
    }

    /// Parameters as `Tensor`s (for registration on a tape).
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.tensors()
            .into_iter()
            .map(|(i, d)| {
                Tensor::from_vec(i.shape[0], i.shape[1], d.to_vec()).expect("layout shape")
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, d)| d.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, d)| d.iter().copied())
            .collect()
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        self.tensors()
            .into_iter()
            .flat_map(|(i, d)| std::iter::repeat_n(i.decay, d.len()))
            .collect()
    }

    /// Per-scalar group labels in flat order.
    pub fn group_mask(&self) -> Vec<ParamGroup> {
        self.tensors()
            .into_iter()
            .flat_map(|(i, d)| std::iter::repeat_n(i.group, d.len()))
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.param_count();
        if flat.len() != total {
            return Err(contract(format!(
                "expected {total} parameters, got {}",
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }
}
