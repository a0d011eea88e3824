//! Flat `key = value` run configuration.
//!
//! Every knob of the pipeline lives here with its default. Files hold one
//! `key = value` pair per line; `#` starts a comment. Unknown keys are
//! rejected. [`RunConfig::to_text`] echoes every value, and checkpoints
//! store that echo.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A value that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    const TYPE: &'static str;
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    const TYPE: &'static str = "float";
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
        if !v.is_finite() {
            return Err(format!("`{s}` is not finite"));
        }
        Ok(v)
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for usize {
    const TYPE: &'static str = "int";
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
            .map_err(|_| format!("`{s}` is not a non-negative integer"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    const TYPE: &'static str = "u64";
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
            .map_err(|_| format!("`{s}` is not a non-negative integer"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    const TYPE: &'static str = "bool";
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("`{s}` is not true/false")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    const TYPE: &'static str = "list";
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! choice {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl ConfigValue for $name {
            const TYPE: &'static str = concat!("choice(", $($text, " ",)+ ")");
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!("`{s}` is not one of {}", [$($text),+].join("/"))),
                }
            }
            fn render(&self) -> String {
                match self { $($name::$variant => $text.to_string()),+ }
            }
        }
    };
}

choice!(
    /// Which branch builds the feature volume.
    InputKind { Points => "points", Images => "images" }
);
choice!(
    ScheduleKind { Exponential => "exponential", OneCycle => "onecycle" }
);
choice!(
    SampleKind { UniformCenter => "uniform", Stratified => "stratified" }
);

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr;)+) => {
        /// All run parameters. See the field docs for units and meaning.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)+ }
            }
        }

        impl RunConfig {
            /// Keys in declaration order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),+];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value.trim())
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })+
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Textual value of one key.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($key) => Some(ConfigValue::render(&self.$key)),)+
                    _ => None,
                }
            }

            fn schema() -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{}:{}", stringify!($key), <$ty as ConfigValue>::TYPE);)+
                s
            }
        }
    };
}

run_config! {
    /// Root of every named random stream.
    seed: u64 = 0;
    /// `points` encodes the fused cloud; `images` lifts image features.
    input: InputKind = InputKind::Points;
    /// Grid-sampling cell edge (m); one value or three per-axis values.
    grid_size: Vec<f64> = vec![0.02];
    /// Apply group masking before grid sampling.
    mask_before_grid: bool = true;
    /// Fraction of point groups removed each step.
    mask_ratio: f64 = 0.0;
    mask_groups: usize = 2048;
    mask_group_size: usize = 64;
    /// Image-branch masking: patch edge (px) and masked fraction.
    image_mask_patch: usize = 32;
    image_mask_ratio: f64 = 0.3;
    /// Augmentation ranges: max |z rotation| (rad), scale interval, flip probabilities.
    aug_rot_z: f64 = 0.0;
    aug_scale_min: f64 = 1.0;
    aug_scale_max: f64 = 1.0;
    aug_flip_x: f64 = 0.0;
    aug_flip_y: f64 = 0.0;
    /// Hidden widths of the point encoder MLP.
    encoder_hidden: Vec<usize> = vec![32, 32];
    encoder_out: usize = 16;
    /// Neighborhood pooling radius (m).
    pool_radius: f64 = 0.05;
    /// Voxels along the longest axis, one entry per volume level.
    volume_res: Vec<usize> = vec![64];
    /// Channels of each refined volume level.
    volume_channels: usize = 16;
    /// Padding around the cloud bounds, as a fraction of the longest extent.
    volume_pad: f64 = 0.1;
    /// Round refined volume values to f32 precision.
    volume_f32: bool = false;
    pe_bands: usize = 4;
    sdf_layers: usize = 5;
    rgb_layers: usize = 3;
    sem_layers: usize = 2;
    hidden: usize = 128;
    h_dim: usize = 32;
    semantic: bool = true;
    sem_dim: usize = 16;
    /// Initial SDF output bias, and the half-width of the uniform draw of
    /// the SDF output weights. A small half-width starts from a nearly
    /// constant positive field (an empty scene).
    sdf_bias_init: f64 = 0.1;
    sdf_out_init: f64 = 1e-3;
    log_s_init: f64 = 3f64.ln();
    frames_per_cloud: usize = 5;
    rays_per_image: usize = 128;
    samples_per_ray: usize = 128;
    sample_mode: SampleKind = SampleKind::Stratified;
    lambda_c: f64 = 1.0;
    lambda_d: f64 = 0.1;
    lambda_sem: f64 = 0.01;
    /// Rays whose rendered weight sum is below this get no color loss.
    color_weight_floor: f64 = 0.05;
    lr: f64 = 1e-4;
    weight_decay: f64 = 0.05;
    adam_beta1: f64 = 0.9;
    adam_beta2: f64 = 0.999;
    adam_eps: f64 = 1e-8;
    schedule: ScheduleKind = ScheduleKind::Exponential;
    /// Exponential schedule: learning rate is multiplied by this over the run.
    lr_gamma: f64 = 0.1;
    /// One-cycle schedule: warm-up fraction and start/end divisors.
    onecycle_pct: f64 = 0.3;
    onecycle_div: f64 = 25.0;
    onecycle_final_div: f64 = 1e4;
    iters: usize = 2000;
    /// Held-out evaluation period in steps (0 disables periodic evaluation).
    eval_every: usize = 0;
    /// Samples per ray for full-image renders.
    render_samples: usize = 64;
}

impl RunConfig {
    /// Parses `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`",
                    n + 1
                )));
            };
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key with its current value, in declaration order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("declared key"));
        }
        s
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        Self::KEYS
            .iter()
            .map(|k| (k.to_string(), self.get(k).expect("declared key")))
            .collect()
    }

    /// Hex digest of the key names and value types.
    pub fn schema_hash() -> String {
        let digest = Sha256::digest(Self::schema().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Named bundles of defaults.
    ///
    /// * `indoor`: 128 rays per image, 128 samples per ray, 5-layer SDF,
    ///   3-layer color, width 128, 0.02 m grid.
    /// * `outdoor`: 512 rays per image, 96 samples per ray, 6-layer SDF,
    ///   4-layer color, width 32, 0.075 x 0.075 x 0.2 m grid.
    /// * `desk`: `indoor` shrunk to run in about a minute on one core.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let pairs: &[(&str, &str)] = match name {
            "indoor" => &[
                ("rays_per_image", "128"),
                ("samples_per_ray", "128"),
                ("lambda_c", "1.0"),
                ("lambda_d", "0.1"),
                ("sdf_layers", "5"),
                ("rgb_layers", "3"),
                ("hidden", "128"),
                ("grid_size", "0.02"),
            ],
            "outdoor" => &[
                ("rays_per_image", "512"),
                ("samples_per_ray", "96"),
                ("lambda_c", "1.0"),
                ("lambda_d", "0.1"),
                ("sdf_layers", "6"),
                ("rgb_layers", "4"),
                ("hidden", "32"),
                ("grid_size", "0.075,0.075,0.2"),
            ],
            "desk" => &[
                ("lambda_c", "1.0"),
                ("lambda_d", "0.1"),
                ("grid_size", "0.04"),
                ("pool_radius", "0.06"),
                ("encoder_hidden", "16"),
                ("encoder_out", "8"),
                ("volume_res", "16"),
                ("volume_channels", "8"),
                ("pe_bands", "4"),
                ("sdf_layers", "3"),
                ("rgb_layers", "2"),
                ("hidden", "32"),
                ("h_dim", "16"),
                ("frames_per_cloud", "4"),
                ("rays_per_image", "16"),
                ("samples_per_ray", "32"),
                ("render_samples", "48"),
                ("lr", "5e-3"),
                ("lr_gamma", "0.1"),
                ("weight_decay", "0.0"),
                ("mask_groups", "64"),
                ("mask_group_size", "64"),
                ("iters", "2000"),
            ],
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn grid_cell(&self) -> Result<[f64; 3]> {
        match self.grid_size.as_slice() {
            [g] => Ok([*g; 3]),
            [a, b, c] => Ok([*a, *b, *c]),
            _ => Err(Error::Config("grid_size takes one or three values".into())),
        }
    }

    /// Cross-key sanity checks.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.volume_res.is_empty() || self.volume_res.contains(&0) {
            return bad("volume_res needs at least one positive entry");
        }
        if self.rays_per_image == 0 || self.samples_per_ray < 2 || self.frames_per_cloud == 0 {
            return bad(
                "rays_per_image, frames_per_cloud must be positive and samples_per_ray >= 2",
            );
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if [self.lambda_c, self.lambda_d, self.lambda_sem]
            .iter()
            .any(|&l| l < 0.0)
        {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || !(0.0..=1.0).contains(&self.image_mask_ratio)
        {
            return bad("mask ratios must lie in [0, 1]");
        }
        if !(self.sdf_out_init >= 0.0 && self.sdf_out_init.is_finite()) {
            return bad("sdf_out_init must be finite and non-negative");
        }
        if self.semantic && self.sem_dim == 0 {
            return bad("sem_dim must be positive when semantic = true");
        }
        self.grid_cell()?;
        Ok(())
    }
}
