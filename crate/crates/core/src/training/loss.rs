//! Per-ray L1 reconstruction loss over color, depth and semantic features.
//!
//! For the non-miss rays `r` of a batch:
//!
//! ```text
//! L = (1/|r|) sum_r [ lc * |C^ - C|_1 * gate(r) + ld * |D^ - D| * valid(r) + ls * |L^ - L|_1 * labeled(r) ]
//! ```
//!
//! `gate(r)` drops the color term when the rendered weight sum is below the
//! configured floor, `valid(r)` requires a finite positive depth target and
//! `labeled(r)` a non-void class.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, domain, Result};
use crate::renderer::{COL_DEPTH, COL_SEM, COL_WEIGHT};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_d: 0.1,
            lambda_sem: 0.01,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_c: f64, lambda_d: f64, lambda_sem: f64) -> Result<Self> {
        let w = Self {
            lambda_c,
            lambda_d,
            lambda_sem,
        };
        if [lambda_c, lambda_d, lambda_sem]
            .iter()
            .any(|l| !(*l >= 0.0 && l.is_finite()))
        {
            return Err(domain(format!(
                "loss weights must be finite and non-negative: {w:?}"
            )));
        }
        Ok(w)
    }
}

/// Supervision for one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayTarget {
    pub rgb: [f64; 3],
    /// Ray-parameter depth; `None` where the depth map has no valid value.
    pub depth: Option<f64>,
    /// Class embedding; `None` for void pixels or unlabeled data.
    pub semantic: Option<Vec<f64>>,
}

/// Rendered values of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayPrediction {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub weight_sum: f64,
    pub semantic: Vec<f64>,
    pub miss: bool,
}

/// Unweighted term means and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub semantic: f64,
    /// Rays counted in `|r|`.
    pub rays: usize,
}

fn depth_valid(d: Option<f64>) -> Option<f64> {
    d.filter(|v| v.is_finite() && *v > 0.0)
}

/// Reference evaluation of the loss on plain predictions.
pub fn loss(
    pred: &[RayPrediction],
    gt: &[RayTarget],
    w: &LossWeights,
    color_weight_floor: f64,
) -> Result<LossParts> {
    if pred.len() != gt.len() {
        return Err(contract(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let mut parts = LossParts::default();
    for (p, g) in pred.iter().zip(gt) {
        if p.miss {
            continue;
        }
        parts.rays += 1;
        if p.weight_sum >= color_weight_floor {
            parts.color += (0..3).map(|k| (p.rgb[k] - g.rgb[k]).abs()).sum::<f64>();
        }
        if let Some(d) = depth_valid(g.depth) {
            parts.depth += (p.depth - d).abs();
        }
        if let Some(l) = &g.semantic {
            if l.len() != p.semantic.len() {
                return Err(contract("semantic prediction and target widths differ"));
            }
            parts.semantic += l
                .iter()
                .zip(&p.semantic)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        }
    }
    if parts.rays == 0 {
        return Err(contract("loss over an empty batch"));
    }
    let n = parts.rays as f64;
    parts.color /= n;
    parts.depth /= n;
    parts.semantic /= n;
    parts.total =
        w.lambda_c * parts.color + w.lambda_d * parts.depth + w.lambda_sem * parts.semantic;
    Ok(parts)
}

/// Target and weight tensors that turn a weighted L1 over the composite
/// output (columns: color, depth, weight sum, semantics) into the loss.
/// Every row of `out` must be a non-miss ray.
pub fn l1_operands(
    out: &Tensor,
    gt: &[RayTarget],
    w: &LossWeights,
    color_weight_floor: f64,
) -> Result<(Tensor, Tensor, LossParts)> {
    if out.rows() != gt.len() {
        return Err(contract("composite rows and targets differ"));
    }
    if gt.is_empty() {
        return Err(contract("loss over an empty batch"));
    }
    let sem_dim = out.cols() - COL_SEM;
    let inv = 1.0 / gt.len() as f64;
    let mut target = Tensor::zeros(out.rows(), out.cols());
    let mut weight = Tensor::zeros(out.rows(), out.cols());
    let mut parts = LossParts {
        rays: gt.len(),
        ..Default::default()
    };
    for (r, g) in gt.iter().enumerate() {
        let o = out.row(r);
        let (t, wt) = (target.row_mut(r), weight.row_mut(r));
        t[..3].copy_from_slice(&g.rgb);
        if o[COL_WEIGHT] >= color_weight_floor {
            wt[..3].fill(w.lambda_c * inv);
            parts.color += (0..3).map(|k| (o[k] - g.rgb[k]).abs()).sum::<f64>();
        }
        if let Some(d) = depth_valid(g.depth) {
            t[COL_DEPTH] = d;
            wt[COL_DEPTH] = w.lambda_d * inv;
            parts.depth += (o[COL_DEPTH] - d).abs();
        }
        if let Some(l) = &g.semantic {
            if l.len() != sem_dim {
                return Err(contract("semantic target width differs from the head"));
            }
            t[COL_SEM..].copy_from_slice(l);
            wt[COL_SEM..].fill(w.lambda_sem * inv);
            parts.semantic += l
                .iter()
                .zip(&o[COL_SEM..])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        }
    }
    parts.color *= inv;
    parts.depth *= inv;
    parts.semantic *= inv;
    parts.total =
        w.lambda_c * parts.color + w.lambda_d * parts.depth + w.lambda_sem * parts.semantic;
    Ok((target, weight, parts))
}

/// Fixed random orthonormal vectors standing in for class-label features.
/// Class `c >= 1` maps to row `c - 1`; class 0 is void and has none.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    rows: Vec<Vec<f64>>,
}

impl ClassEmbedding {
    /// `dim` orthonormal vectors of width `dim` by Gram-Schmidt on Gaussian
    /// draws from the embedding stream.
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Embedding, 0);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while rows.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for u in &rows {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        Self { rows }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, class: u8) -> Result<Option<&[f64]>> {
        match class as usize {
            0 => Ok(None),
            c if c <= self.rows.len() => Ok(Some(&self.rows[c - 1])),
            c => Err(domain(format!(
                "class {c} exceeds the {}-wide embedding",
                self.rows.len()
            ))),
        }
    }
}
