//! Reference point encoder: a pointwise MLP followed by a radius mean.
//!
//! Output row `i` is `(m_i + mean_{j in N(i)} m_j) / 2`, where `m` is the
//! pointwise MLP output and `N(i)` holds every point within the pooling
//! radius of point `i` (itself included). With radius 0 the neighborhood is
//! the point alone and the output is exactly `m_i`. Coordinates are not an
//! MLP input, so the output is invariant to translating the cloud.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{domain, Result};
use crate::fields::HIDDEN_BETA;
use crate::nn::{Activation, Mlp};
use crate::pointcloud::PointCloud;
use crate::sparse::SparseMix;
use crate::tensor::Tensor;

/// Per-point output features at (unchanged) input coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatures {
    pub coords: Vec<[f64; 3]>,
    /// `m x ch_out`.
    pub feats: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub mlp: Mlp,
    /// Pooling radius in meters.
    pub radius: f64,
}

impl EncoderParams {
    /// `sizes = [ch_in, hidden..., ch_out]`; softplus hidden layers, linear
    /// output.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], radius: f64, rng: &mut R) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(domain(format!(
                "pooling radius must be non-negative, got {radius}"
            )));
        }
        let mlp = Mlp::init(
            sizes,
            Activation::Softplus { beta: HIDDEN_BETA },
            Activation::Linear,
            rng,
        )?;
        Ok(Self { mlp, radius })
    }

    pub fn ch_in(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn ch_out(&self) -> usize {
        self.mlp.out_dim()
    }
}

/// The radius-mean operator as a sparse `n x n` mix (including the
/// pointwise half). Neighbors are gathered from a hash grid with cell size
/// equal to the radius and listed in ascending index order.
pub fn neighbor_mix(coords: &[[f64; 3]], radius: f64) -> Arc<SparseMix> {
    let n = coords.len();
    let mut b = SparseMix::builder(n);
    if radius <= 0.0 {
        for i in 0..n {
            b.push(i, 1.0);
            b.end_row();
        }
        return Arc::new(b.build());
    }
    let cell = |p: &[f64; 3]| p.map(|v| (v / radius).floor() as i64);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in coords.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let r2 = radius * radius;
    let mut nbrs = Vec::new();
    for (i, p) in coords.iter().enumerate() {
        nbrs.clear();
        let c = cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        for &j in list {
                            let q = &coords[j];
                            let d2 = (p[0] - q[0]).powi(2)
                                + (p[1] - q[1]).powi(2)
                                + (p[2] - q[2]).powi(2);
                            if d2 <= r2 {
                                nbrs.push(j);
                            }
                        }
                    }
                }
            }
        }
        nbrs.sort_unstable();
        let k = 0.5 / nbrs.len() as f64;
        b.push(i, 0.5);
        for &j in &nbrs {
            b.push(j, k);
        }
        b.end_row();
    }
    Arc::new(b.build())
}

/// Point features as a tensor, checked against the encoder's input width.
pub fn input_tensor(pc: &PointCloud, params: &EncoderParams) -> Result<Tensor> {
    if pc.channels() != params.ch_in() {
        return Err(domain(format!(
            "encoder expects {} feature channels, cloud has {}",
            params.ch_in(),
            pc.channels()
        )));
    }
    Tensor::from_vec(pc.len(), pc.channels(), pc.feats().to_vec())
}

pub fn encode(pc: &PointCloud, params: &EncoderParams) -> Result<SparseFeatures> {
    let x = input_tensor(pc, params)?;
    let mut m = Tensor::zeros(pc.len(), params.ch_out());
    for i in 0..pc.len() {
        m.row_mut(i).copy_from_slice(&params.mlp.forward(x.row(i))?);
    }
    let feats = neighbor_mix(pc.coords(), params.radius).apply(&m)?;
    Ok(SparseFeatures {
        coords: pc.coords().to_vec(),
        feats,
    })
}
