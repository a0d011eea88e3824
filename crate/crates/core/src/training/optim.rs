//! AdamW with decoupled weight decay, and learning-rate schedules.

use crate::config::{RunConfig, ScheduleKind};
use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates taken so far.
    pub step: u64,
}

impl AdamW {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One update. Entries with `decay[k] == false` skip weight decay.
    ///
    /// `p <- p - lr * wd * p`, then the bias-corrected Adam step.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        decay: &[bool],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || decay.len() != n {
            return Err(contract(format!(
                "optimizer holds {n} slots; got {} params, {} grads, {} decay flags",
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for k in 0..n {
            if decay[k] {
                params[k] -= lr * weight_decay * params[k];
            }
            let g = grads[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// `lr0 * gamma^(t / total)`.
    Exponential { lr0: f64, gamma: f64, total: usize },
    /// Cosine warm-up from `max / div` to `max` over `pct * total` steps,
    /// then cosine annealing to `max / (div * final_div)`.
    OneCycle {
        max: f64,
        total: usize,
        pct: f64,
        div: f64,
        final_div: f64,
    },
}

impl Schedule {
    pub fn from_config(cfg: &RunConfig) -> Self {
        match cfg.schedule {
            ScheduleKind::Exponential => Schedule::Exponential {
                lr0: cfg.lr,
                gamma: cfg.lr_gamma,
                total: cfg.iters.max(1),
            },
            ScheduleKind::OneCycle => Schedule::OneCycle {
                max: cfg.lr,
                total: cfg.iters.max(1),
                pct: cfg.onecycle_pct,
                div: cfg.onecycle_div,
                final_div: cfg.onecycle_final_div,
            },
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        match *self {
            Schedule::Exponential { lr0, gamma, total } => {
                lr0 * gamma.powf(step as f64 / total as f64)
            }
            Schedule::OneCycle {
                max,
                total,
                pct,
                div,
                final_div,
            } => {
                let start = max / div;
                let end = start / final_div;
                let up = (pct * total as f64).max(1.0);
                let cos = |from: f64, to: f64, frac: f64| {
                    to + (from - to)
                        * 0.5
                        * (1.0 + (std::f64::consts::PI * frac.clamp(0.0, 1.0)).cos())
                };
                let s = step as f64;
                if s <= up {
                    cos(start, max, s / up)
                } else {
                    cos(max, end, (s - up) / (total as f64 - up).max(1.0))
                }
            }
        }
    }
}
