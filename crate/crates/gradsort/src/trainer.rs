//! Adam-based training loop: ramped regularization, periodic duplicate
//! checks once the ramp passes one half, and final hardening with a linear
//! assignment fallback.

use serde::{Deserialize, Serialize};

use crate::diffcore::Graph;
use crate::error::{Error, Result};
use crate::loss::{total_loss, GridShape, LossContext, LossWeights};
use crate::matrix::Matrix;
use crate::metrics::{quality, QualityReport};
use crate::permgen::{harden, resolve_duplicates, Generator, GeneratorKind, HardenOutcome, Permutation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub generator: GeneratorKind,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_s: f64,
    pub lambda_p: f64,
    pub p_exponent: f64,
    pub use_qap_neighbor: bool,
    pub duplicate_check_interval: usize,
    pub seed: u64,
    /// Record every k-th step in the loss trace (the first and last step are
    /// always recorded).
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            generator: GeneratorKind::full_rank_default(),
            max_steps: 10_000,
            learning_rate: 0.03,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_s: 100.0,
            lambda_p: 5.0,
            p_exponent: 16.0,
            use_qap_neighbor: false,
            duplicate_check_interval: 10,
            seed: 0,
            trace_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps < 1 {
            return Err(Error::Parameter("max_steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning_rate must be > 0".into()));
        }
        if self.duplicate_check_interval < 1 {
            return Err(Error::Parameter("duplicate_check_interval must be >= 1".into()));
        }
        if self.trace_every < 1 {
            return Err(Error::Parameter("trace_every must be >= 1".into()));
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_s: self.lambda_s,
            lambda_p: self.lambda_p,
            p_exponent: self.p_exponent,
            use_qap_neighbor: self.use_qap_neighbor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub alpha: f64,
    pub l_nbr: f64,
    pub l_s: f64,
    pub l_p: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub permutation: Permutation,
    pub converged_step: Option<usize>,
    pub resolved_by_lap: bool,
    pub loss_trace: Vec<TraceRecord>,
    pub final_quality: QualityReport,
    pub wall_time: f64,
    /// Noise-free soft assignment at the final weights.
    pub final_p_soft: Matrix,
    pub final_weights: Vec<Matrix>,
}

/// Linear ramp from 0 at t = 0 to 1 at t = T.
pub fn alpha_schedule(t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Parameter("schedule length must be >= 1".into()));
    }
    if t > total {
        return Err(Error::Parameter(format!("step {t} beyond schedule end {total}")));
    }
    Ok(t as f64 / total as f64)
}

/// First and second moment estimates for one weight matrix.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub m: Matrix,
    pub v: Matrix,
}

impl AdamMoments {
    pub fn zeros_like(w: &Matrix) -> Self {
        AdamMoments { m: Matrix::zeros(w.rows(), w.cols()), v: Matrix::zeros(w.rows(), w.cols()) }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    weights: &mut Matrix,
    grad: &Matrix,
    moments: &mut AdamMoments,
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if weights.shape() != grad.shape() {
        return Err(Error::Dimension("gradient shape mismatch".into()));
    }
    if t < 1 {
        return Err(Error::Parameter("Adam step index must be >= 1".into()));
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let (mw, mv) = (moments.m.as_mut_slice(), moments.v.as_mut_slice());
    for (((w, g), m), v) in weights
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(mw)
        .zip(mv)
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Runs the full training protocol and returns the hardened permutation
/// with its quality and trace.
pub fn train(x: &Matrix, grid: &GridShape, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let n = grid.n();
    if x.rows() != n {
        return Err(Error::Dimension(format!(
            "dataset has {} vectors but the grid has {n} cells",
            x.rows()
        )));
    }
    if x.cols() < 1 {
        return Err(Error::Degenerate("vectors must have at least one dimension".into()));
    }
    let start = std::time::Instant::now();
    let ctx = LossContext::new(x.clone())?;
    let weights_cfg = cfg.weights();
    let mut gen = Generator::new(cfg.generator.clone(), n, cfg.seed)?;
    let mut moments: Vec<AdamMoments> =
        gen.params.iter().map(AdamMoments::zeros_like).collect();

    let total_steps = cfg.max_steps;
    let mut trace = Vec::new();
    let mut last_good: Option<TraceRecord> = None;
    let mut converged_step = None;

    for t in 1..=total_steps {
        let alpha = alpha_schedule(t, total_steps)?;
        let mut g = Graph::new();
        let (param_nodes, p_soft) = gen.forward(&mut g, true)?;
        let (total, terms) = total_loss(&mut g, p_soft, &ctx, grid, &weights_cfg, alpha)?;
        if !terms.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {t} ({terms:?}); last good record: {last_good:?}"
            )));
        }
        g.backward(total)?;
        let record = TraceRecord {
            step: t,
            alpha,
            l_nbr: terms.l_nbr,
            l_s: terms.l_s,
            l_p: terms.l_p,
            total: terms.total,
        };
        if t == 1 || t == total_steps || t % cfg.trace_every == 0 {
            trace.push(record);
        }

        for (i, node) in param_nodes.iter().enumerate() {
            let (r, c) = gen.params[i].shape();
            let grad = match g.grad(*node) {
                Some(gr) => gr.clone(),
                None => Matrix::zeros(r, c),
            };
            if !grad.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at step {t} ({terms:?})"
                )));
            }
            adam_step(
                &mut gen.params[i],
                &grad,
                &mut moments[i],
                t,
                cfg.learning_rate,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )?;
        }
        last_good = Some(record);

        // Early P_soft is intentionally smooth; only check for a valid
        // argmax permutation once the ramp is at least half way.
        if alpha >= 0.5 && t % cfg.duplicate_check_interval == 0 {
            let mut gc = Graph::new();
            let (_, p_chk) = gen.forward(&mut gc, false)?;
            if let HardenOutcome::Perm(_) = harden(gc.value(p_chk))? {
                converged_step = Some(t);
                if trace.last().map(|r| r.step) != Some(t) {
                    trace.push(record);
                }
                break;
            }
        }
    }

    // Final hardening from the noise-free forward at the final weights.
    let mut gf = Graph::new();
    let (_, p_final) = gen.forward(&mut gf, false)?;
    let final_p_soft = gf.value(p_final).clone();
    let (permutation, resolved_by_lap) = match harden(&final_p_soft)? {
        HardenOutcome::Perm(p) => (p, false),
        HardenOutcome::Duplicates(_) => (resolve_duplicates(&final_p_soft)?, true),
    };

    let final_quality = quality(&permutation, x, grid, cfg.p_exponent)?;
    Ok(TrainResult {
        permutation,
        converged_step,
        resolved_by_lap,
        loss_trace: trace,
        final_quality,
        wall_time: start.elapsed().as_secs_f64(),
        final_p_soft,
        final_weights: gen.params,
    })
}
