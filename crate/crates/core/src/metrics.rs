//! Depth losses and evaluation metrics.
//!
//! The scale-invariant log loss exists twice on purpose: a plain float
//! routine used for evaluation and as an oracle, and a tape-building
//! routine used where gradients are needed. A test pins them together to
//! 1e-12, so the differentiated path cannot drift from the reference.

use crate::flow::{backward_warp, FlowError, FlowField};
use crate::tensor::{NodeId, Scalar, Tape, Tensor, TensorError};

/// Multiplier applied outside the square root of the loss.
pub const SILOG_ALPHA: f64 = 10.0;
/// Weight on the squared-mean term inside the square root.
pub const SILOG_LAMBDA: f64 = 0.85;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("mask length {len} does not match {numel} elements")]
    MaskLength { len: usize, numel: usize },
    #[error("no valid pixels")]
    EmptyMask,
    #[error("no frames to evaluate")]
    NoFrames,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

fn check_pair<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: Option<&[bool]>,
) -> Result<(), MetricsError> {
    if pred.shape() != target.shape() {
        return Err(MetricsError::ShapeMismatch {
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if let Some(m) = mask {
        if m.len() != pred.numel() {
            return Err(MetricsError::MaskLength {
                len: m.len(),
                numel: pred.numel(),
            });
        }
    }
    Ok(())
}

/// Scale-invariant log loss over the masked pixels, computed in plain f64.
///
/// With log differences d_i = ln(max(pred_i, eps)) - ln(max(target_i, eps)):
/// loss = alpha * sqrt(mean(d^2) - lambda * mean(d)^2). The inner term is a
/// variance-like quantity and is clamped at zero before the root, so two
/// identical inputs give exactly 0.
pub fn silog<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: Option<&[bool]>,
    eps: f64,
) -> Result<f64, MetricsError> {
    check_pair(pred, target, mask)?;
    let mut n = 0usize;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for i in 0..pred.numel() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        let p = pred.data()[i].to_f64().max(eps);
        let t = target.data()[i].to_f64().max(eps);
        let d = p.ln() - t.ln();
        sum += d;
        sum_sq += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let mean = sum / n as f64;
    let mean_sq = sum_sq / n as f64;
    let inner = (mean_sq - SILOG_LAMBDA * mean * mean).max(0.0);
    Ok(SILOG_ALPHA * inner.sqrt())
}

/// Tape-building twin of [`silog`]; gradients flow through `pred` and
/// `target` alike. The mask enters as a constant 0/1 tensor.
pub fn silog_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    target: NodeId,
    mask: Option<&[bool]>,
    eps: f64,
) -> Result<NodeId, MetricsError> {
    let shape = tape.shape(pred).to_vec();
    if tape.shape(target) != shape.as_slice() {
        return Err(MetricsError::ShapeMismatch {
            lhs: shape,
            rhs: tape.shape(target).to_vec(),
        });
    }
    let numel: usize = shape.iter().product();
    let n = match mask {
        Some(m) => {
            if m.len() != numel {
                return Err(MetricsError::MaskLength { len: m.len(), numel });
            }
            m.iter().filter(|&&b| b).count()
        }
        None => numel,
    };
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let eps_t = T::from_f64(eps);
    let pc = tape.clamp_min(pred, eps_t)?;
    let tc = tape.clamp_min(target, eps_t)?;
    let lp = tape.log(pc)?;
    let lt = tape.log(tc)?;
    let mut d = tape.sub(lp, lt)?;
    if let Some(m) = mask {
        let m_t = Tensor::from_fn(&shape, |i| if m[i] { T::one() } else { T::zero() });
        let m_id = tape.constant(m_t);
        d = tape.mul(d, m_id)?;
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let d_sq = tape.square(d)?;
    let sum_sq = tape.sum_all(d_sq)?;
    let mean_sq = tape.scale(sum_sq, inv_n)?;
    let sum = tape.sum_all(d)?;
    let mean = tape.scale(sum, inv_n)?;
    let mean_scaled_sq = tape.square(mean)?;
    let penalty = tape.scale(mean_scaled_sq, T::from_f64(SILOG_LAMBDA))?;
    let inner = tape.sub(mean_sq, penalty)?;
    let inner_pos = tape.clamp_min(inner, T::zero())?;
    let root = tape.sqrt(inner_pos)?;
    Ok(tape.scale(root, T::from_f64(SILOG_ALPHA))?)
}

/// Standard per-image depth accuracy metrics over the masked pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Pixels that entered the averages.
    pub count: usize,
}

impl DepthMetrics {
    pub fn to_pairs(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("abs_rel", self.abs_rel),
            ("sq_rel", self.sq_rel),
            ("rmse", self.rmse),
            ("rmse_log", self.rmse_log),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
        ]
    }
}

/// Evaluates `pred` against `gt`. Pixels count when the mask admits them and
/// the ground truth is positive (and at most `cap` when given); predictions
/// are clipped to [eps, cap] first.
pub fn depth_metrics(
    pred: &Tensor<f64>,
    gt: &Tensor<f64>,
    mask: Option<&[bool]>,
    eps: f64,
    cap: Option<f64>,
) -> Result<DepthMetrics, MetricsError> {
    check_pair(pred, gt, mask)?;
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut se_log) = (0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    for i in 0..pred.numel() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        let g = gt.data()[i];
        if g <= 0.0 || cap.map(|c| g > c).unwrap_or(false) {
            continue;
        }
        let mut p = pred.data()[i].max(eps);
        if let Some(c) = cap {
            p = p.min(c);
        }
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        se += diff * diff;
        se_log += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        if ratio < 1.25 {
            d1 += 1;
        }
        if ratio < 1.25f64.powi(2) {
            d2 += 1;
        }
        if ratio < 1.25f64.powi(3) {
            d3 += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (se_log / nf).sqrt(),
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
        count: n,
    })
}

/// Flow-aligned consistency of a depth sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalConsistency {
    /// Mean over frames of mean |D_t - warp(D_{t-1})| / D_t.
    pub atc: f64,
    /// Mean over frames of the fraction of pixels whose depth ratio to the
    /// warped previous depth stays below the threshold.
    pub rtc: f64,
    /// Frames that contributed (had at least one valid pixel).
    pub frames: usize,
}

/// Warps each previous depth map onto the current frame with the backward
/// flow and measures agreement. `flows[t-1]` maps frame t to frame t-1;
/// `masks`, when given, supplies one extra per-pixel validity mask per
/// frame t >= 1, on top of the warp's own out-of-bounds mask.
pub fn temporal_consistency(
    depths: &[Tensor<f64>],
    flows: &[FlowField<f64>],
    masks: Option<&[Vec<bool>]>,
    thr: f64,
) -> Result<TemporalConsistency, MetricsError> {
    if depths.len() < 2 {
        return Err(MetricsError::NoFrames);
    }
    if flows.len() != depths.len() - 1 {
        return Err(MetricsError::ShapeMismatch {
            lhs: vec![flows.len()],
            rhs: vec![depths.len() - 1],
        });
    }
    if let Some(m) = masks {
        if m.len() != depths.len() - 1 {
            return Err(MetricsError::MaskLength {
                len: m.len(),
                numel: depths.len() - 1,
            });
        }
    }
    let mut atc_sum = 0.0;
    let mut rtc_sum = 0.0;
    let mut frames = 0usize;
    for t in 1..depths.len() {
        let (warped, warp_valid) = backward_warp(&depths[t - 1], &flows[t - 1])?;
        let cur = &depths[t];
        if cur.shape() != warped.shape() {
            return Err(MetricsError::ShapeMismatch {
                lhs: cur.shape().to_vec(),
                rhs: warped.shape().to_vec(),
            });
        }
        let mut n = 0usize;
        let mut atc = 0.0;
        let mut hits = 0usize;
        for i in 0..cur.numel() {
            if !warp_valid[i] {
                continue;
            }
            if let Some(m) = masks {
                if !m[t - 1][i] {
                    continue;
                }
            }
            let d = cur.data()[i];
            let w = warped.data()[i];
            if d <= 0.0 || w <= 0.0 {
                continue;
            }
            atc += (d - w).abs() / d;
            if (d / w).max(w / d) < thr {
                hits += 1;
            }
            n += 1;
        }
        if n == 0 {
            continue;
        }
        atc_sum += atc / n as f64;
        rtc_sum += hits as f64 / n as f64;
        frames += 1;
    }
    if frames == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(TemporalConsistency {
        atc: atc_sum / frames as f64,
        rtc: rtc_sum / frames as f64,
        frames,
    })
}

/// Stable `key = value` block with six decimals, for reports and goldens.
pub fn format_pairs(pairs: &[(&str, f64)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v:.6}\n"));
    }
    out
}
