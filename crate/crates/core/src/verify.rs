//! Self-auditing suites: brute-force reference recomputations of every
//! numeric building block, and finite-difference checks of every gradient
//! the tape can produce.
//!
//! The reference implementations in this module are written from the
//! mathematical definitions with plain nested loops. They share no code
//! with the tape kernels, so agreement between the two paths is evidence
//! of correctness rather than a tautology. The gradient checks nudge one
//! input coordinate at a time and compare central differences against the
//! analytic backward pass.
//!
//! Both suites return a list of [`CheckOutcome`] values so callers (the
//! CLI self-test and the integration tests) can render one line per check.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::flow::{backward_warp, FlowDirection, FlowField, FlowError};
use crate::metrics::{self, MetricsError};
use crate::model::{
    full_forward, fuse_cross_attention, memory_self_attention, pos_encode, ArchConfig,
    ForwardSwitches, ModelError, ModelParams,
};
use crate::tensor::{finite_diff_check_multi, NodeId, Tape, Tensor, TensorError};

/// Absolute tolerance for implementation-vs-reference comparisons.
pub const ORACLE_TOL: f64 = 1e-12;
/// Step size for finite differences.
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Relative tolerance for analytic-vs-numeric gradient agreement.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("{0}")]
    Check(String),
}

/// Result of one named check, ready to print.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        let tag = if self.ok { "PASS" } else { "FAIL" };
        format!("[{tag}] {}: {}", self.name, self.detail)
    }
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    !outcomes.is_empty() && outcomes.iter().all(|o| o.ok)
}

/// One line per outcome plus a tally, under a heading.
pub fn render_report(title: &str, outcomes: &[CheckOutcome]) -> String {
    let mut s = format!("== {title} ==\n");
    for o in outcomes {
        s.push_str(&o.line());
        s.push('\n');
    }
    let pass = outcomes.iter().filter(|o| o.ok).count();
    s.push_str(&format!("{pass}/{} checks passed\n", outcomes.len()));
    s
}

// ---------------------------------------------------------------------------
// randomness helpers
// ---------------------------------------------------------------------------

fn rng_for(base: u64, tag: &str, k: u64) -> ChaCha20Rng {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k.wrapping_add(1));
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    ChaCha20Rng::seed_from_u64(h)
}

fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

fn rand_mask(rng: &mut ChaCha20Rng, n: usize, keep: f64) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(keep)).collect();
    if !m.iter().any(|&b| b) {
        m[0] = true;
    }
    m
}

// ---------------------------------------------------------------------------
// reference implementations (plain loops, no tape)
// ---------------------------------------------------------------------------

/// Direct convolution from the definition; zero padding, floor output size.
#[allow(clippy::too_many_arguments)]
fn ref_conv2d(
    x: &[f64],
    wt: &[f64],
    bias: Option<&[f64]>,
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    ker: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - ker) / stride + 1;
    let wo = (w + 2 * pad - ker) / stride + 1;
    let mut out = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map(|bv| bv[o]).unwrap_or(0.0);
                    for i in 0..ci {
                        for ky in 0..ker {
                            for kx in 0..ker {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((n * ci + i) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((o * ci + i) * ker + ky) * ker + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

/// Bilinear backward warp from the formula: sample src at (x + u, y + v)
/// with border-clamped corner indices; valid when the point is in bounds.
fn ref_bilinear_warp(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    u: &[f64],
    v: &[f64],
) -> (Vec<f64>, Vec<bool>) {
    let mut out = vec![0.0; c * h * w];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + u[i];
            let sy = y as f64 + v[i];
            valid[i] = sx >= 0.0 && sx <= (w - 1) as f64 && sy >= 0.0 && sy <= (h - 1) as f64;
            let fx = sx.floor();
            let fy = sy.floor();
            let ax = sx - fx;
            let ay = sy - fy;
            let x0 = (fx as isize).clamp(0, w as isize - 1) as usize;
            let x1 = (fx as isize + 1).clamp(0, w as isize - 1) as usize;
            let y0 = (fy as isize).clamp(0, h as isize - 1) as usize;
            let y1 = (fy as isize + 1).clamp(0, h as isize - 1) as usize;
            for ch in 0..c {
                let p = ch * h * w;
                let top = src[p + y0 * w + x0] * (1.0 - ax) + src[p + y0 * w + x1] * ax;
                let bot = src[p + y1 * w + x0] * (1.0 - ax) + src[p + y1 * w + x1] * ax;
                out[p + i] = top * (1.0 - ay) + bot * ay;
            }
        }
    }
    (out, valid)
}

fn ref_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
fn ref_softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Flattens [b, c, h, w] to a row-major [b*h*w, c] sequence where the row
/// index runs batch-major over (y, x) and the column is the channel.
fn ref_to_sequence(x: &Tensor<f64>) -> (usize, Vec<f64>) {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let rows = b * h * w;
    let mut out = vec![0.0; rows * c];
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let row = (n * h + y) * w + x_;
                    out[row * c + ch] = x.data()[((n * c + ch) * h + y) * w + x_];
                }
            }
        }
    }
    (rows, out)
}

/// Multi-head scaled dot-product attention from the definition.
#[allow(clippy::too_many_arguments)]
fn ref_attention(
    q_in: &[f64],
    k_in: &[f64],
    v_in: &[f64],
    n: usize,
    m: usize,
    c: usize,
    heads: usize,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
) -> Vec<f64> {
    let dh = c / heads;
    let q = ref_matmul(q_in, wq, n, c, c);
    let k = ref_matmul(k_in, wk, m, c, c);
    let v = ref_matmul(v_in, wv, m, c, c);
    let mut joined = vec![0.0; n * c];
    for hix in 0..heads {
        let off = hix * dh;
        let mut logits = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += q[i * c + off + t] * k[j * c + off + t];
                }
                logits[i * m + j] = acc / (dh as f64).sqrt();
            }
        }
        ref_softmax_rows(&mut logits, n, m);
        for i in 0..n {
            for t in 0..dh {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += logits[i * m + j] * v[j * c + off + t];
                }
                joined[i * c + off + t] = acc;
            }
        }
    }
    ref_matmul(&joined, wo, n, c, c)
}

fn ref_silog(pred: &[f64], target: &[f64], mask: Option<&[bool]>, eps: f64) -> f64 {
    let mut n = 0usize;
    let (mut s, mut s2) = (0.0, 0.0);
    for i in 0..pred.len() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        let d = pred[i].max(eps).ln() - target[i].max(eps).ln();
        s += d;
        s2 += d * d;
        n += 1;
    }
    let mean = s / n as f64;
    10.0 * (s2 / n as f64 - 0.85 * mean * mean).max(0.0).sqrt()
}

struct RefDepthMetrics {
    vals: [f64; 7],
    count: usize,
}

fn ref_depth_metrics(
    pred: &[f64],
    gt: &[f64],
    mask: Option<&[bool]>,
    eps: f64,
    cap: Option<f64>,
) -> RefDepthMetrics {
    let mut n = 0usize;
    let (mut ar, mut sr, mut se, mut sl) = (0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        let g = gt[i];
        if g <= 0.0 || cap.map(|c| g > c).unwrap_or(false) {
            continue;
        }
        let mut p = pred[i].max(eps);
        if let Some(c) = cap {
            p = p.min(c);
        }
        ar += (p - g).abs() / g;
        sr += (p - g) * (p - g) / g;
        se += (p - g) * (p - g);
        sl += (p.ln() - g.ln()).powi(2);
        let r = (p / g).max(g / p);
        if r < 1.25 {
            d1 += 1.0;
        }
        if r < 1.25 * 1.25 {
            d2 += 1.0;
        }
        if r < 1.25 * 1.25 * 1.25 {
            d3 += 1.0;
        }
        n += 1;
    }
    let nf = n as f64;
    RefDepthMetrics {
        vals: [
            ar / nf,
            sr / nf,
            (se / nf).sqrt(),
            (sl / nf).sqrt(),
            d1 / nf,
            d2 / nf,
            d3 / nf,
        ],
        count: n,
    }
}

/// Temporal consistency from the definition: warp the previous depth onto
/// the current frame with this module's own bilinear warp, then average the
/// per-frame relative error and threshold hit rate over contributing frames.
fn ref_temporal_consistency(
    depths: &[Tensor<f64>],
    flows_uv: &[(Vec<f64>, Vec<f64>)],
    masks: Option<&[Vec<bool>]>,
    thr: f64,
) -> (f64, f64, usize) {
    let (mut atc_sum, mut rtc_sum, mut frames) = (0.0, 0.0, 0usize);
    for t in 1..depths.len() {
        let s = depths[t - 1].shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (u, v) = &flows_uv[t - 1];
        let (warped, valid) = ref_bilinear_warp(depths[t - 1].data(), c, h, w, u, v);
        let cur = depths[t].data();
        let (mut n, mut atc, mut hits) = (0usize, 0.0, 0usize);
        for i in 0..cur.len() {
            if !valid[i] {
                continue;
            }
            if let Some(m) = masks {
                if !m[t - 1][i] {
                    continue;
                }
            }
            let (d, wv) = (cur[i], warped[i]);
            if d <= 0.0 || wv <= 0.0 {
                continue;
            }
            atc += (d - wv).abs() / d;
            if (d / wv).max(wv / d) < thr {
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
    (atc_sum / frames as f64, rtc_sum / frames as f64, frames)
}

// ---------------------------------------------------------------------------
// implementation-vs-reference suite
// ---------------------------------------------------------------------------

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn outcome_from(name: &str, r: Result<String, VerifyError>) -> CheckOutcome {
    match r {
        Ok(detail) => CheckOutcome {
            name: name.to_string(),
            ok: true,
            detail,
        },
        Err(e) => CheckOutcome {
            name: name.to_string(),
            ok: false,
            detail: e.to_string(),
        },
    }
}

fn expect_close(name: &str, diff: f64) -> Result<(), VerifyError> {
    if !diff.is_finite() || diff > ORACLE_TOL {
        return Err(VerifyError::Check(format!(
            "{name}: max abs diff {diff:.3e} exceeds {ORACLE_TOL:.0e}"
        )));
    }
    Ok(())
}

fn check_conv2d(base: u64, instances: usize) -> Result<String, VerifyError> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = rng_for(base, "conv2d", k as u64);
        let b = rng.gen_range(1..=2usize);
        let ci = rng.gen_range(1..=3usize);
        let co = rng.gen_range(1..=3usize);
        let h = rng.gen_range(8..=16usize);
        let w = rng.gen_range(8..=16usize);
        let ker = if rng.gen_bool(0.5) { 1 } else { 3 };
        let stride = rng.gen_range(1..=2usize);
        let pad = rng.gen_range(0..=1usize);
        let with_bias = k % 2 == 0;
        let x = rand_tensor(&mut rng, &[b, ci, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[co, ci, ker, ker], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[co], -1.0, 1.0);

        let mut tape: Tape<f64> = Tape::new();
        let xid = tape.constant(x.clone());
        let wid = tape.constant(wt.clone());
        let bid = with_bias.then(|| tape.constant(bias.clone()));
        let out = tape.conv2d(xid, wid, bid, stride, pad)?;
        let got = tape.value(out);

        let (want, ho, wo) = ref_conv2d(
            x.data(),
            wt.data(),
            with_bias.then_some(bias.data()),
            b,
            ci,
            h,
            w,
            co,
            ker,
            stride,
            pad,
        );
        if got.shape() != [b, co, ho, wo] {
            return Err(VerifyError::Check(format!(
                "conv2d shape {:?} != reference [{b}, {co}, {ho}, {wo}]",
                got.shape()
            )));
        }
        let diff = max_abs_diff(got.data(), &want);
        expect_close("conv2d", diff)?;
        worst = worst.max(diff);
    }
    Ok(format!("{instances} instances, max abs diff {worst:.2e}"))
}

fn check_bilinear_warp(base: u64, instances: usize) -> Result<String, VerifyError> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = rng_for(base, "warp", k as u64);
        let c = rng.gen_range(1..=3usize);
        let h = rng.gen_range(8..=16usize);
        let w = rng.gen_range(8..=16usize);
        let src = rand_tensor(&mut rng, &[c, h, w], -2.0, 2.0);
        let mut u: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut v: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
        // push a few samples far out of bounds to exercise the validity mask
        for _ in 0..4 {
            let i = rng.gen_range(0..h * w);
            u[i] = rng.gen_range(20.0..40.0);
            v[i] = rng.gen_range(-40.0..-20.0);
        }
        let field = FlowField::new(w, h, u.clone(), v.clone(), FlowDirection::Backward)?;
        let (got, got_valid) = backward_warp(&src, &field)?;
        let (want, want_valid) = ref_bilinear_warp(src.data(), c, h, w, &u, &v);
        if got_valid != want_valid {
            return Err(VerifyError::Check(
                "bilinear warp: validity masks disagree".to_string(),
            ));
        }
        let diff = max_abs_diff(got.data(), &want);
        expect_close("bilinear warp", diff)?;
        worst = worst.max(diff);
    }
    Ok(format!(
        "{instances} instances incl. out-of-bounds, max abs diff {worst:.2e}"
    ))
}

fn small_arch(c: usize, heads: usize, l: usize) -> ArchConfig {
    ArchConfig {
        token_channels: c,
        stride_product: 4,
        heads,
        decoder_scales: 2,
        max_depth: 20.0,
        depth_eps: 1e-6,
        memory_length: l,
        memory_lr: 0.05,
    }
}

fn check_self_attention(base: u64, instances: usize) -> Result<String, VerifyError> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = rng_for(base, "self_attn", k as u64);
        let c = if rng.gen_bool(0.5) { 4 } else { 8 };
        let heads = if rng.gen_bool(0.5) { 2 } else { 4 };
        let l = rng.gen_range(2..=3usize);
        let hp = rng.gen_range(2..=3usize);
        let wp = rng.gen_range(2..=3usize);
        let arch = small_arch(c, heads, l);
        let params: ModelParams<f64> = ModelParams::init(arch.clone(), 1000 + k as u64)?;
        let vis = rand_tensor(&mut rng, &[l, c, hp, wp], -1.0, 1.0);
        let pos = rand_tensor(&mut rng, &[l, c, hp, wp], -1.0, 1.0);

        let mut tape: Tape<f64> = Tape::new();
        let mounted = params.mount(&mut tape, false);
        let vid = tape.constant(vis.clone());
        let pid = tape.constant(pos.clone());
        let seq = memory_self_attention(&mut tape, &mounted, &arch, vid, pid)?;
        let got = tape.value(seq);

        let (rows, vis_seq) = ref_to_sequence(&vis);
        let (_, pos_seq) = ref_to_sequence(&pos);
        let qk: Vec<f64> = vis_seq.iter().zip(&pos_seq).map(|(a, b)| a + b).collect();
        let grab = |name: &str| params.get(name).expect("attention weights exist").data();
        let want = ref_attention(
            &qk,
            &qk,
            &vis_seq,
            rows,
            rows,
            c,
            heads,
            grab("attn.self.wq"),
            grab("attn.self.wk"),
            grab("attn.self.wv"),
            grab("attn.self.wo"),
        );
        if got.shape() != [rows, c] {
            return Err(VerifyError::Check(format!(
                "self-attention shape {:?} != reference [{rows}, {c}]",
                got.shape()
            )));
        }
        let diff = max_abs_diff(got.data(), &want);
        expect_close("self-attention", diff)?;
        worst = worst.max(diff);
    }
    Ok(format!("{instances} instances, max abs diff {worst:.2e}"))
}

fn check_cross_attention(base: u64, instances: usize) -> Result<String, VerifyError> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = rng_for(base, "cross_attn", k as u64);
        let c = if rng.gen_bool(0.5) { 4 } else { 8 };
        let heads = 2;
        let hp = rng.gen_range(2..=4usize);
        let wp = rng.gen_range(2..=4usize);
        let m = rng.gen_range(4..=12usize);
        let arch = small_arch(c, heads, 2);
        let params: ModelParams<f64> = ModelParams::init(arch.clone(), 2000 + k as u64)?;
        let features = rand_tensor(&mut rng, &[1, c, hp, wp], -1.0, 1.0);
        let mem = rand_tensor(&mut rng, &[m, c], -1.0, 1.0);

        let mut tape: Tape<f64> = Tape::new();
        let mounted = params.mount(&mut tape, false);
        let fid = tape.constant(features.clone());
        let mid = tape.constant(mem.clone());
        let fused = fuse_cross_attention(&mut tape, &mounted, &arch, fid, mid)?;
        let got = tape.value(fused);

        let (rows, fq) = ref_to_sequence(&features);
        let grab = |name: &str| params.get(name).expect("attention weights exist").data();
        let att = ref_attention(
            &fq,
            mem.data(),
            mem.data(),
            rows,
            m,
            c,
            heads,
            grab("attn.cross.wq"),
            grab("attn.cross.wk"),
            grab("attn.cross.wv"),
            grab("attn.cross.wo"),
        );
        // residual, then back to the [1, c, h', w'] map layout
        let mut want = vec![0.0; c * hp * wp];
        for y in 0..hp {
            for x in 0..wp {
                let row = y * wp + x;
                for ch in 0..c {
                    want[(ch * hp + y) * wp + x] = fq[row * c + ch] + att[row * c + ch];
                }
            }
        }
        if got.shape() != [1, c, hp, wp] {
            return Err(VerifyError::Check(format!(
                "cross-attention shape {:?} != reference [1, {c}, {hp}, {wp}]",
                got.shape()
            )));
        }
        let diff = max_abs_diff(got.data(), &want);
        expect_close("cross-attention", diff)?;
        worst = worst.max(diff);
    }
    Ok(format!("{instances} instances, max abs diff {worst:.2e}"))
}

fn check_depth_metrics(base: u64, instances: usize) -> Result<String, VerifyError> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = rng_for(base, "metrics", k as u64);
        let h = rng.gen_range(8..=16usize);
        let w = rng.gen_range(8..=16usize);
        let pred = rand_tensor(&mut rng, &[h, w], 0.2, 10.0);
        let mut gt = rand_tensor(&mut rng, &[h, w], 0.2, 10.0);
        // a few zero-truth pixels that every metric must skip
        for _ in 0..3 {
            let i = rng.gen_range(0..h * w);
            gt.data_mut()[i] = 0.0;
        }
        let mask = rand_mask(&mut rng, h * w, 0.85);
        let cap = if k % 2 == 0 { Some(5.0) } else { None };
        let got = metrics::depth_metrics(&pred, &gt, Some(&mask), 1e-6, cap)?;
        let want = ref_depth_metrics(pred.data(), gt.data(), Some(&mask), 1e-6, cap);
        if got.count != want.count {
            return Err(VerifyError::Check(format!(
                "depth metrics count {} != reference {}",
                got.count, want.count
            )));
        }
        let got_vals = [
            got.abs_rel,
            got.sq_rel,
            got.rmse,
            got.rmse_log,
            got.delta1,
            got.delta2,
            got.delta3,
        ];
        let diff = max_abs_diff(&got_vals, &want.vals);
        expect_close("depth metrics", diff)?;
        worst = worst.max(diff);
    }
    Ok(format!(
        "{instances} instances x 7 metrics, max abs diff {worst:.2e}"
    ))
}

fn check_silog(base: u64, instances: usize) -> Result<String, VerifyError> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = rng_for(base, "silog", k as u64);
        let h = rng.gen_range(8..=16usize);
        let w = rng.gen_range(8..=16usize);
        let pred = rand_tensor(&mut rng, &[h, w], 0.2, 8.0);
        let gt = rand_tensor(&mut rng, &[h, w], 0.2, 8.0);
        let mask = rand_mask(&mut rng, h * w, 0.8);
        let want = ref_silog(pred.data(), gt.data(), Some(&mask), 1e-6);

        let direct = metrics::silog(&pred, &gt, Some(&mask), 1e-6)?;
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(pred.clone());
        let t = tape.constant(gt.clone());
        let node = metrics::silog_on_tape(&mut tape, p, t, Some(&mask), 1e-6)?;
        let on_tape = tape.value(node).data()[0];

        let diff = (direct - want).abs().max((on_tape - want).abs());
        expect_close("silog", diff)?;
        worst = worst.max(diff);
    }
    Ok(format!(
        "{instances} instances, direct and tape paths, max abs diff {worst:.2e}"
    ))
}

fn check_temporal_consistency(base: u64, instances: usize) -> Result<String, VerifyError> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = rng_for(base, "tc", k as u64);
        let frames = rng.gen_range(3..=5usize);
        let h = rng.gen_range(8..=16usize);
        let w = rng.gen_range(8..=16usize);
        let depths: Vec<Tensor<f64>> = (0..frames)
            .map(|_| rand_tensor(&mut rng, &[1, h, w], 0.5, 8.0))
            .collect();
        let mut fields = Vec::new();
        let mut uv = Vec::new();
        for _ in 1..frames {
            let u: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
            fields.push(FlowField::new(
                w,
                h,
                u.clone(),
                v.clone(),
                FlowDirection::Backward,
            )?);
            uv.push((u, v));
        }
        let masks: Vec<Vec<bool>> = (1..frames)
            .map(|_| rand_mask(&mut rng, h * w, 0.9))
            .collect();
        let got = metrics::temporal_consistency(&depths, &fields, Some(&masks), 1.25)?;
        let (atc, rtc, fr) = ref_temporal_consistency(&depths, &uv, Some(&masks), 1.25);
        if got.frames != fr {
            return Err(VerifyError::Check(format!(
                "temporal consistency frames {} != reference {fr}",
                got.frames
            )));
        }
        let diff = (got.atc - atc).abs().max((got.rtc - rtc).abs());
        expect_close("temporal consistency", diff)?;
        worst = worst.max(diff);
    }
    Ok(format!("{instances} instances, max abs diff {worst:.2e}"))
}

/// Compares every numeric building block against an independently written
/// reference implementation on randomized instances.
pub fn run_oracle_suite(base_seed: u64) -> Vec<CheckOutcome> {
    vec![
        outcome_from("conv2d vs reference", check_conv2d(base_seed, 10)),
        outcome_from("bilinear warp vs reference", check_bilinear_warp(base_seed, 10)),
        outcome_from(
            "memory self-attention vs reference",
            check_self_attention(base_seed, 8),
        ),
        outcome_from(
            "cross-attention fusion vs reference",
            check_cross_attention(base_seed, 8),
        ),
        outcome_from("depth metrics vs reference", check_depth_metrics(base_seed, 10)),
        outcome_from("silog vs reference", check_silog(base_seed, 10)),
        outcome_from(
            "temporal consistency vs reference",
            check_temporal_consistency(base_seed, 8),
        ),
    ]
}

// ---------------------------------------------------------------------------
// gradient-check suite
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Sample {
    /// Uniform in [-1, 1].
    Centered,
    /// Uniform in [0.5, 2]; for inputs feeding log, sqrt or division.
    Positive,
}

type BuildFn = dyn Fn(&mut Tape<f64>, &[NodeId], u64) -> crate::tensor::Result<NodeId>;

struct GradCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    sample: Sample,
    build: Box<BuildFn>,
}

fn tensor_err(e: impl std::fmt::Display) -> TensorError {
    TensorError::InvalidArgument {
        op: "verify",
        msg: e.to_string(),
    }
}

/// Reduces a tensor to a scalar with fixed non-uniform weights so that
/// every output coordinate influences the checked gradient differently.
fn weighted_sum(tape: &mut Tape<f64>, x: NodeId) -> crate::tensor::Result<NodeId> {
    let shape = tape.shape(x).to_vec();
    let w = Tensor::from_fn(&shape, |i| {
        ((i.wrapping_mul(2654435761) % 97) as f64) * 0.04 - 1.9
    });
    let wid = tape.constant(w);
    let p = tape.mul(x, wid)?;
    tape.sum_all(p)
}

fn sample_inputs(case: &GradCase, base: u64, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = rng_for(base, case.name, seed);
    let (lo, hi) = match case.sample {
        Sample::Centered => (-1.0, 1.0),
        Sample::Positive => (0.5, 2.0),
    };
    case.shapes
        .iter()
        .map(|s| rand_tensor(&mut rng, s, lo, hi))
        .collect()
}

fn run_grad_case(
    case: &GradCase,
    base_seed: u64,
    seeds: usize,
    coords: usize,
) -> Result<String, VerifyError> {
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    let mut kinks = 0usize;
    for s in 0..seeds {
        let inputs = sample_inputs(case, base_seed, s as u64);

        let mut tape: Tape<f64> = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = (case.build)(&mut tape, &ids, s as u64)?;
        if tape.value(root).numel() != 1 {
            return Err(VerifyError::Check(format!(
                "{}: check target is not scalar",
                case.name
            )));
        }
        let grads = tape.backward(root)?;
        let analytic: Vec<Tensor<f64>> = ids
            .iter()
            .zip(&inputs)
            .map(|(id, x)| {
                grads
                    .get(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(x.shape()))
            })
            .collect();

        let build = &case.build;
        let seed_tag = s as u64;
        let f = |xs: &[Tensor<f64>]| -> crate::tensor::Result<f64> {
            let mut tape: Tape<f64> = Tape::new();
            let ids: Vec<NodeId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            let root = build(&mut tape, &ids, seed_tag)?;
            Ok(tape.value(root).data()[0])
        };
        let report = finite_diff_check_multi(
            f,
            &inputs,
            &analytic,
            GRADCHECK_EPS,
            GRADCHECK_TOL,
            Some(coords),
        )?;
        if !report.ok() {
            return Err(VerifyError::Check(format!(
                "{} seed {s}: {}",
                case.name,
                report.summary()
            )));
        }
        max_err = max_err.max(report.max_rel_err);
        checked += report.checked;
        kinks += report.failures.iter().filter(|d| d.kink).count();
    }
    let kink_note = if kinks > 0 {
        format!(", {kinks} kink coords skipped")
    } else {
        String::new()
    };
    Ok(format!(
        "{seeds} seeds, {checked} coords, max rel err {max_err:.2e}{kink_note}"
    ))
}

fn simple_cases() -> Vec<GradCase> {
    let mut cases: Vec<GradCase> = Vec::new();
    let mut push = |name: &'static str,
                    shapes: Vec<Vec<usize>>,
                    sample: Sample,
                    build: Box<BuildFn>| {
        cases.push(GradCase {
            name,
            shapes,
            sample,
            build,
        });
    };

    push(
        "add",
        vec![vec![2, 3], vec![2, 3]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.add(x[0], x[1])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "add broadcast",
        vec![vec![2, 3], vec![1, 3]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.add(x[0], x[1])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "sub",
        vec![vec![2, 3], vec![2, 3]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.sub(x[0], x[1])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "mul",
        vec![vec![2, 3], vec![2, 3]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.mul(x[0], x[1])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "div",
        vec![vec![2, 3], vec![2, 3]],
        Sample::Positive,
        Box::new(|t, x, _| {
            let y = t.div(x[0], x[1])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "neg",
        vec![vec![3, 4]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.neg(x[0])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "exp",
        vec![vec![3, 4]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.exp(x[0])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "log",
        vec![vec![3, 4]],
        Sample::Positive,
        Box::new(|t, x, _| {
            let y = t.log(x[0])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "sqrt",
        vec![vec![3, 4]],
        Sample::Positive,
        Box::new(|t, x, _| {
            let y = t.sqrt(x[0])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "square",
        vec![vec![3, 4]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.square(x[0])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "abs",
        vec![vec![3, 4]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.abs(x[0])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "sigmoid",
        vec![vec![3, 4]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.sigmoid(x[0])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "relu",
        vec![vec![3, 4]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.relu(x[0])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "scale",
        vec![vec![3, 4]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.scale(x[0], 0.7)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "add_scalar",
        vec![vec![3, 4]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.add_scalar(x[0], -0.3)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "clamp_min",
        vec![vec![3, 4]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.clamp_min(x[0], 0.1)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "matmul",
        vec![vec![3, 4], vec![4, 2]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.matmul(x[0], x[1])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "conv2d stride 1 pad 1",
        vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.conv2d(x[0], x[1], Some(x[2]), 1, 1)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "conv2d stride 2 pad 0",
        vec![vec![1, 2, 6, 6], vec![2, 2, 3, 3]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.conv2d(x[0], x[1], None, 2, 0)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "upsample nearest",
        vec![vec![1, 2, 3, 3]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.upsample_nearest2(x[0])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "avg pool",
        vec![vec![1, 2, 6, 6]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.avg_pool2d(x[0], 2)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "concat and slice",
        vec![vec![2, 3], vec![2, 2]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.concat(&[x[0], x[1]], 1)?;
            let z = t.slice(y, 1, 1, 3)?;
            weighted_sum(t, z)
        }),
    );
    push(
        "reshape and permute",
        vec![vec![2, 3, 4]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.permute(x[0], &[2, 0, 1])?;
            let z = t.reshape(y, &[4, 6])?;
            weighted_sum(t, z)
        }),
    );
    push(
        "softmax",
        vec![vec![3, 5]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let y = t.softmax(x[0], 1)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "sum_all",
        vec![vec![3, 4]],
        Sample::Centered,
        Box::new(|t, x, _| t.sum_all(x[0])),
    );
    push(
        "mean_all",
        vec![vec![3, 4]],
        Sample::Centered,
        Box::new(|t, x, _| t.mean_all(x[0])),
    );
    push(
        "grid sample",
        vec![vec![2, 5, 5]],
        Sample::Centered,
        Box::new(|t, x, _| {
            let gx = Tensor::from_fn(&[5, 5], |i| ((i * 13 % 40) as f64) * 0.11 + 0.1);
            let gy = Tensor::from_fn(&[5, 5], |i| ((i * 7 % 44) as f64) * 0.1 + 0.05);
            let (y, _valid) = t.grid_sample(x[0], &gx, &gy)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "silog loss",
        vec![vec![1, 1, 4, 5], vec![1, 1, 4, 5]],
        Sample::Positive,
        Box::new(|t, x, _| {
            let mask: Vec<bool> = (0..20).map(|i| i % 7 != 0).collect();
            metrics::silog_on_tape(t, x[0], x[1], Some(&mask), 1e-6).map_err(tensor_err)
        }),
    );
    cases
}

/// The gradcheck arch: 8x8 frames, stride 4, 4 channels, 2 heads, 2 tokens.
fn grad_arch() -> ArchConfig {
    small_arch(4, 2, 2)
}

/// Fresh parameters for a model-level gradient check. The attention output
/// projections init damped for training, which would leave the memory
/// pathway's derivatives too close to the finite-difference noise floor;
/// the check wants every path at healthy scale, so they are boosted back
/// to the magnitude of the other attention matrices.
fn grad_params(arch: &ArchConfig, seed: u64) -> ModelParams<f64> {
    let mut params: ModelParams<f64> =
        ModelParams::init(arch.clone(), seed).expect("valid gradcheck arch");
    let names: Vec<String> = params
        .iter()
        .filter(|(n, _)| n.starts_with("attn.") && n.ends_with(".wo"))
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let t = params.get(&name).expect("listed name");
        let boosted = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v * 2.0).collect(),
        )
        .expect("same shape");
        params.set(&name, boosted).expect("same shape");
    }
    params
}

fn attention_block_case() -> GradCase {
    let arch = grad_arch();
    let params = grad_params(&arch, 11);
    GradCase {
        name: "attention block (vis, disp, features)",
        shapes: vec![vec![2, 4, 2, 2], vec![2, 2, 8, 8], vec![1, 4, 2, 2]],
        sample: Sample::Centered,
        build: Box::new(move |t, x, _| {
            let mounted = params.mount(t, false);
            let pos = pos_encode(t, &mounted, &arch, x[1]).map_err(tensor_err)?;
            let seq = memory_self_attention(t, &mounted, &arch, x[0], pos).map_err(tensor_err)?;
            let fused = fuse_cross_attention(t, &mounted, &arch, x[2], seq).map_err(tensor_err)?;
            weighted_sum(t, fused)
        }),
    }
}

fn depth_wrt_tokens_case() -> GradCase {
    let arch = grad_arch();
    let params = grad_params(&arch, 12);
    GradCase {
        name: "depth output w.r.t. memory tokens",
        shapes: vec![vec![2, 4, 2, 2], vec![2, 2, 8, 8]],
        sample: Sample::Centered,
        build: Box::new(move |t, x, seed| {
            let mut rng = rng_for(0xA5A5, "depth_tokens_aux", seed);
            let image = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
            let flow = rand_tensor(&mut rng, &[2, 8, 8], -1.0, 1.0);
            let mounted = params.mount(t, false);
            let out = full_forward(
                t,
                &mounted,
                &arch,
                &image,
                Some((x[0], x[1])),
                Some(&flow),
                None,
                ForwardSwitches::default(),
            )
            .map_err(tensor_err)?;
            weighted_sum(t, out.depth)
        }),
    }
}

fn stream_update_loss_case() -> GradCase {
    let arch = grad_arch();
    let params = grad_params(&arch, 13);
    GradCase {
        name: "two-pass update loss w.r.t. memory tokens",
        shapes: vec![vec![2, 4, 2, 2], vec![2, 2, 8, 8]],
        sample: Sample::Centered,
        build: Box::new(move |t, x, seed| {
            let mut rng = rng_for(0x5A5A, "update_loss_aux", seed);
            let cur = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
            let warped = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
            let flow = rand_tensor(&mut rng, &[2, 8, 8], -1.0, 1.0);
            let mask: Vec<bool> = (0..64).map(|i| i % 9 != 0).collect();
            let mounted = params.mount(t, false);
            let mem = Some((x[0], x[1]));
            let sw = ForwardSwitches::default();
            let a = full_forward(t, &mounted, &arch, &cur, mem, Some(&flow), None, sw)
                .map_err(tensor_err)?;
            let b = full_forward(t, &mounted, &arch, &warped, mem, Some(&flow), None, sw)
                .map_err(tensor_err)?;
            metrics::silog_on_tape(t, a.depth, b.depth, Some(&mask), 1e-6).map_err(tensor_err)
        }),
    }
}

/// Checks d(depth)/d(parameters) for every trainable tensor at once; finite
/// differences rebuild the parameter set from scratch for each probe.
fn run_param_gradcheck(
    base_seed: u64,
    seeds: usize,
    coords: usize,
) -> Result<String, VerifyError> {
    let arch = grad_arch();
    let base = grad_params(&arch, 14);
    let names: Vec<String> = base.iter().map(|(n, _)| n.to_string()).collect();
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for s in 0..seeds {
        let mut rng = rng_for(base_seed, "depth_params", s as u64);
        let image = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
        let flow = rand_tensor(&mut rng, &[2, 8, 8], -1.0, 1.0);
        let vis = rand_tensor(&mut rng, &[2, 4, 2, 2], -1.0, 1.0);
        let disp = rand_tensor(&mut rng, &[2, 2, 8, 8], -1.0, 1.0);

        let mut tape: Tape<f64> = Tape::new();
        let mounted = base.mount(&mut tape, true);
        let vid = tape.constant(vis.clone());
        let did = tape.constant(disp.clone());
        let out = full_forward(
            &mut tape,
            &mounted,
            &arch,
            &image,
            Some((vid, did)),
            Some(&flow),
            None,
            ForwardSwitches::default(),
        )?;
        let root = weighted_sum(&mut tape, out.depth)?;
        let grads = tape.backward(root)?;

        let x0: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| base.get(n).expect("known name").clone())
            .collect();
        let analytic: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| {
                grads
                    .get(mounted.id(n))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(base.get(n).expect("known name").shape()))
            })
            .collect();

        let f = |xs: &[Tensor<f64>]| -> crate::tensor::Result<f64> {
            let mut p = base.clone();
            for (n, x) in names.iter().zip(xs) {
                p.set(n, x.clone()).map_err(tensor_err)?;
            }
            let mut tape: Tape<f64> = Tape::new();
            let mounted = p.mount(&mut tape, false);
            let vid = tape.constant(vis.clone());
            let did = tape.constant(disp.clone());
            let out = full_forward(
                &mut tape,
                &mounted,
                &arch,
                &image,
                Some((vid, did)),
                Some(&flow),
                None,
                ForwardSwitches::default(),
            )
            .map_err(tensor_err)?;
            let root = weighted_sum(&mut tape, out.depth)?;
            Ok(tape.value(root).data()[0])
        };
        let report = finite_diff_check_multi(
            f,
            &x0,
            &analytic,
            GRADCHECK_EPS,
            GRADCHECK_TOL,
            Some(coords),
        )?;
        if !report.ok() {
            return Err(VerifyError::Check(format!(
                "depth w.r.t. parameters seed {s}: {}",
                report.summary()
            )));
        }
        max_err = max_err.max(report.max_rel_err);
        checked += report.checked;
    }
    Ok(format!(
        "{seeds} seeds, {checked} coords across all parameter tensors, max rel err {max_err:.2e}"
    ))
}

/// Finite-difference audit of every tape primitive, the scale-invariant
/// log loss, the attention blocks, and the end-to-end depth network.
pub fn run_gradcheck_suite(
    base_seed: u64,
    seeds_per_case: usize,
    coords_per_case: usize,
) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut cases = simple_cases();
    cases.push(attention_block_case());
    cases.push(depth_wrt_tokens_case());
    cases.push(stream_update_loss_case());
    for case in &cases {
        out.push(outcome_from(
            case.name,
            run_grad_case(case, base_seed, seeds_per_case, coords_per_case),
        ));
    }
    out.push(outcome_from(
        "depth output w.r.t. model parameters",
        run_param_gradcheck(base_seed, seeds_per_case, coords_per_case),
    ));
    out
}
