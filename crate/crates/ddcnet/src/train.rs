//! Desk-scale supervised training: He initialization, Adam with L2
//! regularization, the average-endpoint-error loss, synthetic
//! ground-truth data, augmentation, and the training loop with plateau
//! learning-rate drops and layer freezing.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::flow::FlowField;
use crate::net::{backward, forward, GradStore, NetworkSpec, ParamStore};
use crate::tensor::{Scalar, Tensor4};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// He initialization: weights drawn from Normal(0, sqrt(2/fan_in)) with
/// fan_in = kh*kw*c_in, biases zero. Layers are filled in ascending id
/// order, so a fixed seed reproduces the store bitwise.
pub fn he_init<S: Scalar>(net: &NetworkSpec, rng: &mut impl Rng) -> Result<ParamStore<S>> {
    let mut params = ParamStore::zeros_for(net)?;
    for kernel in params.kernels.values_mut() {
        let fan_in = (kernel.kh * kernel.kw * kernel.c_in) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
            .map_err(|e| Error::domain(format!("bad init distribution: {e}")))?;
        for w in kernel.weights.iter_mut() {
            *w = S::from_f64_lossy(normal.sample(rng));
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam hyperparameters plus the L2 coefficient and frozen-layer set.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied as a loss-gradient term g <- g + l2*theta before the
    /// moment updates, uniformly to weights and biases.
    pub l2: f64,
    /// Layer ids whose parameters and moments are left untouched.
    pub frozen: BTreeSet<u32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0,
            frozen: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone)]
struct AdamSlot<S> {
    m_w: Vec<S>,
    v_w: Vec<S>,
    m_b: Vec<S>,
    v_b: Vec<S>,
}

/// First/second moment estimates per layer plus the shared step count.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    step: u64,
    slots: std::collections::BTreeMap<u32, AdamSlot<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn zeros_like(params: &ParamStore<S>) -> Self {
        let slots = params
            .kernels
            .iter()
            .map(|(&id, k)| {
                (
                    id,
                    AdamSlot {
                        m_w: vec![S::zero(); k.weights.len()],
                        v_w: vec![S::zero(); k.weights.len()],
                        m_b: vec![S::zero(); k.bias.len()],
                        v_b: vec![S::zero(); k.bias.len()],
                    },
                )
            })
            .collect();
        AdamState { step: 0, slots }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Frozen layers keep their exact
/// parameter and moment bits; a non-finite gradient aborts before any
/// parameter is touched.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &GradStore<S>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (&id, kernel) in &params.kernels {
        if cfg.frozen.contains(&id) {
            continue;
        }
        let (gw, gb) = grads
            .grads
            .get(&id)
            .ok_or_else(|| Error::shape(format!("no gradient for layer {id}")))?;
        if gw.len() != kernel.weights.len() || gb.len() != kernel.bias.len() {
            return Err(Error::shape(format!("gradient shape mismatch at layer {id}")));
        }
        if gw.iter().chain(gb.iter()).any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                layer: id,
                what: "gradient",
            });
        }
    }
    state.step += 1;
    let t = state.step;
    let b1 = S::from_f64_lossy(cfg.beta1);
    let b2 = S::from_f64_lossy(cfg.beta2);
    let one = S::one();
    let c1 = one - b1.powi(t as i32);
    let c2 = one - b2.powi(t as i32);
    let lr = S::from_f64_lossy(cfg.lr);
    let eps = S::from_f64_lossy(cfg.eps);
    let l2 = S::from_f64_lossy(cfg.l2);
    for (&id, kernel) in params.kernels.iter_mut() {
        if cfg.frozen.contains(&id) {
            continue;
        }
        let (gw, gb) = &grads.grads[&id];
        let slot = state.slots.get_mut(&id).expect("state built from params");
        let update = |theta: &mut [S], grad: &[S], m: &mut [S], v: &mut [S]| {
            for i in 0..theta.len() {
                let g = grad[i] + l2 * theta[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                theta[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        };
        update(&mut kernel.weights, gw, &mut slot.m_w, &mut slot.v_w);
        update(&mut kernel.bias, gb, &mut slot.m_b, &mut slot.v_b);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// AEE loss
// ---------------------------------------------------------------------------

/// Average endpoint error of a batched flow output against per-sample
/// ground truth, with its gradient. The gradient of each valid pixel is
/// the unit error vector scaled by 1/|valid|; pixels at exactly zero
/// error take gradient 0 (the subgradient that keeps them stationary),
/// and invalid pixels contribute nothing.
pub fn aee_loss<S: Scalar>(est: &Tensor4<S>, gt: &[FlowField]) -> Result<(f64, Tensor4<S>)> {
    let (n, h, w, c) = est.shape();
    if c != 2 {
        return Err(Error::shape(format!("flow estimates have 2 channels, got {c}")));
    }
    if gt.len() != n {
        return Err(Error::shape(format!(
            "{n} estimates against {} ground-truth fields",
            gt.len()
        )));
    }
    for g in gt {
        if g.dims() != (h, w) {
            return Err(Error::shape(format!(
                "ground truth is {:?}, estimates are ({h}, {w})",
                g.dims()
            )));
        }
    }
    let n_valid: usize = gt.iter().map(|g| g.valid_count()).sum();
    if n_valid == 0 {
        return Err(Error::domain("no valid pixels to train on"));
    }
    let mut grad = Tensor4::<S>::zeros(n, h, w, 2)?;
    let mut loss = 0.0f64;
    let inv = 1.0 / n_valid as f64;
    for (b, g) in gt.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                if !g.is_valid(i, j) {
                    continue;
                }
                let (ug, vg) = g.uv(i, j);
                let du = est.at(b, i, j, 0).to_f64_lossy() - ug as f64;
                let dv = est.at(b, i, j, 1).to_f64_lossy() - vg as f64;
                let ee = du.hypot(dv);
                loss += ee * inv;
                if ee > 0.0 {
                    *grad.at_mut(b, i, j, 0) = S::from_f64_lossy(du / ee * inv);
                    *grad.at_mut(b, i, j, 1) = S::from_f64_lossy(dv / ee * inv);
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Single-field convenience wrapper over [`aee_loss`].
pub fn aee_loss_field(est: &FlowField, gt: &FlowField) -> Result<(f64, Tensor4<f32>)> {
    let (h, w) = est.dims();
    let mut t = Tensor4::<f32>::zeros(1, h, w, 2)?;
    for i in 0..h {
        for j in 0..w {
            let (u, v) = est.uv(i, j);
            *t.at_mut(0, i, j, 0) = u;
            *t.at_mut(0, i, j, 1) = v;
        }
    }
    aee_loss(&t, std::slice::from_ref(gt))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Ground-truth layout of a synthetic pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    /// One translation over the whole frame.
    Global,
    /// Two half-plane regions with independent translations.
    TwoRegion,
}

/// Random texture pair under piecewise-constant integer flow: frame1 is
/// band-limited noise, frame2 is frame1 warped by the flow with zero
/// fill, and pixels whose correspondence leaves the frame (or crosses
/// the region boundary) are masked invalid.
pub fn synth_pair<S: Scalar>(
    rng: &mut impl Rng,
    size: (usize, usize),
    max_disp: usize,
) -> Result<(Tensor4<S>, Tensor4<S>, FlowField)> {
    let mode = if rng.gen_bool(0.5) {
        SynthMode::Global
    } else {
        SynthMode::TwoRegion
    };
    synth_pair_with_mode(rng, size, max_disp, mode)
}

/// [`synth_pair`] with the layout fixed by the caller.
pub fn synth_pair_with_mode<S: Scalar>(
    rng: &mut impl Rng,
    size: (usize, usize),
    max_disp: usize,
    mode: SynthMode,
) -> Result<(Tensor4<S>, Tensor4<S>, FlowField)> {
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::domain(format!("synthetic frames need h, w >= 8, got {h}x{w}")));
    }
    if 4 * max_disp >= h.min(w) {
        return Err(Error::domain(format!(
            "max displacement {max_disp} must stay under a quarter of the {h}x{w} frame"
        )));
    }
    let frame1 = smooth_noise::<S>(rng, h, w);
    let d = max_disp as i64;
    let pick = |rng: &mut dyn rand::RngCore| -> (i64, i64) {
        (rng.gen_range(-d..=d), rng.gen_range(-d..=d))
    };
    // region id per pixel plus each region's (u, v)
    let (region, flows): (Box<dyn Fn(usize, usize) -> usize>, Vec<(i64, i64)>) = match mode {
        SynthMode::Global => (Box::new(|_, _| 0), vec![pick(rng)]),
        SynthMode::TwoRegion => {
            let horizontal = rng.gen_bool(0.5);
            let cut = if horizontal {
                rng.gen_range(h / 4..3 * h / 4)
            } else {
                rng.gen_range(w / 4..3 * w / 4)
            };
            let f = move |i: usize, j: usize| -> usize {
                let coord = if horizontal { i } else { j };
                usize::from(coord >= cut)
            };
            (Box::new(f), vec![pick(rng), pick(rng)])
        }
    };
    let inside = |i: i64, j: i64| i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w;
    // frame2(i,j) samples frame1 at (i,j) minus the local flow
    let frame2 = Tensor4::<S>::from_fn(1, h, w, 3, |_, i, j, ch| {
        let (u, v) = flows[region(i, j)];
        let (si, sj) = (i as i64 - v, j as i64 - u);
        if inside(si, sj) {
            frame1.at(0, si as usize, sj as usize, ch)
        } else {
            S::zero()
        }
    })?;
    let mut gt = FlowField::zeros(h, w)?;
    for i in 0..h {
        for j in 0..w {
            let r = region(i, j);
            let (u, v) = flows[r];
            let (ti, tj) = (i as i64 + v, j as i64 + u);
            // valid only if the pixel's destination stays in frame and in
            // the same flow region, so every valid label is exact
            if inside(ti, tj) && region(ti as usize, tj as usize) == r {
                gt.set(i, j, u as f32, v as f32);
            } else {
                gt.set_invalid(i, j);
            }
        }
    }
    Ok((frame1, frame2, gt))
}

/// Uniform noise in [0,1] passed twice through a count-normalized 3x3
/// box blur (local mean, so the range is preserved).
fn smooth_noise<S: Scalar>(rng: &mut impl Rng, h: usize, w: usize) -> Tensor4<S> {
    let mut buf: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut next = vec![0.0f64; h * w * 3];
    for _ in 0..2 {
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let (y, x) = (i as i64 + di, j as i64 + dj);
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                sum += buf[(y as usize * w + x as usize) * 3 + c];
                                count += 1.0;
                            }
                        }
                    }
                    next[(i * w + j) * 3 + c] = sum / count;
                }
            }
        }
        std::mem::swap(&mut buf, &mut next);
    }
    Tensor4::from_fn(1, h, w, 3, |_, i, j, c| {
        S::from_f64_lossy(buf[(i * w + j) * 3 + c])
    })
    .expect("dims are nonzero")
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Geometric and photometric jitter ranges, all symmetric about the
/// identity. Zero-width ranges leave the data bitwise unchanged.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub geometric: bool,
    /// Rotation range in degrees (plus or minus).
    pub rotation_deg: f64,
    /// Multiplicative scale range (low, high).
    pub scale: (f64, f64),
    /// Translation range in pixels (plus or minus, each axis).
    pub translate_px: f64,
    pub photometric: bool,
    /// Additive brightness range (plus or minus, on [0,1] values).
    pub brightness: f64,
    /// Relative contrast range about 1.
    pub contrast: f64,
    /// Relative saturation range about 1.
    pub saturation: f64,
    /// Hue rotation range in turns (plus or minus).
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            geometric: true,
            rotation_deg: 17.0,
            scale: (0.9, 1.3),
            translate_px: 4.0,
            photometric: true,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

impl AugmentConfig {
    /// Ranges collapsed to the identity; useful as a no-op baseline.
    pub fn identity() -> Self {
        AugmentConfig {
            geometric: true,
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            translate_px: 0.0,
            photometric: true,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = self.rotation_deg.is_finite()
            && self.scale.0.is_finite()
            && self.scale.1.is_finite()
            && self.translate_px.is_finite()
            && self.brightness.is_finite()
            && self.contrast.is_finite()
            && self.saturation.is_finite()
            && self.hue.is_finite();
        if !finite {
            return Err(Error::domain("augmentation ranges must be finite"));
        }
        if !(self.scale.0 > 0.0) || self.scale.1 < self.scale.0 {
            return Err(Error::domain(format!(
                "scale range ({}, {}) must be positive and ordered",
                self.scale.0, self.scale.1
            )));
        }
        if self.rotation_deg < 0.0 || self.translate_px < 0.0 {
            return Err(Error::domain("jitter ranges must be nonnegative"));
        }
        Ok(())
    }
}

fn sample_range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// One bilinear tap; `fx == 0` (resp. `fy`) degenerates to the exact
/// pixel so identity transforms copy bits and edge pixels stay in range.
fn bilinear(t: &Tensor4<f32>, y: f64, x: f64, c: usize) -> Option<f32> {
    let (_, h, w, _) = t.shape();
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return None;
    }
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (i0, j0) = (y0 as usize, x0 as usize);
    let i1 = if fy > 0.0 { i0 + 1 } else { i0 };
    let j1 = if fx > 0.0 { j0 + 1 } else { j0 };
    if i1 >= h || j1 >= w {
        return None;
    }
    let v = |i: usize, j: usize| t.at(0, i, j, c) as f64;
    let top = v(i0, j0) * (1.0 - fx) + v(i0, j1) * fx;
    let bot = v(i1, j0) * (1.0 - fx) + v(i1, j1) * fx;
    Some((top * (1.0 - fy) + bot * fy) as f32)
}

/// Applies the affine map p' = A(p - c) + c + t (A = scale times
/// rotation, +x right / +y down) to both frames and the flow field:
/// frames and flow are resampled bilinearly from the preimage of each
/// output pixel, and flow vectors are additionally transformed by A.
fn warp_triple(
    f1: &Tensor4<f32>,
    f2: &Tensor4<f32>,
    gt: &FlowField,
    theta_rad: f64,
    scale: f64,
    translate: (f64, f64),
) -> Result<(Tensor4<f32>, Tensor4<f32>, FlowField)> {
    let (_, h, w, c) = f1.shape();
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let (cos, sin) = (theta_rad.cos(), theta_rad.sin());
    // inverse map: p = A^{-1}(p' - c - t) + c
    let inv = 1.0 / scale;
    let preimage = |i: usize, j: usize| -> (f64, f64) {
        let dx = j as f64 - cx - translate.0;
        let dy = i as f64 - cy - translate.1;
        let x = inv * (cos * dx + sin * dy) + cx;
        let y = inv * (-sin * dx + cos * dy) + cy;
        (y, x)
    };
    let mut out1 = Tensor4::<f32>::zeros(1, h, w, c)?;
    let mut out2 = Tensor4::<f32>::zeros(1, h, w, c)?;
    let mut out_gt = FlowField::zeros(h, w)?;
    for i in 0..h {
        for j in 0..w {
            let (y, x) = preimage(i, j);
            for ch in 0..c {
                if let Some(v) = bilinear(f1, y, x, ch) {
                    *out1.at_mut(0, i, j, ch) = v;
                }
                if let Some(v) = bilinear(f2, y, x, ch) {
                    *out2.at_mut(0, i, j, ch) = v;
                }
            }
            match flow_tap(gt, y, x) {
                Some((u, v)) => {
                    // vectors transform by A itself
                    let u2 = scale * (cos * u as f64 - sin * v as f64);
                    let v2 = scale * (sin * u as f64 + cos * v as f64);
                    out_gt.set(i, j, u2 as f32, v2 as f32);
                }
                None => out_gt.set_invalid(i, j),
            }
        }
    }
    Ok((out1, out2, out_gt))
}

/// Bilinear flow sample; any invalid tap poisons the result.
fn flow_tap(gt: &FlowField, y: f64, x: f64) -> Option<(f32, f32)> {
    let (h, w) = gt.dims();
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return None;
    }
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (i0, j0) = (y0 as usize, x0 as usize);
    let i1 = if fy > 0.0 { i0 + 1 } else { i0 };
    let j1 = if fx > 0.0 { j0 + 1 } else { j0 };
    if i1 >= h || j1 >= w {
        return None;
    }
    for (i, j) in [(i0, j0), (i0, j1), (i1, j0), (i1, j1)] {
        if !gt.is_valid(i, j) {
            return None;
        }
    }
    let tap = |i: usize, j: usize| {
        let (u, v) = gt.uv(i, j);
        (u as f64, v as f64)
    };
    let mix = |a: (f64, f64), b: (f64, f64), f: f64| {
        (a.0 * (1.0 - f) + b.0 * f, a.1 * (1.0 - f) + b.1 * f)
    };
    let top = mix(tap(i0, j0), tap(i0, j1), fx);
    let bot = mix(tap(i1, j0), tap(i1, j1), fx);
    let (u, v) = mix(top, bot, fy);
    Some((u as f32, v as f32))
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Photometric jitter, identical on both frames. Each sub-op is skipped
/// when its sampled parameter is the exact identity, so zero ranges
/// leave the frames bitwise intact.
fn photometric(frames: [&mut Tensor4<f32>; 2], brightness: f64, contrast: f64, saturation: f64, hue: f64) {
    for t in frames {
        let (_, h, w, _) = t.shape();
        for i in 0..h {
            for j in 0..w {
                let mut r = t.at(0, i, j, 0) as f64;
                let mut g = t.at(0, i, j, 1) as f64;
                let mut b = t.at(0, i, j, 2) as f64;
                if brightness != 0.0 {
                    r += brightness;
                    g += brightness;
                    b += brightness;
                }
                if contrast != 1.0 {
                    r = (r - 0.5) * contrast + 0.5;
                    g = (g - 0.5) * contrast + 0.5;
                    b = (b - 0.5) * contrast + 0.5;
                }
                if saturation != 1.0 || hue != 0.0 {
                    let (hh, ss, vv) = rgb_to_hsv(
                        r.clamp(0.0, 1.0),
                        g.clamp(0.0, 1.0),
                        b.clamp(0.0, 1.0),
                    );
                    let (r2, g2, b2) =
                        hsv_to_rgb(hh + hue, (ss * saturation).clamp(0.0, 1.0), vv);
                    r = r2;
                    g = g2;
                    b = b2;
                }
                if brightness != 0.0 || contrast != 1.0 || saturation != 1.0 || hue != 0.0 {
                    *t.at_mut(0, i, j, 0) = r.clamp(0.0, 1.0) as f32;
                    *t.at_mut(0, i, j, 1) = g.clamp(0.0, 1.0) as f32;
                    *t.at_mut(0, i, j, 2) = b.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
}

/// Samples one augmentation (shared by both frames) and applies it. A
/// geometric draw that leaves no valid ground truth is resampled a few
/// times before giving up.
pub fn augment(
    f1: &Tensor4<f32>,
    f2: &Tensor4<f32>,
    gt: &FlowField,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor4<f32>, Tensor4<f32>, FlowField)> {
    cfg.validate()?;
    let (mut a, mut b, mut g) = (f1.clone(), f2.clone(), gt.clone());
    if cfg.geometric {
        let mut done = false;
        for _ in 0..16 {
            let theta = sample_range(rng, -cfg.rotation_deg, cfg.rotation_deg).to_radians();
            let s = sample_range(rng, cfg.scale.0, cfg.scale.1);
            let tx = sample_range(rng, -cfg.translate_px, cfg.translate_px);
            let ty = sample_range(rng, -cfg.translate_px, cfg.translate_px);
            let (wa, wb, wg) = warp_triple(f1, f2, gt, theta, s, (tx, ty))?;
            if wg.valid_count() > 0 {
                a = wa;
                b = wb;
                g = wg;
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::domain(
                "augmentation left no valid pixels after 16 draws",
            ));
        }
    }
    if cfg.photometric {
        let brightness = sample_range(rng, -cfg.brightness, cfg.brightness);
        let contrast = 1.0 + sample_range(rng, -cfg.contrast, cfg.contrast);
        let saturation = 1.0 + sample_range(rng, -cfg.saturation, cfg.saturation);
        let hue = sample_range(rng, -cfg.hue, cfg.hue);
        photometric([&mut a, &mut b], brightness, contrast, saturation, hue);
    }
    Ok((a, b, g))
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Training-run settings; readable from a `key=value` text file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    pub l2: f64,
    pub max_steps: usize,
    /// Plateau window in steps; the windowed mean loss must improve by
    /// `lr_threshold` (relative) or the rate is multiplied by
    /// `lr_factor`.
    pub lr_window: usize,
    pub lr_factor: f64,
    pub lr_threshold: f64,
    /// Evaluate on the held-out set every this many steps (0 = never).
    pub eval_every: usize,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Held-out synthetic samples for evaluation.
    pub eval_samples: usize,
    /// Layer ids excluded from optimization.
    pub frozen_layers: BTreeSet<u32>,
    /// Side length of synthetic training frames.
    pub size: usize,
    /// Largest synthetic displacement in pixels.
    pub max_disp: usize,
    pub augment: bool,
    /// Stop early once the held-out AEE drops to this value.
    pub target_eval_aee: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            batch: 4,
            lr: 1e-3,
            l2: 0.0,
            max_steps: 2000,
            lr_window: 200,
            lr_factor: 0.5,
            lr_threshold: 0.01,
            eval_every: 100,
            checkpoint_every: 0,
            eval_samples: 8,
            frozen_layers: BTreeSet::new(),
            size: 64,
            max_disp: 3,
            augment: false,
            target_eval_aee: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::domain("batch must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::domain(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return Err(Error::domain(format!("l2 must be finite and >= 0, got {}", self.l2)));
        }
        if self.lr_window == 0 || !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::domain("lr_window must be >= 1 and lr_factor in (0, 1]"));
        }
        if self.eval_samples == 0 {
            return Err(Error::domain("eval_samples must be >= 1"));
        }
        if self.size < 8 || 4 * self.max_disp >= self.size {
            return Err(Error::domain(format!(
                "frame size {} too small for max_disp {}",
                self.size, self.max_disp
            )));
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` comments and blank lines are
    /// skipped, unknown keys rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: lineno,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Parse {
                line: lineno,
                msg: format!("bad {what} value {value:?}"),
            };
            match key {
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "batch" => cfg.batch = value.parse().map_err(|_| bad("batch"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
                "l2" => cfg.l2 = value.parse().map_err(|_| bad("l2"))?,
                "max_steps" => cfg.max_steps = value.parse().map_err(|_| bad("max_steps"))?,
                "lr_window" => cfg.lr_window = value.parse().map_err(|_| bad("lr_window"))?,
                "lr_factor" => cfg.lr_factor = value.parse().map_err(|_| bad("lr_factor"))?,
                "lr_threshold" => {
                    cfg.lr_threshold = value.parse().map_err(|_| bad("lr_threshold"))?
                }
                "eval_every" => cfg.eval_every = value.parse().map_err(|_| bad("eval_every"))?,
                "checkpoint_every" => {
                    cfg.checkpoint_every = value.parse().map_err(|_| bad("checkpoint_every"))?
                }
                "eval_samples" => {
                    cfg.eval_samples = value.parse().map_err(|_| bad("eval_samples"))?
                }
                "freeze" => {
                    cfg.frozen_layers = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| s.trim().parse().map_err(|_| bad("freeze")))
                        .collect::<Result<_>>()?
                }
                "size" => cfg.size = value.parse().map_err(|_| bad("size"))?,
                "max_disp" => cfg.max_disp = value.parse().map_err(|_| bad("max_disp"))?,
                "augment" => cfg.augment = value.parse().map_err(|_| bad("augment"))?,
                "target_eval_aee" => {
                    cfg.target_eval_aee = if value == "none" {
                        None
                    } else {
                        Some(value.parse().map_err(|_| bad("target_eval_aee"))?)
                    }
                }
                _ => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let freeze = self
            .frozen_layers
            .iter()
            .map(|id| id.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let target = match self.target_eval_aee {
            Some(t) => t.to_string(),
            None => "none".into(),
        };
        format!(
            "seed={}\nbatch={}\nlr={}\nl2={}\nmax_steps={}\nlr_window={}\nlr_factor={}\n\
             lr_threshold={}\neval_every={}\ncheckpoint_every={}\neval_samples={}\nfreeze={}\n\
             size={}\nmax_disp={}\naugment={}\ntarget_eval_aee={}\n",
            self.seed,
            self.batch,
            self.lr,
            self.l2,
            self.max_steps,
            self.lr_window,
            self.lr_factor,
            self.lr_threshold,
            self.eval_every,
            self.checkpoint_every,
            self.eval_samples,
            freeze,
            self.size,
            self.max_disp,
            self.augment,
            target,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::atomic_write(path, self.to_text().as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Data sources and the loop
// ---------------------------------------------------------------------------

/// Supplies training batches: two frame stacks plus per-sample ground
/// truth.
pub trait DataSource {
    fn next_batch(&mut self, batch: usize)
        -> Result<(Tensor4<f32>, Tensor4<f32>, Vec<FlowField>)>;
}

/// Seeded stream of synthetic pairs, optionally augmented.
pub struct SynthSource {
    rng: ChaCha8Rng,
    size: usize,
    max_disp: usize,
    augment: Option<AugmentConfig>,
}

impl SynthSource {
    pub fn new(seed: u64, size: usize, max_disp: usize, augment: Option<AugmentConfig>) -> Self {
        SynthSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
            size,
            max_disp,
            augment,
        }
    }
}

/// Stacks per-sample (1,h,w,c) tensors into one batch tensor.
fn stack_batch(samples: &[Tensor4<f32>]) -> Result<Tensor4<f32>> {
    let (_, h, w, c) = samples[0].shape();
    let mut out = Tensor4::<f32>::zeros(samples.len(), h, w, c)?;
    let plane = h * w * c;
    for (b, s) in samples.iter().enumerate() {
        out.data_mut()[b * plane..(b + 1) * plane].copy_from_slice(s.data());
    }
    Ok(out)
}

impl DataSource for SynthSource {
    fn next_batch(
        &mut self,
        batch: usize,
    ) -> Result<(Tensor4<f32>, Tensor4<f32>, Vec<FlowField>)> {
        let mut f1s = Vec::with_capacity(batch);
        let mut f2s = Vec::with_capacity(batch);
        let mut gts = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (f1, f2, gt) =
                synth_pair::<f32>(&mut self.rng, (self.size, self.size), self.max_disp)?;
            let (f1, f2, gt) = match &self.augment {
                Some(cfg) => augment(&f1, &f2, &gt, cfg, &mut self.rng)?,
                None => (f1, f2, gt),
            };
            f1s.push(f1);
            f2s.push(f2);
            gts.push(gt);
        }
        Ok((stack_batch(&f1s)?, stack_batch(&f2s)?, gts))
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Held-out AEE, present on evaluation steps.
    pub eval_aee: Option<f64>,
}

/// Final parameters plus the per-step record of a run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub history: Vec<HistoryRow>,
    pub final_eval_aee: Option<f64>,
    pub steps_run: usize,
}

pub fn write_history_csv(history: &[HistoryRow], path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                format!("{:.6}", r.loss),
                format!("{:e}", r.lr),
                r.eval_aee.map(|a| format!("{a:.6}")).unwrap_or_default(),
            ]
        })
        .collect();
    crate::io::write_csv(path, &["step", "loss", "lr", "eval_aee"], &rows)
}

/// Mean AEE of the net on a fixed evaluation set.
fn evaluate(
    net: &NetworkSpec,
    params: &ParamStore<f32>,
    eval: &(Tensor4<f32>, Tensor4<f32>, Vec<FlowField>),
) -> Result<f64> {
    let (out, _) = forward(net, params, &eval.0, &eval.1, false)?;
    let mut sum = 0.0;
    for (b, gt) in eval.2.iter().enumerate() {
        let est = FlowField::from_output(&out, b)?;
        sum += crate::flow::aee(&est, gt)?;
    }
    Ok(sum / eval.2.len() as f64)
}

/// Runs the mini-batch loop: Adam on the AEE loss with plateau-based
/// learning-rate halving, periodic held-out evaluation, optional
/// freezing and checkpoints. Fully deterministic for a fixed config
/// (the kernels are thread-count independent). A non-finite loss or
/// gradient aborts, leaving an `abort.ckpt` when an output directory is
/// given.
pub fn train(
    net: &NetworkSpec,
    cfg: &TrainConfig,
    init: Option<ParamStore<f32>>,
    source: &mut dyn DataSource,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    let mut params = match init {
        Some(p) => {
            p.validate_for(net)?;
            p
        }
        None => he_init(net, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
    };
    // held-out set from an independent stream
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut eval_f1 = Vec::new();
    let mut eval_f2 = Vec::new();
    let mut eval_gt = Vec::new();
    for _ in 0..cfg.eval_samples {
        let (a, b, g) = synth_pair::<f32>(&mut eval_rng, (cfg.size, cfg.size), cfg.max_disp)?;
        eval_f1.push(a);
        eval_f2.push(b);
        eval_gt.push(g);
    }
    let eval_set = (stack_batch(&eval_f1)?, stack_batch(&eval_f2)?, eval_gt);

    let mut state = AdamState::zeros_like(&params);
    let mut adam = AdamConfig {
        lr: cfg.lr,
        l2: cfg.l2,
        frozen: cfg.frozen_layers.clone(),
        ..AdamConfig::default()
    };
    let mut history: Vec<HistoryRow> = Vec::with_capacity(cfg.max_steps);
    let mut losses: Vec<f64> = Vec::with_capacity(cfg.max_steps);
    let mut last_drop = 0usize;
    let mut final_eval = None;
    let mut steps_run = 0;

    let save_to = |params: &ParamStore<f32>, name: &str| -> Result<()> {
        if let Some(dir) = out_dir {
            params.save(&dir.join(name))?;
        }
        Ok(())
    };

    for step in 1..=cfg.max_steps {
        let (f1, f2, gts) = source.next_batch(cfg.batch)?;
        let (out, cache) = forward(net, &params, &f1, &f2, true)?;
        let (loss, grad_out) = aee_loss(&out, &gts)?;
        if !loss.is_finite() {
            save_to(&params, "abort.ckpt")?;
            return Err(Error::domain(format!(
                "non-finite loss {loss} at step {step}; checkpoint saved"
            )));
        }
        let (grads, _, _) = backward(net, &params, &cache, &grad_out)?;
        if let Err(e) = adam_step(&mut params, &grads, &mut state, &adam) {
            save_to(&params, "abort.ckpt")?;
            return Err(e);
        }
        steps_run = step;
        losses.push(loss);

        // plateau check on two adjacent windows
        if step % cfg.lr_window == 0 && step >= last_drop + 2 * cfg.lr_window {
            let recent: f64 =
                losses[step - cfg.lr_window..].iter().sum::<f64>() / cfg.lr_window as f64;
            let previous: f64 = losses[step - 2 * cfg.lr_window..step - cfg.lr_window]
                .iter()
                .sum::<f64>()
                / cfg.lr_window as f64;
            if previous - recent < cfg.lr_threshold * previous.abs() {
                adam.lr *= cfg.lr_factor;
                last_drop = step;
            }
        }

        let mut eval_aee = None;
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let aee = evaluate(net, &params, &eval_set)?;
            eval_aee = Some(aee);
            final_eval = Some(aee);
        }
        history.push(HistoryRow {
            step,
            loss,
            lr: adam.lr,
            eval_aee,
        });
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save_to(&params, &format!("step-{step}.ckpt"))?;
        }
        if let (Some(target), Some(aee)) = (cfg.target_eval_aee, eval_aee) {
            if aee <= target {
                break;
            }
        }
    }
    save_to(&params, "final.ckpt")?;
    Ok(TrainOutcome {
        params,
        history,
        final_eval_aee: final_eval,
        steps_run,
    })
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
