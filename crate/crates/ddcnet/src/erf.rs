//! Numerical effective-receptive-field (ERF) measurement.
//!
//! The ERF of an output unit is the magnitude of the loss-free input
//! gradient: run a probe pair through the net, seed the u-channel of the
//! *central* output pixel with gradient 1, backpropagate, and sum
//! `|d out / d in|` over frame 1's channels. With constant positive
//! weights and an all-ones probe every ReLU is transparent, so the map
//! depends only on the tap geometry — each pixel's value is proportional
//! to the number of tap paths reaching it. That makes the measurement an
//! exact, architecture-level diagnostic rather than a property of one
//! random init.
//!
//! The summary statistics are the full width at half maximum of the
//! central row/column profiles (how much of the theoretical receptive
//! field actually carries weight) and a gridding score (the fraction of
//! near-dead cells inside the half-max box — sparse dilation schedules
//! leave checkerboard holes).

use crate::net::{backward, forward, NetworkSpec, ParamStore};
use crate::net::{LayerKind, LayerSpec};
use crate::tensor::{Scalar, Tensor4};
use crate::{Error, Result};
use std::path::Path;

// ---------------------------------------------------------------------------
// Init
// ---------------------------------------------------------------------------

/// Fan-in-normalized constant initialization: every weight of a layer is
/// `1 / (kh * kw * c_in)` and biases are zero. An all-ones input then
/// stays at magnitude ~1 through arbitrarily many ReLU layers, so deep
/// ERF probes neither explode nor vanish.
pub fn constant_init<S: Scalar>(net: &NetworkSpec) -> Result<ParamStore<S>> {
    let mut params = ParamStore::<S>::zeros_for(net)?;
    for k in params.kernels.values_mut() {
        let v = 1.0 / (k.kh * k.kw * k.c_in) as f64;
        k.weights.fill(S::from_f64_lossy(v));
    }
    Ok(params)
}

/// Constant initialization with a literal weight value (diagnostics on
/// shallow nets; deep stacks want [`constant_init`]). The value must be
/// strictly positive so ReLUs stay transparent under a positive probe.
pub fn constant_init_value<S: Scalar>(net: &NetworkSpec, value: f64) -> Result<ParamStore<S>> {
    if !(value > 0.0) {
        return Err(Error::domain(format!(
            "constant init value must be > 0, got {value}"
        )));
    }
    let mut params = ParamStore::<S>::zeros_for(net)?;
    for k in params.kernels.values_mut() {
        k.weights.fill(S::from_f64_lossy(value));
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// ErfMap
// ---------------------------------------------------------------------------

/// A measured ERF: per-pixel gradient magnitudes over frame 1,
/// normalized so the maximum is exactly 1.
#[derive(Debug, Clone)]
pub struct ErfMap {
    h: usize,
    w: usize,
    /// Output/input pixel the gradient was seeded at.
    center: (usize, usize),
    /// Maximum |gradient| before normalization.
    raw_peak: f64,
    values: Vec<f64>,
}

impl ErfMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn center(&self) -> (usize, usize) {
        self.center
    }

    pub fn raw_peak(&self) -> f64 {
        self.raw_peak
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.w + j]
    }

    pub fn central_row(&self) -> &[f64] {
        &self.values[self.center.0 * self.w..(self.center.0 + 1) * self.w]
    }

    pub fn central_col(&self) -> Vec<f64> {
        (0..self.h).map(|i| self.value(i, self.center.1)).collect()
    }

    /// Renders the map as a 16-bit PGM image.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        crate::io::write_pgm16(path, &self.values, self.w, self.h)
    }

    /// Central row/column profiles as CSV: `offset,row,col` with offset
    /// measured from the center pixel.
    pub fn write_profile_csv(&self, path: &Path) -> Result<()> {
        let row = self.central_row();
        let col = self.central_col();
        let n = row.len().max(col.len());
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let r = row
                .get(i)
                .map(|v| format!("{v:.9}"))
                .unwrap_or_default();
            let c = col
                .get(i)
                .map(|v| format!("{v:.9}"))
                .unwrap_or_default();
            let off_r = i as i64 - self.center.1 as i64;
            rows.push(vec![off_r.to_string(), r, c]);
        }
        crate::io::write_csv(path, &["offset", "row", "col"], &rows)
    }

    /// Full map as CSV, one image row per line.
    pub fn write_full_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for i in 0..self.h {
            let row: Vec<String> = (0..self.w).map(|j| format!("{:.9}", self.value(i, j))).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        crate::io::atomic_write(path, text.as_bytes())
    }
}

/// What to feed the net while probing.
pub enum ErfProbe<'a, S> {
    /// Both frames all ones — the constant-init architecture diagnostic.
    Ones,
    /// Average the |gradient| maps over real frame pairs (trained nets).
    Pairs(&'a [(Tensor4<S>, Tensor4<S>)]),
}

/// Shrinks a requested probe size to what the net accepts: a multiple of
/// the net's required divisor, or an odd size (so the center pixel is
/// unambiguous) when the divisor is 1.
pub fn adjust_probe(net: &NetworkSpec, h: usize, w: usize) -> (usize, usize) {
    let div = net.required_divisor();
    let fix = |v: usize| -> usize {
        if div == 1 {
            if v % 2 == 0 {
                (v - 1).max(1)
            } else {
                v
            }
        } else {
            ((v / div) * div).max(div)
        }
    };
    (fix(h), fix(w))
}

/// Measures the ERF of the central u-channel output unit on a probe of
/// (at most) the given size. Gradients run at the store's precision;
/// deep constant-init probes should use f64, where path products stay
/// well above underflow.
pub fn compute_erf<S: Scalar>(
    net: &NetworkSpec,
    params: &ParamStore<S>,
    size: (usize, usize),
    probe: ErfProbe<'_, S>,
) -> Result<ErfMap> {
    let (h, w) = adjust_probe(net, size.0, size.1);
    let mut acc = vec![0.0f64; h * w];
    let mut center = (0, 0);

    let mut run_pair = |f1: &Tensor4<S>, f2: &Tensor4<S>| -> Result<()> {
        let (out, cache) = forward(net, params, f1, f2, true)?;
        let (n, oh, ow, oc) = out.shape();
        if (n, oh, ow) != (1, h, w) || oc != 2 {
            return Err(Error::shape(format!(
                "flow net should map ({h},{w}) to ({h},{w},2), got {:?}",
                out.shape()
            )));
        }
        center = (oh / 2, ow / 2);
        let mut grad = Tensor4::<S>::zeros(1, oh, ow, 2)?;
        *grad.at_mut(0, center.0, center.1, 0) = S::one();
        let (_, g1, _) = backward(net, params, &cache, &grad)?;
        let (_, _, _, c) = g1.shape();
        for i in 0..h {
            for j in 0..w {
                let px = g1.pixel(0, i, j);
                let mut s = 0.0;
                for k in 0..c {
                    s += px[k].to_f64_lossy().abs();
                }
                acc[i * w + j] += s;
            }
        }
        Ok(())
    };

    match probe {
        ErfProbe::Ones => {
            let ones = Tensor4::<S>::filled(1, h, w, net.input_channels, S::one())?;
            run_pair(&ones, &ones)?;
        }
        ErfProbe::Pairs(pairs) => {
            if pairs.is_empty() {
                return Err(Error::usage("ERF probe needs at least one frame pair"));
            }
            for (f1, f2) in pairs {
                if f1.shape() != (1, h, w, net.input_channels) {
                    return Err(Error::shape(format!(
                        "probe pair must be (1,{h},{w},{}), got {:?} (requested size adjusts to the net's divisor)",
                        net.input_channels,
                        f1.shape()
                    )));
                }
                run_pair(f1, f2)?;
            }
            let inv = 1.0 / pairs.len() as f64;
            for v in acc.iter_mut() {
                *v *= inv;
            }
        }
    }

    let raw_peak = acc.iter().cloned().fold(0.0f64, f64::max);
    if !(raw_peak > 0.0) || !raw_peak.is_finite() {
        return Err(Error::domain(format!(
            "ERF is degenerate (peak {raw_peak}); the net passes no gradient to frame 1"
        )));
    }
    for v in acc.iter_mut() {
        *v /= raw_peak;
    }
    Ok(ErfMap {
        h,
        w,
        center,
        raw_peak,
        values: acc,
    })
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Summary statistics of one [`ErfMap`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErfStats {
    /// Full width at half maximum of the central row profile, in pixels.
    pub fwhm_row: f64,
    /// Same for the central column.
    pub fwhm_col: f64,
    /// Peak |gradient| before normalization.
    pub peak: f64,
    /// Fraction of near-dead cells inside the half-max bounding box, at
    /// [`GRIDDING_EPS`].
    pub gridding: f64,
}

/// Default dead-cell threshold relative to the peak.
pub const GRIDDING_EPS: f64 = 1e-3;

impl ErfStats {
    /// Stable `key=value` summary line.
    pub fn to_line(&self) -> String {
        format!(
            "fwhm_row={:.3} fwhm_col={:.3} peak={:.6e} gridding={:.6}",
            self.fwhm_row, self.fwhm_col, self.peak, self.gridding
        )
    }
}

/// Tiny relative slack for comparisons against the half-max level, so a
/// cell that is *mathematically* exactly at half maximum is not dropped
/// by the last bit of floating-point rounding.
const HALF_MAX_GUARD: f64 = 1e-9;

/// FWHM of a 1-D profile via the outermost half-max crossings with
/// linear interpolation; a plateau `0,1,1,1,0` measures exactly 3.
fn fwhm_profile(profile: &[f64]) -> Result<f64> {
    let max = profile.iter().cloned().fold(f64::NAN, f64::max);
    if !(max > 0.0) {
        return Err(Error::domain("profile has no positive values"));
    }
    let half = 0.5 * max * (1.0 - HALF_MAX_GUARD);
    let n = profile.len();
    let first = profile.iter().position(|&v| v >= half).unwrap();
    let last = n - 1 - profile.iter().rev().position(|&v| v >= half).unwrap();
    if first == 0 || last == n - 1 {
        return Err(Error::domain(
            "ERF does not fall below half maximum inside the probe; use a larger probe",
        ));
    }
    // interpolate the crossing between (first-1, first) and (last, last+1)
    let exact_half = 0.5 * max;
    let left = first as f64 - 1.0
        + (exact_half - profile[first - 1]) / (profile[first] - profile[first - 1]);
    let right =
        last as f64 + (profile[last] - exact_half) / (profile[last] - profile[last + 1]);
    Ok(right - left)
}

/// FWHM of the central row/column plus the gridding score at the default
/// threshold.
pub fn measure_fwhm(map: &ErfMap) -> Result<ErfStats> {
    let fwhm_row = fwhm_profile(map.central_row())?;
    let fwhm_col = fwhm_profile(&map.central_col())?;
    let gridding = gridding_score(map, GRIDDING_EPS)?;
    Ok(ErfStats {
        fwhm_row,
        fwhm_col,
        peak: map.raw_peak,
        gridding,
    })
}

/// Fraction of cells inside the half-max bounding box whose value falls
/// below `eps` (relative to the peak, which is 1 after normalization).
/// Smooth single-lobe ERFs score 0; schedules whose taps miss entire
/// pixel classes leave exact holes and score well above it.
pub fn gridding_score(map: &ErfMap, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::domain(format!(
            "gridding eps must be in (0, 1), got {eps}"
        )));
    }
    let half = 0.5 * (1.0 - HALF_MAX_GUARD);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for i in 0..map.h {
        for j in 0..map.w {
            if map.value(i, j) >= half {
                r0 = r0.min(i);
                r1 = r1.max(i);
                c0 = c0.min(j);
                c1 = c1.max(j);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::domain("no cell reaches half maximum"));
    }
    let mut holes = 0usize;
    let mut cells = 0usize;
    for i in r0..=r1 {
        for j in c0..=c1 {
            cells += 1;
            if map.value(i, j) < eps {
                holes += 1;
            }
        }
    }
    Ok(holes as f64 / cells as f64)
}

// ---------------------------------------------------------------------------
// Support oracle
// ---------------------------------------------------------------------------

/// The exact input-support mask of the central output unit, computed by
/// walking tap offsets backward through the layer graph — no floating
/// point involved. The measured ERF can only be nonzero inside this
/// mask, and for moderate depths without strides it is nonzero exactly
/// on it.
#[derive(Debug, Clone)]
pub struct SupportMap {
    pub h: usize,
    pub w: usize,
    pub mask: Vec<bool>,
}

impl SupportMap {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.w + j]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Tight bounding box `(r0, r1, c0, c1)` of the support, inclusive.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for i in 0..self.h {
            for j in 0..self.w {
                if self.get(i, j) {
                    r0 = r0.min(i);
                    r1 = r1.max(i);
                    c0 = c0.min(j);
                    c1 = c1.max(j);
                }
            }
        }
        (r0 != usize::MAX).then_some((r0, r1, c0, c1))
    }
}

fn propagate_back(
    layer: &LayerSpec,
    out_mask: &SupportMap,
    in_dims: (usize, usize),
) -> SupportMap {
    let (ih, iw) = in_dims;
    let mut mask = vec![false; ih * iw];
    match layer.kind {
        LayerKind::Conv {
            kernel,
            dilation,
            stride,
            ..
        } => {
            let (chy, chx) = ((kernel.0 / 2) as i64, (kernel.1 / 2) as i64);
            for oi in 0..out_mask.h {
                for oj in 0..out_mask.w {
                    if !out_mask.get(oi, oj) {
                        continue;
                    }
                    for p in 0..kernel.0 {
                        let iy = (oi * stride.0) as i64 + (p as i64 - chy) * dilation.0 as i64;
                        if iy < 0 || iy >= ih as i64 {
                            continue;
                        }
                        for q in 0..kernel.1 {
                            let ix = (oj * stride.1) as i64 + (q as i64 - chx) * dilation.1 as i64;
                            if ix < 0 || ix >= iw as i64 {
                                continue;
                            }
                            mask[iy as usize * iw + ix as usize] = true;
                        }
                    }
                }
            }
        }
        LayerKind::Upsample { factor } => {
            for oi in 0..out_mask.h {
                for oj in 0..out_mask.w {
                    if out_mask.get(oi, oj) {
                        mask[(oi / factor) * iw + oj / factor] = true;
                    }
                }
            }
        }
    }
    SupportMap {
        h: ih,
        w: iw,
        mask,
    }
}

/// Exact support of the central output unit on a probe of (at most) the
/// given size, at the input resolution of frame 1.
pub fn support_oracle(net: &NetworkSpec, size: (usize, usize)) -> Result<SupportMap> {
    net.validate()?;
    let (h, w) = adjust_probe(net, size.0, size.1);

    // spatial dims entering every trunk layer, then every branch layer
    let mut trunk_in_dims = Vec::with_capacity(net.trunk.len());
    let (mut ch, mut cw) = (h, w);
    for layer in &net.branch {
        if let LayerKind::Conv { stride, .. } = layer.kind {
            ch = ch.div_ceil(stride.0);
            cw = cw.div_ceil(stride.1);
        }
    }
    for layer in &net.trunk {
        trunk_in_dims.push((ch, cw));
        match layer.kind {
            LayerKind::Conv { stride, .. } => {
                ch = ch.div_ceil(stride.0);
                cw = cw.div_ceil(stride.1);
            }
            LayerKind::Upsample { factor } => {
                ch *= factor;
                cw *= factor;
            }
        }
    }
    let (oh, ow) = (ch, cw);

    let mut mask = SupportMap {
        h: oh,
        w: ow,
        mask: vec![false; oh * ow],
    };
    mask.mask[(oh / 2) * ow + ow / 2] = true;

    for (li, layer) in net.trunk.iter().enumerate().rev() {
        mask = propagate_back(layer, &mask, trunk_in_dims[li]);
    }

    // branch dims per layer (frame 1 path)
    let mut branch_in_dims = Vec::with_capacity(net.branch.len());
    let (mut bh, mut bw) = (h, w);
    for layer in &net.branch {
        branch_in_dims.push((bh, bw));
        if let LayerKind::Conv { stride, .. } = layer.kind {
            bh = bh.div_ceil(stride.0);
            bw = bw.div_ceil(stride.1);
        }
    }
    for (li, layer) in net.branch.iter().enumerate().rev() {
        mask = propagate_back(layer, &mask, branch_in_dims[li]);
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{linear_schedule, schedule_net};

    fn ones_erf(net: &NetworkSpec, size: usize) -> ErfMap {
        let params = constant_init::<f64>(net).unwrap();
        compute_erf(net, &params, (size, size), ErfProbe::<f64>::Ones).unwrap()
    }

    #[test]
    fn single_layer_erf_is_a_plateau() {
        // one 3x3 conv + head: all nine taps carry exactly one path, so
        // the normalized map is 1 on the 3x3 block and 0 elsewhere
        let net = linear_schedule(1, 1, 4, 3);
        let map = ones_erf(&net, 9);
        let c = map.center();
        for i in 0..9 {
            for j in 0..9 {
                let inside = (i as i64 - c.0 as i64).abs() <= 1 && (j as i64 - c.1 as i64).abs() <= 1;
                assert_eq!(
                    map.value(i, j),
                    if inside { 1.0 } else { 0.0 },
                    "at ({i},{j})"
                );
            }
        }
        let stats = measure_fwhm(&map).unwrap();
        assert!((stats.fwhm_row - 3.0).abs() < 1e-12, "plateau FWHM is 3");
        assert!((stats.fwhm_col - 3.0).abs() < 1e-12);
        assert_eq!(stats.gridding, 0.0);
    }

    #[test]
    fn two_layer_profile_matches_path_multiplicities() {
        // dilations 1 then 2: 1-D tap-offset multiplicities are
        // -3:1 -2:1 -1:2 0:1 1:2 2:1 3:1 (max 2 at +-1). The 2-D map is
        // the outer product f(x)f(y) normalized by its global max of 4,
        // so the global peaks sit at (+-1, +-1) and the central row is
        // f(x)*f(0)/4 = [.25 .25 .5 .25 .5 .25 .25].
        let net = linear_schedule(2, 1, 4, 3);
        let map = ones_erf(&net, 11);
        let c = map.center();
        assert_eq!(map.value(c.0 + 1, c.1 + 1), 1.0, "global peak off-center");
        let want = [0.25, 0.25, 0.5, 0.25, 0.5, 0.25, 0.25];
        for (off, &v) in (-3i64..=3).zip(want.iter()) {
            let got = map.value(c.0, (c.1 as i64 + off) as usize);
            assert!(
                (got - v).abs() < 1e-12,
                "offset {off}: got {got}, want {v}"
            );
        }
        // profile FWHM is measured against the profile's own max (0.5
        // here): the row plateaus at or above 0.25 across its 7-sample
        // support, so the interpolated width is 6.
        let stats = measure_fwhm(&map).unwrap();
        assert!((stats.fwhm_row - 6.0).abs() < 1e-9, "got {}", stats.fwhm_row);
    }

    #[test]
    fn erf_is_symmetric_and_normalized() {
        let net = linear_schedule(4, 1, 4, 3);
        let map = ones_erf(&net, 31);
        let (h, w) = map.dims();
        let max = map.values().iter().cloned().fold(0.0f64, f64::max);
        assert_eq!(max, 1.0, "normalized peak must be exactly 1");
        for i in 0..h {
            for j in 0..w {
                let v = map.value(i, j);
                assert!(
                    (v - map.value(h - 1 - i, j)).abs() < 1e-9,
                    "vertical flip at ({i},{j})"
                );
                assert!(
                    (v - map.value(i, w - 1 - j)).abs() < 1e-9,
                    "horizontal flip at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn erf_support_equals_the_oracle_on_small_nets() {
        for net in [
            linear_schedule(3, 1, 4, 3),
            linear_schedule(5, 2, 2, 3),
            schedule_net(&[1, 2, 4], 4, 3, "exp3"),
        ] {
            let size = net.theoretical_rf() as usize + 8;
            let map = ones_erf(&net, size);
            let oracle = support_oracle(&net, (size, size)).unwrap();
            assert_eq!((oracle.h, oracle.w), map.dims());
            for i in 0..oracle.h {
                for j in 0..oracle.w {
                    assert_eq!(
                        map.value(i, j) > 0.0,
                        oracle.get(i, j),
                        "net {} at ({i},{j})",
                        net.name
                    );
                }
            }
        }
    }

    #[test]
    fn support_oracle_single_dilated_layer() {
        let net = linear_schedule(1, 4, 4, 3); // one layer with d = 1+0*4 = 1 — need explicit dilation
        drop(net);
        let net = schedule_net(&[4], 4, 3, "d4");
        let oracle = support_oracle(&net, (11, 11)).unwrap();
        assert_eq!(oracle.count(), 9, "3x3 taps at dilation 4 touch 9 cells");
        let c = (11 / 2, 11 / 2);
        for i in 0..11 {
            for j in 0..11 {
                let on = (i as i64 - c.0 as i64).abs() % 4 == 0
                    && (i as i64 - c.0 as i64).abs() <= 4
                    && (j as i64 - c.1 as i64).abs() % 4 == 0
                    && (j as i64 - c.1 as i64).abs() <= 4;
                assert_eq!(oracle.get(i, j), on, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn support_width_matches_theoretical_rf() {
        for net in [
            linear_schedule(4, 1, 2, 3),
            schedule_net(&[1, 2, 4, 8], 2, 3, "exp4"),
            linear_schedule(6, 0, 2, 3),
        ] {
            let rf = net.theoretical_rf() as usize;
            let oracle = support_oracle(&net, (rf + 10, rf + 10)).unwrap();
            let (r0, r1, c0, c1) = oracle.bbox().unwrap();
            assert_eq!(r1 - r0 + 1, rf, "net {}", net.name);
            assert_eq!(c1 - c0 + 1, rf);
        }
    }

    #[test]
    fn gridding_linear_schedule_is_exactly_zero() {
        // step-1 dilations give gap-free tap sumsets; inside the half-max
        // box the smallest cell is ~0.28 of peak, far above eps
        let net = linear_schedule(10, 1, 2, 3);
        let map = ones_erf(&net, 131);
        assert_eq!(gridding_score(&map, GRIDDING_EPS).unwrap(), 0.0);
    }

    #[test]
    fn gridding_doubling_schedule_leaves_checkerboard_holes() {
        // all dilations even => odd offsets are unreachable: exact holes.
        // 1-D multiplicities are the (1,2,4,8,16) profile spread by 2x;
        // the half-max box spans [-46,46]^2 and odd-row or odd-column
        // cells inside it are 6440 of 93^2 = 0.744594...
        let net = schedule_net(&[2, 4, 8, 16, 32], 2, 3, "doubling");
        let map = ones_erf(&net, 127);
        let score = gridding_score(&map, GRIDDING_EPS).unwrap();
        assert!(
            (score - 6440.0 / 8649.0).abs() < 1e-9,
            "got {score}, want {}",
            6440.0 / 8649.0
        );
    }

    #[test]
    fn gridding_rejects_bad_eps() {
        let net = linear_schedule(2, 1, 2, 3);
        let map = ones_erf(&net, 15);
        assert!(gridding_score(&map, 0.0).is_err());
        assert!(gridding_score(&map, 1.5).is_err());
    }

    #[test]
    fn fwhm_on_too_small_probe_is_an_error() {
        let net = linear_schedule(3, 2, 2, 3);
        // support is 19 wide; a 13-px probe never falls below half max
        let params = constant_init::<f64>(&net).unwrap();
        let map = compute_erf(&net, &params, (13, 13), ErfProbe::<f64>::Ones).unwrap();
        let err = measure_fwhm(&map).unwrap_err();
        assert!(err.to_string().contains("larger probe"), "{err}");
    }

    #[test]
    fn fwhm_of_a_synthetic_gaussian_profile() {
        // sampled Gaussian, sigma=10: analytic FWHM = 2*sqrt(2 ln 2)*10
        let sigma = 10.0f64;
        let profile: Vec<f64> = (-40..=40)
            .map(|x| (-(x as f64).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect();
        let fwhm = fwhm_profile(&profile).unwrap();
        let want = 2.0 * (2.0 * (2.0f64).ln()).sqrt() * sigma;
        assert!((fwhm - want).abs() < 0.1, "got {fwhm}, want {want}");
    }

    #[test]
    fn constant_init_values_and_guard() {
        let net = linear_schedule(2, 1, 4, 3);
        let params = constant_init::<f64>(&net).unwrap();
        let first = &params.kernels[&1];
        assert_eq!(first.weights[0], 1.0 / (9.0 * 6.0)); // 3x3, 6 input channels
        assert!(first.bias.iter().all(|&b| b == 0.0));
        assert!(constant_init_value::<f64>(&net, 0.0).is_err());
        assert!(constant_init_value::<f64>(&net, -0.1).is_err());
        // positive probe stays positive through the stack
        let ones = Tensor4::<f64>::filled(1, 9, 9, 3, 1.0).unwrap();
        let (out, _) = forward(&net, &params, &ones, &ones, false).unwrap();
        let c = out.at(0, 4, 4, 0);
        assert!(c > 0.0, "central output must be positive, got {c}");
    }

    #[test]
    fn probe_adjustment_respects_divisor_and_oddness() {
        let b1 = crate::net::ddcnet_b1();
        assert_eq!(adjust_probe(&b1, 66, 67), (64, 64));
        let b0 = crate::net::ddcnet_b0();
        assert_eq!(adjust_probe(&b0, 64, 65), (63, 65));
    }

    #[test]
    fn erf_exports_are_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let net = linear_schedule(2, 1, 2, 3);
        let map = ones_erf(&net, 15);
        let pgm = dir.path().join("erf.pgm");
        map.write_pgm(&pgm).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n15 15\n65535\n"));
        assert_eq!(bytes.len(), 15 + 15 * 15 * 2);

        let csv = dir.path().join("erf.csv");
        map.write_profile_csv(&csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("offset,row,col\n"));
        assert_eq!(text.lines().count(), 16);
    }
}
