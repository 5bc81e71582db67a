//! Dense optical-flow fields: endpoint-error metrics, `.flo` file I/O
//! and color-wheel visualization.
//!
//! Fields are `f32` (the interchange precision of the `.flo` format).
//! A pixel is *invalid* when its stored components exceed the 1e9
//! sentinel threshold; metrics skip invalid ground-truth pixels.

use std::io::Read as _;
use std::path::Path;

use crate::tensor::{Scalar, Tensor4};
use crate::{Error, Result};

/// Magnitude above which a stored component marks the pixel invalid.
pub const UNKNOWN_THRESH: f32 = 1e9;
/// Canonical component value written for invalid pixels.
pub const UNKNOWN_FLOW: f32 = 1e10;

// ---------------------------------------------------------------------------
// FlowField
// ---------------------------------------------------------------------------

/// A dense `(u, v)` displacement field with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    h: usize,
    w: usize,
    u: Vec<f32>,
    v: Vec<f32>,
    valid: Vec<bool>,
}

impl FlowField {
    /// All-zero, all-valid field.
    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape("flow field dims must be >= 1"));
        }
        Ok(FlowField {
            h,
            w,
            u: vec![0.0; h * w],
            v: vec![0.0; h * w],
            valid: vec![true; h * w],
        })
    }

    /// Constant translation field.
    pub fn constant(h: usize, w: usize, u: f32, v: f32) -> Result<Self> {
        let mut f = Self::zeros(h, w)?;
        f.u.fill(u);
        f.v.fill(v);
        Ok(f)
    }

    /// Builds a field from flat row-major component buffers. Pixels with
    /// sentinel-magnitude components are marked invalid.
    pub fn from_components(h: usize, w: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || u.len() != h * w || v.len() != h * w {
            return Err(Error::shape(format!(
                "component buffers of {}/{} values cannot view as {h}x{w}",
                u.len(),
                v.len()
            )));
        }
        let valid = u
            .iter()
            .zip(&v)
            .map(|(&a, &b)| a.abs() < UNKNOWN_THRESH && b.abs() < UNKNOWN_THRESH && a.is_finite() && b.is_finite())
            .collect();
        Ok(FlowField { h, w, u, v, valid })
    }

    /// Extracts one batch entry of a network output tensor (channel 0 is
    /// u, channel 1 is v); all pixels valid.
    pub fn from_output<S: Scalar>(out: &Tensor4<S>, batch: usize) -> Result<Self> {
        let (n, h, w, c) = out.shape();
        if c != 2 {
            return Err(Error::shape(format!("flow tensors have 2 channels, got {c}")));
        }
        if batch >= n {
            return Err(Error::shape(format!("batch index {batch} out of {n}")));
        }
        let mut f = Self::zeros(h, w)?;
        for i in 0..h {
            for j in 0..w {
                f.u[i * w + j] = out.at(batch, i, j, 0).to_f64_lossy() as f32;
                f.v[i * w + j] = out.at(batch, i, j, 1).to_f64_lossy() as f32;
            }
        }
        Ok(f)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    pub fn uv(&self, i: usize, j: usize) -> (f32, f32) {
        (self.u[i * self.w + j], self.v[i * self.w + j])
    }

    #[inline]
    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, u: f32, v: f32) {
        let idx = i * self.w + j;
        self.u[idx] = u;
        self.v[idx] = v;
        self.valid[idx] = true;
    }

    /// Marks a pixel invalid, storing the canonical sentinel components.
    pub fn set_invalid(&mut self, i: usize, j: usize) {
        let idx = i * self.w + j;
        self.u[idx] = UNKNOWN_FLOW;
        self.v[idx] = UNKNOWN_FLOW;
        self.valid[idx] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&m| m).count()
    }

    #[inline]
    pub fn magnitude(&self, i: usize, j: usize) -> f32 {
        let (u, v) = self.uv(i, j);
        u.hypot(v)
    }

    /// Largest magnitude over valid pixels (0 when none are valid).
    pub fn max_magnitude(&self) -> f32 {
        let mut m = 0.0f32;
        for i in 0..self.h {
            for j in 0..self.w {
                if self.is_valid(i, j) {
                    m = m.max(self.magnitude(i, j));
                }
            }
        }
        m
    }

    pub fn u_data(&self) -> &[f32] {
        &self.u
    }

    pub fn v_data(&self) -> &[f32] {
        &self.v
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Per-pixel endpoint error `|f_est - f_gt|`, masked by ground-truth
/// validity (estimate pixels are always network output, hence valid).
#[derive(Debug, Clone)]
pub struct ErrorMap {
    pub h: usize,
    pub w: usize,
    pub ee: Vec<f32>,
    pub valid: Vec<bool>,
}

/// Euclidean endpoint error per pixel.
pub fn endpoint_error_map(est: &FlowField, gt: &FlowField) -> Result<ErrorMap> {
    if est.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "flow dims differ: {:?} vs {:?}",
            est.dims(),
            gt.dims()
        )));
    }
    let (h, w) = est.dims();
    let mut ee = vec![0.0f32; h * w];
    let mut valid = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let ok = gt.is_valid(i, j) && est.is_valid(i, j);
            valid[i * w + j] = ok;
            if ok {
                let (ue, ve) = est.uv(i, j);
                let (ug, vg) = gt.uv(i, j);
                ee[i * w + j] = (ue - ug).hypot(ve - vg);
            }
        }
    }
    Ok(ErrorMap { h, w, ee, valid })
}

/// Average endpoint error over valid pixels.
pub fn aee(est: &FlowField, gt: &FlowField) -> Result<f64> {
    let map = endpoint_error_map(est, gt)?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (e, &ok) in map.ee.iter().zip(&map.valid) {
        if ok {
            sum += *e as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::domain("no valid pixels to average over"));
    }
    Ok(sum / count as f64)
}

/// Fraction of valid pixels that are flow outliers: endpoint error of at
/// least 3 px *and* at least 5% of the ground-truth magnitude.
pub fn fl_all(est: &FlowField, gt: &FlowField) -> Result<f64> {
    let map = endpoint_error_map(est, gt)?;
    let mut outliers = 0usize;
    let mut count = 0usize;
    let (h, w) = gt.dims();
    for i in 0..h {
        for j in 0..w {
            if !map.valid[i * w + j] {
                continue;
            }
            count += 1;
            let e = map.ee[i * w + j];
            if e >= 3.0 && e >= 0.05 * gt.magnitude(i, j) {
                outliers += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::domain("no valid pixels to count over"));
    }
    Ok(outliers as f64 / count as f64)
}

// ---------------------------------------------------------------------------
// .flo I/O
// ---------------------------------------------------------------------------

const FLO_MAGIC: f32 = 202021.25;

/// Writes the field in the standard `.flo` layout: the 202021.25 f32
/// sentinel, width and height as i32, then row-major interleaved (u, v)
/// f32 pairs, all little-endian. Invalid pixels are stored as the
/// canonical 1e10 components.
pub fn write_flo(field: &FlowField, path: &Path) -> Result<()> {
    let (h, w) = field.dims();
    let mut buf = Vec::with_capacity(12 + h * w * 8);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for i in 0..h {
        for j in 0..w {
            let (u, v) = if field.is_valid(i, j) {
                field.uv(i, j)
            } else {
                (UNKNOWN_FLOW, UNKNOWN_FLOW)
            };
            buf.extend_from_slice(&u.to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::io::atomic_write(path, &buf)
}

/// Reads a `.flo` file; malformed content is reported with its byte
/// offset.
pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let bad = |offset: usize, msg: String| Error::BadData {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if buf.len() < 12 {
        return Err(bad(buf.len(), "file too short for a .flo header".into()));
    }
    let magic = f32::from_le_bytes(buf[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(bad(0, format!("bad magic {magic}, want {FLO_MAGIC}")));
    }
    let w = i32::from_le_bytes(buf[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(buf[8..12].try_into().unwrap());
    if w <= 0 || w > 1_000_000 {
        return Err(bad(4, format!("unreasonable width {w}")));
    }
    if h <= 0 || h > 1_000_000 {
        return Err(bad(8, format!("unreasonable height {h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + w * h * 8;
    if buf.len() != need {
        return Err(bad(
            buf.len().min(need),
            format!("expected {need} bytes for {w}x{h}, file has {}", buf.len()),
        ));
    }
    let mut u = Vec::with_capacity(h * w);
    let mut v = Vec::with_capacity(h * w);
    for px in 0..h * w {
        let off = 12 + px * 8;
        u.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
        v.push(f32::from_le_bytes(buf[off + 4..off + 8].try_into().unwrap()));
    }
    FlowField::from_components(h, w, u, v)
}

// ---------------------------------------------------------------------------
// Color rendering
// ---------------------------------------------------------------------------

/// Plain byte RGB image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        crate::io::write_ppm(path, &self.data, self.w, self.h)
    }
}

/// Number of hue stops on the flow color wheel.
const NCOLS: usize = 55;

/// The 55-hue wheel: six arcs (red-yellow 15, yellow-green 6, green-cyan
/// 4, cyan-blue 11, blue-magenta 13, magenta-red 6 stops) as RGB
/// fractions in [0, 1].
fn color_wheel() -> [[f64; 3]; NCOLS] {
    let mut wheel = [[0.0; 3]; NCOLS];
    let mut col = 0;
    let (ry, yg, gc, cb, bm, mr) = (15, 6, 4, 11, 13, 6);
    for i in 0..ry {
        wheel[col] = [1.0, i as f64 / ry as f64, 0.0];
        col += 1;
    }
    for i in 0..yg {
        wheel[col] = [1.0 - i as f64 / yg as f64, 1.0, 0.0];
        col += 1;
    }
    for i in 0..gc {
        wheel[col] = [0.0, 1.0, i as f64 / gc as f64];
        col += 1;
    }
    for i in 0..cb {
        wheel[col] = [0.0, 1.0 - i as f64 / cb as f64, 1.0];
        col += 1;
    }
    for i in 0..bm {
        wheel[col] = [i as f64 / bm as f64, 0.0, 1.0];
        col += 1;
    }
    for i in 0..mr {
        wheel[col] = [1.0, 0.0, 1.0 - i as f64 / mr as f64];
        col += 1;
    }
    debug_assert_eq!(col, NCOLS);
    wheel
}

/// Continuous wheel position of a direction, in `[0, NCOLS-1]`; rotating
/// the vector by 180° shifts the position by exactly (NCOLS-1)/2.
fn wheel_pos(fx: f64, fy: f64) -> f64 {
    let a = (-fy).atan2(-fx) / std::f64::consts::PI; // [-1, 1]
    (a + 1.0) / 2.0 * (NCOLS - 1) as f64
}

fn pixel_color(wheel: &[[f64; 3]; NCOLS], fx: f64, fy: f64) -> [u8; 3] {
    let rad = fx.hypot(fy);
    let fk = wheel_pos(fx, fy);
    let k0 = (fk.floor() as usize).min(NCOLS - 1);
    let k1 = (k0 + 1) % NCOLS;
    let f = fk - k0 as f64;
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let mut col = (1.0 - f) * wheel[k0][ch] + f * wheel[k1][ch];
        if rad <= 1.0 {
            col = 1.0 - rad * (1.0 - col); // desaturate toward white at low magnitude
        } else {
            col *= 0.75; // out of range: dim
        }
        out[ch] = (255.0 * col).round() as u8;
    }
    out
}

/// Renders the field with the standard flow color wheel: hue encodes
/// direction, saturation encodes magnitude relative to `max_magnitude`
/// (the field's own maximum when `None`). Zero flow renders white,
/// invalid pixels black.
pub fn flow_to_color(field: &FlowField, max_magnitude: Option<f32>) -> RgbImage {
    let wheel = color_wheel();
    let (h, w) = field.dims();
    let maxrad = match max_magnitude {
        Some(m) if m > 0.0 => m as f64,
        Some(_) => 1.0,
        None => {
            let m = field.max_magnitude() as f64;
            if m > 0.0 {
                m
            } else {
                1.0 // all-zero field: any positive scale renders white
            }
        }
    };
    let mut data = vec![0u8; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            if !field.is_valid(i, j) {
                continue; // leave black
            }
            let (u, v) = field.uv(i, j);
            let rgb = pixel_color(&wheel, u as f64 / maxrad, v as f64 / maxrad);
            data[(i * w + j) * 3..(i * w + j) * 3 + 3].copy_from_slice(&rgb);
        }
    }
    RgbImage { h, w, data }
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
