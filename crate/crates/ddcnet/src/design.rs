//! Receptive-field-guided depth selection and dilation-schedule
//! comparison.
//!
//! The design loop grows a linear-dilation trunk one layer at a time and
//! measures each candidate's effective receptive field until its FWHM
//! covers the flow magnitudes seen in training data: the FWHM is a
//! diameter, a flow magnitude a radius, so the default target is twice
//! the coverage percentile's magnitude. All measurements run in f64 —
//! constant-init gradients of deep stacks underflow f32.

use std::path::Path;

use crate::erf::{compute_erf, constant_init, measure_fwhm, ErfMap, ErfProbe};
use crate::flow::FlowField;
use crate::net::{linear_schedule, schedule_net};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// FlowHistogram
// ---------------------------------------------------------------------------

/// Binned distribution of flow-vector magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowHistogram {
    bin_edges: Vec<f64>,
    counts: Vec<u64>,
    total: u64,
}

impl FlowHistogram {
    /// Builds from explicit edges (strictly increasing, one more than
    /// the count slots).
    pub fn with_edges(bin_edges: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        if bin_edges.len() != counts.len() + 1 || counts.is_empty() {
            return Err(Error::shape(format!(
                "{} edges do not delimit {} bins",
                bin_edges.len(),
                counts.len()
            )));
        }
        if bin_edges.windows(2).any(|e| !(e[0] < e[1])) {
            return Err(Error::domain("bin edges must be strictly increasing"));
        }
        let total = counts.iter().sum();
        Ok(FlowHistogram {
            bin_edges,
            counts,
            total,
        })
    }

    /// Two-bin stand-in for a measured training distribution: 99% of the
    /// mass at or below `magnitude`, 1% in a tail just above, so the
    /// 0.99-coverage magnitude is exactly `magnitude`.
    pub fn synthetic(magnitude: f64) -> Result<Self> {
        if !(magnitude > 0.0) || !magnitude.is_finite() {
            return Err(Error::domain(format!(
                "synthetic histogram needs a positive magnitude, got {magnitude}"
            )));
        }
        Self::with_edges(vec![0.0, magnitude, 1.25 * magnitude], vec![99, 1])
    }

    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }
}

/// Histogram of `sqrt(u^2 + v^2)` over the valid pixels of all fields,
/// in uniform bins spanning `[0, floor(max)+1]` so every value lies
/// strictly below the top edge.
pub fn magnitude_histogram(flows: &[FlowField], bins: usize) -> Result<FlowHistogram> {
    if flows.is_empty() {
        return Err(Error::usage("magnitude histogram needs at least one flow field"));
    }
    if bins == 0 {
        return Err(Error::domain("histogram needs at least one bin"));
    }
    let mut max_mag = 0.0f64;
    let mut any_valid = false;
    for f in flows {
        let (h, w) = f.dims();
        for i in 0..h {
            for j in 0..w {
                if f.is_valid(i, j) {
                    any_valid = true;
                    max_mag = max_mag.max(f.magnitude(i, j) as f64);
                }
            }
        }
    }
    if !any_valid {
        return Err(Error::domain("no valid pixels in any input field"));
    }
    let top = max_mag.floor() + 1.0;
    let edges: Vec<f64> = (0..=bins).map(|b| top * b as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for f in flows {
        let (h, w) = f.dims();
        for i in 0..h {
            for j in 0..w {
                if !f.is_valid(i, j) {
                    continue;
                }
                let m = f.magnitude(i, j) as f64;
                let idx = ((m / top * bins as f64) as usize).min(bins - 1);
                counts[idx] += 1;
            }
        }
    }
    FlowHistogram::with_edges(edges, counts)
}

/// Smallest bin edge `m` such that at least fraction `p` of the mass
/// lies at or below `m` (conservative: returns the covering bin's upper
/// edge).
pub fn coverage_magnitude(hist: &FlowHistogram, p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::domain(format!("percentile must be in (0, 1], got {p}")));
    }
    if hist.total == 0 {
        return Err(Error::domain("histogram is empty"));
    }
    let need = p * hist.total as f64;
    let mut cum = 0u64;
    let mut last_occupied = hist.bin_edges[1];
    for (b, &c) in hist.counts.iter().enumerate() {
        cum += c;
        if c > 0 {
            last_occupied = hist.bin_edges[b + 1];
        }
        if cum as f64 >= need {
            return Ok(hist.bin_edges[b + 1]);
        }
    }
    // float slack at p = 1.0 can leave the loop without tripping
    Ok(last_occupied)
}

// ---------------------------------------------------------------------------
// Depth design
// ---------------------------------------------------------------------------

/// Knobs of the depth-selection loop.
#[derive(Debug, Clone)]
pub struct DesignCriteria {
    /// Fraction of pixels whose motion the ERF must cover.
    pub coverage_percentile: f64,
    /// FWHM target as a multiple of the coverage magnitude. The default
    /// of 2 converts the magnitude (a radius) into a width.
    pub coverage_factor: f64,
    /// Dilation increment per layer of the candidate trunks.
    pub dilation_step: usize,
    /// Largest candidate depth before giving up.
    pub max_depth: usize,
    /// Filters per candidate layer. The ERF of a constant-init network
    /// is filter-count invariant, so a small value costs nothing.
    pub filters: usize,
}

impl Default for DesignCriteria {
    fn default() -> Self {
        DesignCriteria {
            coverage_percentile: 0.99,
            coverage_factor: 2.0,
            dilation_step: 1,
            max_depth: 30,
            filters: 4,
        }
    }
}

impl DesignCriteria {
    fn validate(&self) -> Result<()> {
        if !(self.coverage_percentile > 0.0 && self.coverage_percentile <= 1.0) {
            return Err(Error::domain(format!(
                "coverage percentile must be in (0, 1], got {}",
                self.coverage_percentile
            )));
        }
        if !(self.coverage_factor > 0.0) || !self.coverage_factor.is_finite() {
            return Err(Error::domain("coverage factor must be positive"));
        }
        if self.max_depth == 0 || self.filters == 0 {
            return Err(Error::domain("max depth and filters must be >= 1"));
        }
        Ok(())
    }
}

/// One probed candidate depth.
#[derive(Debug, Clone)]
pub struct DesignRow {
    pub depth: usize,
    pub theoretical_rf: u64,
    pub fwhm: f64,
    pub gridding: f64,
}

/// Outcome of the design loop: every probed depth plus the first one
/// whose FWHM met the target (none when max_depth was exhausted).
#[derive(Debug, Clone)]
pub struct DesignReport {
    pub coverage_magnitude: f64,
    pub target_fwhm: f64,
    pub rows: Vec<DesignRow>,
    pub chosen_depth: Option<usize>,
}

impl DesignReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.depth.to_string(),
                    r.theoretical_rf.to_string(),
                    format!("{:.3}", r.fwhm),
                    format!("{:.6}", r.gridding),
                    (self.chosen_depth == Some(r.depth)).to_string(),
                ]
            })
            .collect();
        crate::io::write_csv(
            path,
            &["depth", "theoretical_rf", "fwhm", "gridding", "chosen"],
            &rows,
        )
    }
}

/// Odd probe length with ~25% margin past the receptive field, capped
/// to keep deep sweeps affordable.
pub fn probe_for(rf: u64) -> usize {
    let p = (rf + rf / 4).clamp(9, 511) as usize;
    if p % 2 == 0 {
        p - 1
    } else {
        p
    }
}

/// Grows a linear-dilation trunk until its measured FWHM reaches
/// `coverage_factor` times the `coverage_percentile` flow magnitude,
/// recording (theoretical RF, FWHM, gridding) for every probed depth.
pub fn design_depth(criteria: &DesignCriteria, hist: &FlowHistogram) -> Result<DesignReport> {
    design_depth_with_maps(criteria, hist).map(|(report, _)| report)
}

/// Same loop, also returning each probed depth's ERF map for rendering.
pub fn design_depth_with_maps(
    criteria: &DesignCriteria,
    hist: &FlowHistogram,
) -> Result<(DesignReport, Vec<ErfMap>)> {
    criteria.validate()?;
    let coverage = coverage_magnitude(hist, criteria.coverage_percentile)?;
    let target = criteria.coverage_factor * coverage;
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    let mut chosen = None;
    for depth in 1..=criteria.max_depth {
        let net = linear_schedule(depth, criteria.dilation_step, criteria.filters, 3);
        net.validate()?;
        let params = constant_init::<f64>(&net)?;
        let rf = net.theoretical_rf();
        let probe = probe_for(rf);
        let map = compute_erf(&net, &params, (probe, probe), ErfProbe::Ones)?;
        let stats = measure_fwhm(&map)?;
        rows.push(DesignRow {
            depth,
            theoretical_rf: rf,
            fwhm: stats.fwhm_row,
            gridding: stats.gridding,
        });
        maps.push(map);
        if stats.fwhm_row >= target {
            chosen = Some(depth);
            break;
        }
    }
    Ok((
        DesignReport {
            coverage_magnitude: coverage,
            target_fwhm: target,
            rows,
            chosen_depth: chosen,
        },
        maps,
    ))
}

/// Renders the probed ERF maps side by side into one 16-bit PGM, each
/// panel centered on a shared height with a one-pixel white separator.
pub fn write_erf_strip(maps: &[ErfMap], path: &Path) -> Result<()> {
    if maps.is_empty() {
        return Err(Error::usage("no maps to render"));
    }
    let max_h = maps.iter().map(|m| m.dims().0).max().unwrap();
    let total_w: usize = maps.iter().map(|m| m.dims().1).sum::<usize>() + maps.len() - 1;
    let mut strip = vec![0.0f64; max_h * total_w];
    let mut x0 = 0;
    for (k, map) in maps.iter().enumerate() {
        let (h, w) = map.dims();
        let y0 = (max_h - h) / 2;
        for i in 0..h {
            for j in 0..w {
                strip[(y0 + i) * total_w + x0 + j] = map.value(i, j);
            }
        }
        x0 += w;
        if k + 1 < maps.len() {
            for i in 0..max_h {
                strip[i * total_w + x0] = 1.0;
            }
            x0 += 1;
        }
    }
    crate::io::write_pgm16(path, &strip, total_w, max_h)
}

// ---------------------------------------------------------------------------
// Schedule comparison
// ---------------------------------------------------------------------------

/// One dilation schedule's measurements at a fixed depth and width.
#[derive(Debug, Clone)]
pub struct ScheduleRow {
    pub name: String,
    pub dilations: Vec<usize>,
    pub params: u64,
    pub theoretical_rf: u64,
    pub fwhm: f64,
    pub gridding: f64,
}

/// Dead-cell threshold for schedule comparison. Coarser than the
/// default: base-2 exponential schedules are technically gap-free (every
/// offset is a sum of distinct powers of two), but their off-axis tap
/// multiplicities collapse by powers of two, so near-dead cells only
/// show up above the 1e-3 level.
pub const COMPARE_EPS: f64 = 0.02;

/// Measures linear (given step), exponential (base 2) and constant
/// (all-1) dilation schedules at equal depth and filters, isolating the
/// schedule's effect on RF growth and gridding.
pub fn compare_schedules(
    depth: usize,
    step: usize,
    filters: usize,
    eps: f64,
) -> Result<Vec<ScheduleRow>> {
    if depth < 2 {
        return Err(Error::domain("schedule comparison needs depth >= 2"));
    }
    let linear: Vec<usize> = (0..depth).map(|l| 1 + l * step).collect();
    let exponential: Vec<usize> = (0..depth).map(|l| 1usize << l).collect();
    let constant: Vec<usize> = vec![1; depth];
    let mut out = Vec::new();
    for (name, dil) in [
        (format!("linear-step{step}"), linear),
        ("exponential-base2".to_string(), exponential),
        ("constant".to_string(), constant),
    ] {
        let net = schedule_net(&dil, filters, 3, &name);
        net.validate()?;
        let params = constant_init::<f64>(&net)?;
        let rf = net.theoretical_rf();
        let probe = probe_for(rf);
        let map = compute_erf(&net, &params, (probe, probe), ErfProbe::Ones)?;
        let stats = measure_fwhm(&map)?;
        let gridding = crate::erf::gridding_score(&map, eps)?;
        out.push(ScheduleRow {
            name,
            dilations: dil,
            params: net.param_count(),
            theoretical_rf: rf,
            fwhm: stats.fwhm_row,
            gridding,
        });
    }
    Ok(out)
}

pub fn write_schedule_csv(rows: &[ScheduleRow], path: &Path) -> Result<()> {
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.dilations
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
                r.params.to_string(),
                r.theoretical_rf.to_string(),
                format!("{:.3}", r.fwhm),
                format!("{:.6}", r.gridding),
            ]
        })
        .collect();
    crate::io::write_csv(
        path,
        &["schedule", "dilations", "params", "theoretical_rf", "fwhm", "gridding"],
        &out,
    )
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
