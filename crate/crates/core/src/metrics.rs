//! Verification scores for precipitation nowcasts.
//!
//! Categorical scores (FAR, CSI, HSS) come from contingency tables summed
//! over pixels, sequences and lead times. Pooled CSI max-pools both fields
//! over non-overlapping blocks first. FSS uses centered neighborhood
//! fractions at native resolution. Probabilistic skill is the Gaussian CRPS
//! with moments fitted to the ensemble; thresholded scores use the ensemble
//! mean.
//!
//! Undefined scores (CSI with no events forecast or observed, FSS with no
//! events in either field) are `None` and are left out of threshold means.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SEVIR_THRESHOLDS: [f64; 6] = [16.0, 74.0, 133.0, 160.0, 181.0, 219.0];
pub const POOL_BLOCK: usize = 16;
pub const FSS_WINDOW: usize = 16;

/// Strictly increasing intensity thresholds in data units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet(Vec<f64>);

impl ThresholdSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("thresholds", "empty threshold set"));
        }
        if values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("thresholds", "thresholds must be strictly increasing"));
        }
        Ok(ThresholdSet(values))
    }

    /// The SEVIR VIL thresholds rescaled from 0..255 to 0..1.
    pub fn sevir_unit() -> Self {
        ThresholdSet(SEVIR_THRESHOLDS.iter().map(|t| t / 255.0).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn binarize(field: &[f64], u: f64) -> Vec<bool> {
    field.iter().map(|&v| v > u).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyTable {
    pub fn from_masks(pred: &[bool], obs: &[bool]) -> Result<Self> {
        let mut t = ContingencyTable::default();
        t.accumulate(pred, obs)?;
        Ok(t)
    }

    pub fn accumulate(&mut self, pred: &[bool], obs: &[bool]) -> Result<()> {
        if pred.len() != obs.len() {
            return Err(Error::shape("accumulate", &[pred.len()], &[obs.len()]));
        }
        for (&p, &o) in pred.iter().zip(obs) {
            match (p, o) {
                (true, true) => self.hits += 1,
                (true, false) => self.false_alarms += 1,
                (false, true) => self.misses += 1,
                (false, false) => self.correct_negatives += 1,
            }
        }
        Ok(())
    }

    /// Thresholds both fields at `u` and accumulates without materializing masks.
    fn accumulate_fields(&mut self, pred: &[f64], obs: &[f64], u: f64) {
        for (&p, &o) in pred.iter().zip(obs) {
            match (p > u, o > u) {
                (true, true) => self.hits += 1,
                (true, false) => self.false_alarms += 1,
                (false, true) => self.misses += 1,
                (false, false) => self.correct_negatives += 1,
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    /// `F/(H+F)`, 0 when nothing was forecast.
    pub fn far(&self) -> f64 {
        let d = self.hits + self.false_alarms;
        if d == 0 {
            0.0
        } else {
            self.false_alarms as f64 / d as f64
        }
    }

    /// `H/(H+M+F)`, undefined when there are no events in either field.
    pub fn csi(&self) -> Option<f64> {
        let d = self.hits + self.misses + self.false_alarms;
        (d > 0).then(|| self.hits as f64 / d as f64)
    }

    /// Heidke skill score, 0 when the denominator vanishes.
    pub fn hss(&self) -> f64 {
        let (h, m, f, c) = (
            self.hits as f64,
            self.misses as f64,
            self.false_alarms as f64,
            self.correct_negatives as f64,
        );
        let d = (h + m) * (m + c) + (h + f) * (f + c);
        if d == 0.0 {
            0.0
        } else {
            2.0 * (h * c - m * f) / d
        }
    }
}

impl Add for ContingencyTable {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ContingencyTable {
            hits: self.hits + o.hits,
            misses: self.misses + o.misses,
            false_alarms: self.false_alarms + o.false_alarms,
            correct_negatives: self.correct_negatives + o.correct_negatives,
        }
    }
}

impl AddAssign for ContingencyTable {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Max over non-overlapping `block×block` tiles of the trailing two axes.
/// Extents that are not multiples of `block` are replicate-padded first.
pub fn maxpool(field: &Tensor, block: usize) -> Result<Tensor> {
    let s = field.shape();
    if s.len() < 2 || block == 0 {
        return Err(Error::invalid("maxpool", format!("need [.., H, W] and block > 0, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (ph, pw) = (h.div_ceil(block), w.div_ceil(block));
    let lead: usize = s[..s.len() - 2].iter().product();
    let mut out = Vec::with_capacity(lead * ph * pw);
    for plane in field.data().chunks(h * w) {
        for bi in 0..ph {
            for bj in 0..pw {
                let mut m = f64::NEG_INFINITY;
                // Replicate padding never adds new values, so clamping indices is enough.
                for i in bi * block..(bi * block + block).min(h) {
                    for j in bj * block..(bj * block + block).min(w) {
                        m = m.max(plane[i * w + j]);
                    }
                }
                out.push(m);
            }
        }
    }
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend([ph, pw]);
    Tensor::new(shape, out)
}

/// Neighborhood exceedance fractions over an `n×n` window starting at
/// offset `-n/2`, clipped to the grid.
pub fn neighborhood_fractions(mask: &[bool], h: usize, w: usize, n: usize) -> Vec<f64> {
    // Summed-area table with a zero border.
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row = 0u32;
        for j in 0..w {
            row += mask[i * w + j] as u32;
            sat[(i + 1) * (w + 1) + j + 1] = sat[i * (w + 1) + j + 1] + row;
        }
    }
    let half = n / 2;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let (r0, r1) = (i.saturating_sub(half), (i + n - half).min(h));
        for j in 0..w {
            let (c0, c1) = (j.saturating_sub(half), (j + n - half).min(w));
            let count = sat[r1 * (w + 1) + c1] + sat[r0 * (w + 1) + c0]
                - sat[r0 * (w + 1) + c1]
                - sat[r1 * (w + 1) + c0];
            out.push(count as f64 / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    out
}

/// Numerator and denominator of FSS, summable across fields.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FssParts {
    pub mse: f64,
    pub reference: f64,
}

impl FssParts {
    pub fn from_masks(pred: &[bool], obs: &[bool], h: usize, w: usize, n: usize) -> Result<Self> {
        if pred.len() != h * w || obs.len() != h * w {
            return Err(Error::shape("fss", &[h, w], &[pred.len(), obs.len()]));
        }
        let sf = neighborhood_fractions(pred, h, w, n);
        let so = neighborhood_fractions(obs, h, w, n);
        let mut p = FssParts::default();
        for (a, b) in sf.iter().zip(&so) {
            p.mse += (a - b) * (a - b);
            p.reference += a * a + b * b;
        }
        Ok(p)
    }

    /// `1 − Σ(S_f−S_o)²/(ΣS_f²+ΣS_o²)`, undefined when both fields are empty.
    pub fn score(&self) -> Option<f64> {
        (self.reference > 0.0).then(|| 1.0 - self.mse / self.reference)
    }
}

impl Add for FssParts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        FssParts { mse: self.mse + o.mse, reference: self.reference + o.reference }
    }
}

impl AddAssign for FssParts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

pub fn fss(pred: &[bool], obs: &[bool], h: usize, w: usize, n: usize) -> Result<Option<f64>> {
    Ok(FssParts::from_masks(pred, obs, h, w, n)?.score())
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Closed-form CRPS of `N(mu, sigma²)` against observation `x`.
pub fn crps_gaussian(x: f64, mu: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return (x - mu).abs();
    }
    let z = (x - mu) / sigma;
    sigma * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z) - 1.0 / PI.sqrt())
}

fn check_members(members: &[Tensor]) -> Result<&[usize]> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("ensemble", "need at least one member"))?;
    for m in members {
        if m.shape() != first.shape() {
            return Err(Error::shape("ensemble", first.shape(), m.shape()));
        }
    }
    Ok(first.shape())
}

pub fn ensemble_mean(members: &[Tensor]) -> Result<Tensor> {
    let shape = check_members(members)?.to_vec();
    let n = members.len() as f64;
    let mut acc = vec![0.0; members[0].len()];
    for m in members {
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    Tensor::new(shape, acc.into_iter().map(|v| v / n).collect())
}

/// Sum of per-pixel Gaussian CRPS with population-std moments.
fn crps_sum(truth: &[f64], members: &[Tensor]) -> f64 {
    let n = members.len() as f64;
    let mut total = 0.0;
    for (i, &x) in truth.iter().enumerate() {
        let mu = members.iter().map(|m| m.data()[i]).sum::<f64>() / n;
        let var = members.iter().map(|m| (m.data()[i] - mu).powi(2)).sum::<f64>() / n;
        total += crps_gaussian(x, mu, var.sqrt());
    }
    total
}

/// Mean Gaussian CRPS over all pixels and lead times.
pub fn crps_ensemble(truth: &Tensor, members: &[Tensor]) -> Result<f64> {
    let shape = check_members(members)?;
    if shape != truth.shape() {
        return Err(Error::shape("crps_ensemble", truth.shape(), shape));
    }
    Ok(crps_sum(truth.data(), members) / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub far: f64,
    pub csi: Option<f64>,
    pub hss: f64,
    pub csi_p16: Option<f64>,
    pub fss_p16: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Cell {
    table: ContingencyTable,
    pooled: ContingencyTable,
    fss: FssParts,
}

impl Add for Cell {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Cell { table: self.table + o.table, pooled: self.pooled + o.pooled, fss: self.fss + o.fss }
    }
}

impl Cell {
    fn scores(&self) -> Scores {
        Scores {
            far: self.table.far(),
            csi: self.table.csi(),
            hss: self.table.hss(),
            csi_p16: self.pooled.csi(),
            fss_p16: self.fss.score(),
        }
    }
}

/// Unweighted means over thresholds; `None` when no threshold is defined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub csi_m: Option<f64>,
    pub hss_m: f64,
    pub far_m: f64,
    pub csi_p16_m: Option<f64>,
    pub fss_m_p16: Option<f64>,
    pub crps: f64,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn aggregate(per_threshold: &[Scores], crps: f64) -> Aggregates {
    let n = per_threshold.len() as f64;
    Aggregates {
        csi_m: mean_defined(per_threshold.iter().map(|s| s.csi)),
        hss_m: per_threshold.iter().map(|s| s.hss).sum::<f64>() / n,
        far_m: per_threshold.iter().map(|s| s.far).sum::<f64>() / n,
        csi_p16_m: mean_defined(per_threshold.iter().map(|s| s.csi_p16)),
        fss_m_p16: mean_defined(per_threshold.iter().map(|s| s.fss_p16)),
        crps,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub thresholds: Vec<f64>,
    pub lead_minutes: Vec<usize>,
    /// `per_lead[k][l]`: scores at threshold `k`, lead time `l`.
    pub per_lead: Vec<Vec<Scores>>,
    /// Scores per threshold over the whole horizon.
    pub per_threshold: Vec<Scores>,
    pub overall: Aggregates,
    /// Aggregates over the final lead time only.
    pub last_frame: Aggregates,
    pub ensemble_size: usize,
    pub sequences: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReportOptions {
    pub pool: usize,
    pub fss_window: usize,
    pub minutes_per_step: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { pool: POOL_BLOCK, fss_window: FSS_WINDOW, minutes_per_step: crate::data::TIMESTEP_MINUTES as usize }
    }
}

struct SequenceParts {
    cells: Vec<Vec<Cell>>,
    crps: Vec<f64>,
}

fn sequence_parts(members: &[Tensor], truth: &Tensor, thr: &ThresholdSet, opts: &ReportOptions) -> Result<SequenceParts> {
    let shape = check_members(members)?;
    if shape != truth.shape() || shape.len() != 3 {
        return Err(Error::shape("build_report", truth.shape(), shape));
    }
    let (leads, h, w) = (shape[0], shape[1], shape[2]);
    let mean = ensemble_mean(members)?;
    let pooled_mean = maxpool(&mean, opts.pool)?;
    let pooled_truth = maxpool(truth, opts.pool)?;
    let pw = pooled_mean.len() / leads;
    let hw = h * w;
    let mut cells = vec![vec![Cell::default(); leads]; thr.len()];
    let mut crps = Vec::with_capacity(leads);
    for l in 0..leads {
        let p = &mean.data()[l * hw..(l + 1) * hw];
        let o = &truth.data()[l * hw..(l + 1) * hw];
        let pp = &pooled_mean.data()[l * pw..(l + 1) * pw];
        let po = &pooled_truth.data()[l * pw..(l + 1) * pw];
        for (k, &u) in thr.values().iter().enumerate() {
            let cell = &mut cells[k][l];
            cell.table.accumulate_fields(p, o, u);
            cell.pooled.accumulate_fields(pp, po, u);
            cell.fss = FssParts::from_masks(&binarize(p, u), &binarize(o, u), h, w, opts.fss_window)?;
        }
        let frames: Vec<Tensor> = members.iter().map(|m| m.index_outer(l)).collect();
        crps.push(crps_sum(o, &frames));
    }
    Ok(SequenceParts { cells, crps })
}

/// Scores ensembles against truths. `forecasts[i]` holds the members for
/// sequence `i`, each `[lead, H, W]` like `truths[i]`.
pub fn build_report(
    forecasts: &[Vec<Tensor>],
    truths: &[Tensor],
    thresholds: &ThresholdSet,
    opts: &ReportOptions,
) -> Result<MetricReport> {
    if forecasts.len() != truths.len() || truths.is_empty() {
        return Err(Error::invalid(
            "build_report",
            format!("{} forecasts for {} truths", forecasts.len(), truths.len()),
        ));
    }
    let leads = truths[0].shape().first().copied().unwrap_or(0);
    let ensemble_size = forecasts[0].len();
    for (i, t) in truths.iter().enumerate() {
        if t.shape().first() != Some(&leads) {
            return Err(Error::invalid(
                "build_report",
                format!("sequence {i} has {:?} lead times, expected {leads}", t.shape().first()),
            ));
        }
    }
    let parts = crate::par::try_map_indices(truths.len(), |i| {
        sequence_parts(&forecasts[i], &truths[i], thresholds, opts)
    })?;

    let nt = thresholds.len();
    let mut cells = vec![vec![Cell::default(); leads]; nt];
    let mut crps_lead = vec![0.0; leads];
    for p in &parts {
        for k in 0..nt {
            for l in 0..leads {
                cells[k][l] = cells[k][l] + p.cells[k][l];
            }
        }
        for (a, c) in crps_lead.iter_mut().zip(&p.crps) {
            *a += c;
        }
    }
    let pixels_per_lead = (truths.len() * truths[0].len() / leads) as f64;

    let per_lead: Vec<Vec<Scores>> = cells.iter().map(|row| row.iter().map(Cell::scores).collect()).collect();
    let per_threshold: Vec<Scores> = cells
        .iter()
        .map(|row| row.iter().fold(Cell::default(), |a, &b| a + b).scores())
        .collect();
    let crps_all = crps_lead.iter().sum::<f64>() / (pixels_per_lead * leads as f64);
    let crps_last = crps_lead[leads - 1] / pixels_per_lead;
    let last: Vec<Scores> = per_lead.iter().map(|row| row[leads - 1]).collect();

    Ok(MetricReport {
        thresholds: thresholds.values().to_vec(),
        lead_minutes: (1..=leads).map(|l| l * opts.minutes_per_step).collect(),
        overall: aggregate(&per_threshold, crps_all),
        last_frame: aggregate(&last, crps_last),
        per_lead,
        per_threshold,
        ensemble_size,
        sequences: truths.len(),
    })
}

/// Persistence forecast: the last observed frame repeated `leads` times.
pub fn persistence(past: &Tensor, leads: usize) -> Result<Tensor> {
    let s = past.shape();
    if s.len() != 3 {
        return Err(Error::invalid("persistence", format!("expected [T,H,W], got {s:?}")));
    }
    let last = past.index_outer(s[0] - 1);
    Tensor::stack(&vec![last; leads])
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.9}"))
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "threshold,lead_time_minutes,metric,value";

    /// Long-format CSV. Threshold `M` rows are means over thresholds; lead
    /// `all` rows cover the whole horizon. Undefined values are `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::CSV_HEADER);
        let push_scores = |s: &mut String, thr: &str, lead: &str, sc: &Scores| {
            let _ = writeln!(s, "{thr},{lead},far,{:.9}", sc.far);
            let _ = writeln!(s, "{thr},{lead},csi,{}", fmt_opt(sc.csi));
            let _ = writeln!(s, "{thr},{lead},hss,{:.9}", sc.hss);
            let _ = writeln!(s, "{thr},{lead},csi_p16,{}", fmt_opt(sc.csi_p16));
            let _ = writeln!(s, "{thr},{lead},fss_p16,{}", fmt_opt(sc.fss_p16));
        };
        for (k, &u) in self.thresholds.iter().enumerate() {
            let thr = format!("{u:.6}");
            for (l, &m) in self.lead_minutes.iter().enumerate() {
                push_scores(&mut s, &thr, &m.to_string(), &self.per_lead[k][l]);
            }
            push_scores(&mut s, &thr, "all", &self.per_threshold[k]);
        }
        let last = self.lead_minutes.last().copied().unwrap_or(0).to_string();
        for (lead, a) in [("all", &self.overall), (last.as_str(), &self.last_frame)] {
            let _ = writeln!(s, "M,{lead},csi_m,{}", fmt_opt(a.csi_m));
            let _ = writeln!(s, "M,{lead},hss_m,{:.9}", a.hss_m);
            let _ = writeln!(s, "M,{lead},far_m,{:.9}", a.far_m);
            let _ = writeln!(s, "M,{lead},csi_p16_m,{}", fmt_opt(a.csi_p16_m));
            let _ = writeln!(s, "M,{lead},fss_m_p16,{}", fmt_opt(a.fss_m_p16));
            let _ = writeln!(s, "M,{lead},crps,{:.9}", a.crps);
        }
        s
    }
}
