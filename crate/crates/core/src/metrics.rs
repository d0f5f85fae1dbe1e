//! Countermeasure scoring: EER, normalised minimum t-DCF with a fixed ASV
//! operating point, DET points and score histograms.
//!
//! All sweeps run over the distinct scores plus both infinities, and a
//! trial is accepted as bonafide when `score >= threshold`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub score: f64,
    pub bonafide: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub records: Vec<ScoreRecord>,
}

impl ScoreSet {
    pub fn new(records: Vec<ScoreRecord>) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
            return Err(Error::Metric(format!("non-finite score for {}", r.utt_id)));
        }
        Ok(ScoreSet { records })
    }

    /// Anonymous records from per-class score lists.
    pub fn from_scores(bonafide: &[f64], spoof: &[f64]) -> Result<Self> {
        let rec = |(i, &score): (usize, &f64), b: bool| ScoreRecord { utt_id: format!("{}{i}", if b { "b" } else { "s" }), score, bonafide: b };
        let records = bonafide.iter().enumerate().map(|x| rec(x, true)).chain(spoof.iter().enumerate().map(|x| rec(x, false)));
        ScoreSet::new(records.collect())
    }

    pub fn bonafide(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.bonafide).map(|r| r.score).collect()
    }

    pub fn spoof(&self) -> Vec<f64> {
        self.records.iter().filter(|r| !r.bonafide).map(|r| r.score).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One point of the threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    /// Spoofs accepted.
    pub far: f64,
    /// Bonafide rejected.
    pub frr: f64,
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// FAR/FRR at `-inf`, every distinct score in ascending order, and `+inf`.
pub fn sweep(s: &ScoreSet) -> Result<Vec<SweepPoint>> {
    let bona = sorted(s.bonafide());
    let spoof = sorted(s.spoof());
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::Metric(format!("need both classes, got {} bonafide and {} spoof", bona.len(), spoof.len())));
    }
    let mut grid: Vec<f64> = sorted(bona.iter().chain(&spoof).copied().collect());
    grid.dedup();
    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    let mut out = Vec::with_capacity(grid.len() + 2);
    out.push(SweepPoint { threshold: f64::NEG_INFINITY, far: 1.0, frr: 0.0 });
    let (mut bi, mut si) = (0, 0);
    for &t in &grid {
        while bi < bona.len() && bona[bi] < t {
            bi += 1;
        }
        while si < spoof.len() && spoof[si] < t {
            si += 1;
        }
        out.push(SweepPoint { threshold: t, far: (spoof.len() - si) as f64 / ns, frr: bi as f64 / nb });
    }
    out.push(SweepPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 });
    Ok(out)
}

/// Equal error rate and the first threshold at which FRR reaches FAR.
pub fn compute_eer(s: &ScoreSet) -> Result<(f64, f64)> {
    let pts = sweep(s)?;
    let i = pts.iter().position(|p| p.frr >= p.far).expect("sweep ends at FRR = 1, FAR = 0");
    let cur = pts[i];
    let d1 = cur.far - cur.frr;
    if i == 0 || d1 == 0.0 {
        return Ok((cur.frr, cur.threshold));
    }
    let prev = pts[i - 1];
    let d0 = prev.far - prev.frr;
    let t = d0 / (d0 - d1);
    Ok((prev.frr + t * (cur.frr - prev.frr), cur.threshold))
}

/// Priors, costs and the fixed ASV operating point of the tandem system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdcfCostModel {
    pub p_tar: f64,
    pub p_non: f64,
    pub p_spoof: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    pub p_miss_asv: f64,
    pub p_fa_asv: f64,
    pub p_miss_spoof_asv: f64,
}

impl Default for TdcfCostModel {
    /// ASVspoof 2019 priors and costs with a nominal ASV operating point.
    fn default() -> Self {
        TdcfCostModel {
            p_tar: 0.9405,
            p_non: 0.0095,
            p_spoof: 0.05,
            c_miss_asv: 1.0,
            c_fa_asv: 10.0,
            c_miss_cm: 1.0,
            c_fa_cm: 10.0,
            p_miss_asv: 0.01,
            p_fa_asv: 0.01,
            p_miss_spoof_asv: 0.05,
        }
    }
}

impl TdcfCostModel {
    pub fn validate(&self) -> Result<()> {
        let priors = [self.p_tar, self.p_non, self.p_spoof];
        if priors.iter().any(|&p| !(p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Metric(format!("priors must be non-negative and sum to 1, got {priors:?}")));
        }
        let costs = [self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm];
        if costs.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Metric(format!("costs must be positive, got {costs:?}")));
        }
        let rates = [self.p_miss_asv, self.p_fa_asv, self.p_miss_spoof_asv];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Metric(format!("ASV rates must lie in [0, 1], got {rates:?}")));
        }
        Ok(())
    }
}

/// `(C1, C2)` of the constrained-ASV t-DCF.
pub fn tdcf_constants(cm: &TdcfCostModel) -> Result<(f64, f64)> {
    cm.validate()?;
    let c1 = cm.p_tar * (cm.c_miss_cm - cm.c_miss_asv * cm.p_miss_asv) - cm.p_non * cm.c_fa_asv * cm.p_fa_asv;
    let c2 = cm.c_fa_cm * cm.p_spoof * (1.0 - cm.p_miss_spoof_asv);
    if c1 <= 0.0 || c2 <= 0.0 {
        return Err(Error::Metric(format!("ill-posed tandem: C1 = {c1}, C2 = {c2}")));
    }
    Ok((c1, c2))
}

/// Minimum normalised t-DCF over the sweep and its threshold.
pub fn compute_min_tdcf(s: &ScoreSet, cm: &TdcfCostModel) -> Result<(f64, f64)> {
    let (c1, c2) = tdcf_constants(cm)?;
    let norm = c1.min(c2);
    let mut best = (f64::INFINITY, f64::NAN);
    for p in sweep(s)? {
        let v = (c1 * p.frr + c2 * p.far) / norm;
        if v < best.0 {
            best = (v, p.threshold);
        }
    }
    Ok(best)
}

/// Sweep points with consecutive duplicate `(FAR, FRR)` pairs removed;
/// FAR is non-increasing and FRR non-decreasing along the list.
pub fn det_points(s: &ScoreSet) -> Result<Vec<SweepPoint>> {
    let mut pts = sweep(s)?;
    pts.dedup_by(|b, a| a.far == b.far && a.frr == b.frr);
    Ok(pts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges from the minimum to the maximum score.
    pub edges: Vec<f64>,
    pub bonafide: Vec<u64>,
    pub spoof: Vec<u64>,
}

/// Equal-width per-class counts over `[min, max]` of all scores; the last
/// bin is closed.
pub fn score_histogram(s: &ScoreSet, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let (lo, hi) = s
        .records
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.score), hi.max(r.score)));
    let (lo, hi) = if s.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut h = Histogram { edges, bonafide: vec![0; bins], spoof: vec![0; bins] };
    for r in &s.records {
        let idx = if width > 0.0 { (((r.score - lo) / width) as usize).min(bins - 1) } else { 0 };
        if r.bonafide {
            h.bonafide[idx] += 1;
        } else {
            h.spoof[idx] += 1;
        }
    }
    Ok(h)
}
