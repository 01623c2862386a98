//! Generated-vs-reference metrics: MSE, DTW, residual variance, clinical
//! feature KL, Wasserstein-style quantile distance and axis similarity,
//! aggregated per lead and over chest/limb groups.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qrs::detect_r_peaks;
use crate::signals::{lead_names, SignalSegment, CHEST_LEADS, LEAD_I, LEAD_II, LIMB_LEADS};
use crate::spectral::{spectral_entropy, time_entropy};

pub const KL_BINS: usize = 32;
pub const MW_GRID: usize = 1000;
pub const ENTROPY_BINS: usize = 64;
/// ST window after each R peak, seconds.
pub const ST_WINDOW_S: (f64, f64) = (0.04, 0.12);

fn check_same(gen: &SignalSegment, gt: &SignalSegment) -> Result<()> {
    if gen.channels() != gt.channels() || gen.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", gt.channels(), gt.len()),
            got: format!("{}x{}", gen.channels(), gen.len()),
        });
    }
    if gen.is_empty() {
        return Err(Error::invalid("empty segment"));
    }
    Ok(())
}

fn check_lead(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: b.len().to_string(), got: a.len().to_string() });
    }
    if a.is_empty() {
        return Err(Error::invalid("empty lead"));
    }
    Ok(())
}

pub fn mse_lead(gen: &[f64], gt: &[f64]) -> Result<f64> {
    check_lead(gen, gt)?;
    Ok(gen.iter().zip(gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / gt.len() as f64)
}

/// Mean squared error over every lead and sample.
pub fn mse(gen: &SignalSegment, gt: &SignalSegment) -> Result<f64> {
    check_same(gen, gt)?;
    let per: Result<Vec<f64>> = gen.samples.iter().zip(&gt.samples).map(|(a, b)| mse_lead(a, b)).collect();
    Ok(mean(&per?))
}

/// Dynamic time warping cost with steps (1,0), (0,1), (1,1) and point cost
/// `|x_i − y_j|`.
pub fn dtw(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("dtw needs nonempty sequences"));
    }
    let m = y.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &xi in x {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = (xi - y[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Sample variance (n − 1 denominator) of `gen − gt`.
pub fn residual_variance(gen: &[f64], gt: &[f64]) -> Result<f64> {
    check_lead(gen, gt)?;
    if gt.len() < 2 {
        return Err(Error::invalid("variance needs at least 2 samples"));
    }
    let r: Vec<f64> = gen.iter().zip(gt).map(|(a, b)| a - b).collect();
    let m = mean(&r);
    Ok(r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64)
}

/// Mean over leads of the residual variance.
pub fn variance_metric(gen: &SignalSegment, gt: &SignalSegment) -> Result<f64> {
    check_same(gen, gt)?;
    let per: Result<Vec<f64>> =
        gen.samples.iter().zip(&gt.samples).map(|(a, b)| residual_variance(a, b)).collect();
    Ok(mean(&per?))
}

/// `[QRS amplitude, mean ST level]` for each detected beat whose ST window
/// fits inside the lead.
pub fn beat_features(lead: &[f64], rate: f64) -> Result<Vec<[f64; 2]>> {
    let peaks = match detect_r_peaks(lead, rate) {
        Ok(p) => p,
        Err(Error::NoPeaks(_)) => Vec::new(),
        Err(e) => return Err(e),
    };
    let lo = (ST_WINDOW_S.0 * rate).round() as usize;
    let hi = (ST_WINDOW_S.1 * rate).round() as usize;
    Ok(peaks
        .into_iter()
        .filter(|&r| r + hi < lead.len())
        .map(|r| {
            let st = &lead[r + lo..=r + hi];
            [lead[r], mean(st)]
        })
        .collect())
}

/// Add-one smoothed histogram over `[lo, hi]`, normalized to sum 1.
pub fn smoothed_histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![1.0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = if width > 0.0 { (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1) } else { 0 };
        counts[b] += 1.0;
    }
    let total = (values.len() + bins) as f64;
    counts.into_iter().map(|c| c / total).collect()
}

/// `Σ p log(p / q)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lead(p, q)?;
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if !(b > 0.0) {
                return Err(Error::invalid("q has zero mass where p does not"));
            }
            s += a * (a / b).ln();
        }
    }
    Ok(s)
}

/// KL(GT ‖ gen) summed over both beat features, each histogrammed over the
/// pooled range. An empty `gen` side gives the smoothing-only histogram.
pub fn kl_features(gen: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::NoPeaks("no beats in the reference".into()));
    }
    let mut total = 0.0;
    for f in 0..2 {
        let a: Vec<f64> = gt.iter().map(|v| v[f]).collect();
        let b: Vec<f64> = gen.iter().map(|v| v[f]).collect();
        let lo = a.iter().chain(&b).copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().chain(&b).copied().fold(f64::NEG_INFINITY, f64::max);
        let p = smoothed_histogram(&a, lo, hi, KL_BINS);
        let q = smoothed_histogram(&b, lo, hi, KL_BINS);
        total += kl_divergence(&p, &q)?;
    }
    Ok(total.max(0.0))
}

/// Single-lead KL. Errors when either lead has no usable beats.
pub fn kl_lead(gen: &[f64], gt: &[f64], rate: f64) -> Result<f64> {
    let (g, t) = (beat_features(gen, rate)?, beat_features(gt, rate)?);
    if g.is_empty() || t.is_empty() {
        return Err(Error::NoPeaks("kl needs beats in both leads".into()));
    }
    kl_features(&g, &t)
}

/// Mean over leads of the single-lead KL.
pub fn kl_metric(gen: &SignalSegment, gt: &SignalSegment) -> Result<f64> {
    check_same(gen, gt)?;
    let per: Result<Vec<f64>> =
        gen.samples.iter().zip(&gt.samples).map(|(a, b)| kl_lead(a, b, gt.rate)).collect();
    Ok(mean(&per?))
}

fn quantile_grid(x: &[f64]) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    (0..MW_GRID)
        .map(|i| {
            let u = (i as f64 + 0.5) / MW_GRID as f64;
            s[((u * n as f64).floor() as usize).min(n - 1)]
        })
        .collect()
}

/// Signed mean difference of the empirical quantile functions, sampled at
/// 1000 midpoints. Exact for lengths dividing 1000.
pub fn mw_metric(gen: &[f64], gt: &[f64]) -> Result<f64> {
    if gen.is_empty() || gt.is_empty() {
        return Err(Error::invalid("mw needs nonempty leads"));
    }
    let (a, b) = (quantile_grid(gen), quantile_grid(gt));
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).sum::<f64>() / MW_GRID as f64)
}

/// Mean electrical axis in degrees, `atan2(Σ II, Σ I)`.
pub fn electrical_axis(ecg: &SignalSegment) -> Result<f64> {
    if ecg.channels() <= LEAD_II {
        return Err(Error::invalid("axis needs leads I and II"));
    }
    let s1: f64 = ecg.channel(LEAD_I).iter().sum();
    let s2: f64 = ecg.channel(LEAD_II).iter().sum();
    if s1 == 0.0 && s2 == 0.0 {
        return Err(Error::DegenerateGeometry("lead I and II sums are both zero; axis undefined".into()));
    }
    Ok(s2.atan2(s1).to_degrees())
}

/// `cos(θ_gen − θ_GT)`.
pub fn s_theta(gen: &SignalSegment, gt: &SignalSegment) -> Result<f64> {
    let d = electrical_axis(gen)? - electrical_axis(gt)?;
    Ok(d.to_radians().cos().clamp(-1.0, 1.0))
}

/// Per-lead values and their group means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grouped {
    pub per_lead: Vec<f64>,
    pub overall: f64,
    pub chest: f64,
    pub limb: f64,
}

impl Grouped {
    pub fn from_leads(per_lead: Vec<f64>) -> Result<Self> {
        if per_lead.len() != 12 {
            return Err(Error::invalid(format!("need 12 lead values, got {}", per_lead.len())));
        }
        Ok(Self {
            overall: mean(&per_lead),
            chest: mean(&per_lead[CHEST_LEADS]),
            limb: mean(&per_lead[LIMB_LEADS]),
            per_lead,
        })
    }
}

/// Time and spectral entropy (nats, mean over leads) of one signal pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub subject_id: String,
    pub te_gen: f64,
    pub se_gen: f64,
    pub te_gt: f64,
    pub se_gt: f64,
}

/// Mean time and spectral entropy over the channels of a segment.
pub fn segment_entropy(x: &SignalSegment) -> Result<(f64, f64)> {
    let te: Result<Vec<f64>> = x.samples.iter().map(|c| time_entropy(c, ENTROPY_BINS)).collect();
    let se: Result<Vec<f64>> = x.samples.iter().map(|c| spectral_entropy(c)).collect();
    Ok((mean(&te?), mean(&se?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: usize,
    pub leads: Vec<String>,
    pub mse: Grouped,
    pub dtw: Grouped,
    pub var: Grouped,
    pub kl: Grouped,
    /// Mean absolute quantile shift.
    pub mw: Grouped,
    pub mw_signed: Grouped,
    /// Limb leads only.
    pub s_theta: f64,
    pub entropy: Vec<EntropyRow>,
}

struct PairMetrics {
    mse: Vec<f64>,
    dtw: Vec<f64>,
    var: Vec<f64>,
    mw: Vec<f64>,
    /// Beat features per lead, generated then reference.
    feats: Vec<(Features, Features)>,
    s_theta: f64,
    entropy: EntropyRow,
}

type Features = Vec<[f64; 2]>;

fn pair_metrics(gen: &SignalSegment, gt: &SignalSegment) -> Result<PairMetrics> {
    check_same(gen, gt)?;
    if gt.channels() != 12 {
        return Err(Error::invalid("report needs 12-lead segments"));
    }
    let mut m = PairMetrics {
        mse: Vec::with_capacity(12),
        dtw: Vec::with_capacity(12),
        var: Vec::with_capacity(12),
        mw: Vec::with_capacity(12),
        feats: Vec::with_capacity(12),
        s_theta: s_theta(gen, gt)?,
        entropy: {
            let (te_gen, se_gen) = segment_entropy(gen)?;
            let (te_gt, se_gt) = segment_entropy(gt)?;
            EntropyRow { subject_id: gt.subject_id.clone(), te_gen, se_gen, te_gt, se_gt }
        },
    };
    for (a, b) in gen.samples.iter().zip(&gt.samples) {
        m.mse.push(mse_lead(a, b)?);
        m.dtw.push(dtw(a, b)?);
        m.var.push(residual_variance(a, b)?);
        m.mw.push(mw_metric(a, b)?);
        m.feats.push((beat_features(a, gen.rate)?, beat_features(b, gt.rate)?));
    }
    Ok(m)
}

/// Cohort report. Lead metrics are averaged over record pairs; KL pools
/// beat features per lead over the whole cohort.
pub fn report(gen: &[SignalSegment], gt: &[SignalSegment]) -> Result<MetricsReport> {
    if gen.len() != gt.len() {
        return Err(Error::ShapeMismatch { expected: format!("{} records", gt.len()), got: format!("{} records", gen.len()) });
    }
    if gt.is_empty() {
        return Err(Error::invalid("report needs at least one record pair"));
    }
    let pairs: Result<Vec<PairMetrics>> = gen.par_iter().zip(gt).map(|(g, t)| pair_metrics(g, t)).collect();
    let pairs = pairs?;
    let n = pairs.len() as f64;
    let lead_mean = |f: &dyn Fn(&PairMetrics, usize) -> f64| -> Vec<f64> {
        (0..12).map(|l| pairs.iter().map(|p| f(p, l)).sum::<f64>() / n).collect()
    };
    let mut kl = Vec::with_capacity(12);
    for l in 0..12 {
        let g: Vec<[f64; 2]> = pairs.iter().flat_map(|p| p.feats[l].0.iter().copied()).collect();
        let t: Vec<[f64; 2]> = pairs.iter().flat_map(|p| p.feats[l].1.iter().copied()).collect();
        if g.is_empty() {
            log::warn!("no beats in generated lead {}; KL uses an empty histogram", lead_names()[l]);
        }
        kl.push(kl_features(&g, &t)?);
    }
    Ok(MetricsReport {
        records: pairs.len(),
        leads: lead_names(),
        mse: Grouped::from_leads(lead_mean(&|p, l| p.mse[l]))?,
        dtw: Grouped::from_leads(lead_mean(&|p, l| p.dtw[l]))?,
        var: Grouped::from_leads(lead_mean(&|p, l| p.var[l]))?,
        kl: Grouped::from_leads(kl)?,
        mw: Grouped::from_leads(lead_mean(&|p, l| p.mw[l].abs()))?,
        mw_signed: Grouped::from_leads(lead_mean(&|p, l| p.mw[l]))?,
        s_theta: pairs.iter().map(|p| p.s_theta).sum::<f64>() / n,
        entropy: pairs.into_iter().map(|p| p.entropy).collect(),
    })
}

/// `metric,overall,chest,limb` table. `s_theta` fills the limb column only.
pub fn table_csv(r: &MetricsReport) -> String {
    let mut out = String::from("metric,overall,chest,limb\n");
    for (name, g) in [("mse", &r.mse), ("dtw", &r.dtw), ("var", &r.var), ("kl", &r.kl), ("mw", &r.mw), ("mw_signed", &r.mw_signed)] {
        out.push_str(&format!("{name},{},{},{}\n", g.overall, g.chest, g.limb));
    }
    out.push_str(&format!("s_theta,,,{}\n", r.s_theta));
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}
