//! Loss-matched compute slowdown and loss-frontier AUC.
//!
//! The baseline compute-to-loss curve is interpolated piecewise linearly in
//! log-log space. For a filtered run reaching loss `L_f` with compute `C_f`,
//! the matched baseline compute `C_b` is where the baseline curve reaches
//! `L_f`; the slowdown is reported as `C_f / C_b` together with its inverse.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ScalingError {
    #[error("series {0:?} needs at least two points")]
    TooFewPoints(String),
    #[error("series {series:?}: compute must be strictly increasing (points {indices:?})")]
    ComputeOrder { series: String, indices: Vec<usize> },
    #[error("series {series:?}: loss must strictly decrease with compute (points {indices:?})")]
    NonMonotone { series: String, indices: Vec<usize> },
    #[error("series {series:?}: point {index} is not positive and finite")]
    NonPositive { series: String, index: usize },
    #[error("target loss {0} is not positive")]
    BadLoss(f64),
    #[error("baseline segment {0} is flat; the target loss has no unique compute")]
    FlatSegment(usize),
    #[error("retain-loss ranges do not overlap")]
    EmptyIntersection,
    #[error("series {series:?}: duplicate retain loss {value}")]
    DuplicateRetain { series: String, value: f64 },
    #[error("series {0:?} not found")]
    MissingSeries(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ScalingError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub compute: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSeries {
    pub label: String,
    pub points: Vec<ScalingPoint>,
}

impl ScalingSeries {
    /// Validates positivity and strictly increasing compute.
    pub fn new(label: impl Into<String>, points: Vec<ScalingPoint>) -> Result<Self> {
        let s = ScalingSeries {
            label: label.into(),
            points,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_pairs(label: impl Into<String>, pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(label, pairs.iter().map(|&(compute, loss)| ScalingPoint { compute, loss }).collect())
    }

    pub fn validate(&self) -> Result<()> {
        for (index, p) in self.points.iter().enumerate() {
            let ok = |v: f64| v.is_finite() && v > 0.0;
            if !ok(p.compute) || !ok(p.loss) {
                return Err(ScalingError::NonPositive {
                    series: self.label.clone(),
                    index,
                });
            }
        }
        let bad: Vec<usize> = (1..self.points.len())
            .filter(|&i| !(self.points[i].compute > self.points[i - 1].compute))
            .collect();
        if !bad.is_empty() {
            return Err(ScalingError::ComputeOrder {
                series: self.label.clone(),
                indices: bad,
            });
        }
        Ok(())
    }
}

/// Piecewise-linear interpolant of `ln L` against `ln C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLogInterpolant {
    knots: Vec<ScalingPoint>,
    log_c: Vec<f64>,
    log_l: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interpolated {
    pub value: f64,
    pub extrapolated: bool,
}

pub fn fit_loglog(series: &ScalingSeries) -> Result<LogLogInterpolant> {
    series.validate()?;
    if series.points.len() < 2 {
        return Err(ScalingError::TooFewPoints(series.label.clone()));
    }
    let bad: Vec<usize> = (1..series.points.len())
        .filter(|&i| !(series.points[i].loss < series.points[i - 1].loss))
        .collect();
    if !bad.is_empty() {
        return Err(ScalingError::NonMonotone {
            series: series.label.clone(),
            indices: bad,
        });
    }
    Ok(LogLogInterpolant {
        knots: series.points.clone(),
        log_c: series.points.iter().map(|p| p.compute.ln()).collect(),
        log_l: series.points.iter().map(|p| p.loss.ln()).collect(),
    })
}

impl LogLogInterpolant {
    pub fn knots(&self) -> &[ScalingPoint] {
        &self.knots
    }

    /// `d ln L / d ln C` of segment `i` (between knots `i` and `i + 1`).
    pub fn slope(&self, i: usize) -> f64 {
        (self.log_l[i + 1] - self.log_l[i]) / (self.log_c[i + 1] - self.log_c[i])
    }

    fn segments(&self) -> usize {
        self.knots.len() - 1
    }

    /// Loss at `compute`.
    pub fn loss_at(&self, compute: f64) -> Interpolated {
        if let Some(k) = self.knots.iter().find(|k| k.compute == compute) {
            return Interpolated {
                value: k.loss,
                extrapolated: false,
            };
        }
        let x = compute.ln();
        let last = self.segments() - 1;
        let extrapolated = x < self.log_c[0] || x > self.log_c[last + 1];
        let seg = (self.log_c.partition_point(|&c| c <= x)).saturating_sub(1).min(last);
        let y = self.log_l[seg] + self.slope(seg) * (x - self.log_c[seg]);
        Interpolated {
            value: y.exp(),
            extrapolated,
        }
    }

    /// Compute at which the curve reaches `loss`.
    pub fn compute_at(&self, loss: f64) -> Result<Interpolated> {
        if !(loss > 0.0 && loss.is_finite()) {
            return Err(ScalingError::BadLoss(loss));
        }
        if let Some(k) = self.knots.iter().find(|k| k.loss == loss) {
            return Ok(Interpolated {
                value: k.compute,
                extrapolated: false,
            });
        }
        let y = loss.ln();
        let last = self.segments() - 1;
        // losses decrease along the knots
        let extrapolated = y > self.log_l[0] || y < self.log_l[last + 1];
        let seg = self.log_l.partition_point(|&l| l > y).saturating_sub(1).min(last);
        let slope = self.slope(seg);
        if slope == 0.0 || !slope.is_finite() {
            return Err(ScalingError::FlatSegment(seg));
        }
        let x = self.log_c[seg] + (y - self.log_l[seg]) / slope;
        Ok(Interpolated {
            value: x.exp(),
            extrapolated,
        })
    }
}

/// Baseline compute needed to reach `target_loss`.
pub fn matched_compute(baseline: &LogLogInterpolant, target_loss: f64) -> Result<Interpolated> {
    baseline.compute_at(target_loss)
}

/// Least-squares `ln L = ln A - alpha ln C`, reported as a diagnostic only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub alpha: f64,
    /// Standard error of `alpha`; `None` with only two points.
    pub alpha_stderr: Option<f64>,
    pub residual_sd: Option<f64>,
}

pub fn fit_power_law(series: &ScalingSeries) -> Result<PowerLawFit> {
    series.validate()?;
    let n = series.points.len();
    if n < 2 {
        return Err(ScalingError::TooFewPoints(series.label.clone()));
    }
    let xs: Vec<f64> = series.points.iter().map(|p| p.compute.ln()).collect();
    let ys: Vec<f64> = series.points.iter().map(|p| p.loss.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let (alpha_stderr, residual_sd) = if n > 2 {
        let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        let s2 = rss / (n - 2) as f64;
        (Some((s2 / sxx).sqrt()), Some(s2.sqrt()))
    } else {
        (None, None)
    };
    Ok(PowerLawFit {
        a: intercept.exp(),
        alpha: -slope,
        alpha_stderr,
        residual_sd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlowdownRow {
    pub compute: f64,
    pub loss: f64,
    pub matched_baseline_compute: f64,
    /// `C_f / C_b`: above 1 when the filtered run needs more compute than
    /// the baseline for the same loss.
    pub slowdown: f64,
    /// `C_b / C_f`.
    pub inverse_slowdown: f64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowdownReport {
    pub baseline: String,
    pub filtered: String,
    pub convention: String,
    pub rows: Vec<SlowdownRow>,
    pub baseline_fit: PowerLawFit,
}

const CONVENTION: &str = "slowdown = filtered compute / matched baseline compute (>1 means filtering costs compute on this domain); inverse_slowdown = matched baseline compute / filtered compute";

pub fn slowdown(baseline: &ScalingSeries, filtered: &ScalingSeries) -> Result<SlowdownReport> {
    let interp = fit_loglog(baseline)?;
    filtered.validate()?;
    let rows = filtered
        .points
        .iter()
        .map(|p| {
            let m = matched_compute(&interp, p.loss)?;
            let ratio = p.compute / m.value;
            Ok(SlowdownRow {
                compute: p.compute,
                loss: p.loss,
                matched_baseline_compute: m.value,
                slowdown: ratio,
                inverse_slowdown: 1.0 / ratio,
                extrapolated: m.extrapolated,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let flagged = rows.iter().filter(|r| r.extrapolated).count();
    if flagged > 0 {
        log::warn!("{flagged} of {} points extrapolate beyond the baseline's losses", rows.len());
    }
    Ok(SlowdownReport {
        baseline: baseline.label.clone(),
        filtered: filtered.label.clone(),
        convention: CONVENTION.into(),
        rows,
        baseline_fit: fit_power_law(baseline)?,
    })
}

/// Writes the rows of every report under one header.
pub fn write_slowdown_csv<W: Write>(w: W, reports: &[SlowdownReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "series",
        "compute_flops",
        "loss",
        "matched_baseline_compute",
        "slowdown",
        "inverse_slowdown",
        "extrapolated",
    ])?;
    for rep in reports {
        for r in &rep.rows {
            out.write_record([
                rep.filtered.clone(),
                r.compute.to_string(),
                r.loss.to_string(),
                r.matched_baseline_compute.to_string(),
                r.slowdown.to_string(),
                r.inverse_slowdown.to_string(),
                r.extrapolated.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct SeriesRecord {
    series: String,
    compute_flops: f64,
    loss: f64,
}

/// Reads `series,compute_flops,loss` rows. Series keep first-appearance
/// order; points within a series are sorted by compute.
pub fn read_series_csv<R: Read>(r: R) -> Result<Vec<ScalingSeries>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<ScalingPoint>> = BTreeMap::new();
    for rec in csv::Reader::from_reader(r).deserialize() {
        let rec: SeriesRecord = rec?;
        if !groups.contains_key(&rec.series) {
            order.push(rec.series.clone());
        }
        groups.entry(rec.series).or_default().push(ScalingPoint {
            compute: rec.compute_flops,
            loss: rec.loss,
        });
    }
    order
        .into_iter()
        .map(|label| {
            let mut points = groups.remove(&label).unwrap_or_default();
            points.sort_by(|a, b| a.compute.total_cmp(&b.compute));
            ScalingSeries::new(label, points)
        })
        .collect()
}

pub fn write_series_csv<W: Write>(w: W, series: &[ScalingSeries]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["series", "compute_flops", "loss"])?;
    for s in series {
        for p in &s.points {
            out.write_record([s.label.clone(), p.compute.to_string(), p.loss.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn find_series<'a>(all: &'a [ScalingSeries], label: &str) -> Result<&'a ScalingSeries> {
    all.iter()
        .find(|s| s.label == label)
        .ok_or_else(|| ScalingError::MissingSeries(label.into()))
}

/// Per-model `(retain loss, forget loss)` pairs for one classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierSeries {
    pub label: String,
    /// `(retain_loss, forget_loss)`.
    pub points: Vec<(f64, f64)>,
}

impl FrontierSeries {
    fn sorted(&self) -> Result<Vec<(f64, f64)>> {
        if self.points.len() < 2 {
            return Err(ScalingError::TooFewPoints(self.label.clone()));
        }
        for (index, &(r, f)) in self.points.iter().enumerate() {
            if !(r > 0.0 && f > 0.0 && r.is_finite() && f.is_finite()) {
                return Err(ScalingError::NonPositive {
                    series: self.label.clone(),
                    index,
                });
            }
        }
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = pts.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(ScalingError::DuplicateRetain {
                series: self.label.clone(),
                value: w[0].0,
            });
        }
        Ok(pts)
    }
}

fn value_at(pts: &[(f64, f64)], x: f64) -> f64 {
    let i = pts.partition_point(|p| p.0 <= x).clamp(1, pts.len() - 1);
    let (x0, y0) = pts[i - 1];
    let (x1, y1) = pts[i];
    if x == x0 {
        return y0;
    }
    if x == x1 {
        return y1;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Trapezoidal area under the curve between `lo` and `hi`.
fn area(pts: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    let mut xs = vec![lo];
    xs.extend(pts.iter().map(|p| p.0).filter(|&x| x > lo && x < hi));
    xs.push(hi);
    xs.windows(2)
        .map(|w| (w[1] - w[0]) * (value_at(pts, w[0]) + value_at(pts, w[1])) / 2.0)
        .sum()
}

/// Area under `series`' forget-vs-retain curve over the shared retain
/// range, divided by the baseline's area over the same range.
pub fn frontier_auc(series: &FrontierSeries, baseline: &FrontierSeries) -> Result<f64> {
    let a = series.sorted()?;
    let b = baseline.sorted()?;
    let lo = a[0].0.max(b[0].0);
    let hi = a[a.len() - 1].0.min(b[b.len() - 1].0);
    if !(lo < hi) {
        return Err(ScalingError::EmptyIntersection);
    }
    Ok(area(&a, lo, hi) / area(&b, lo, hi))
}

#[derive(Deserialize)]
struct FrontierRecord {
    series: String,
    retain_loss: f64,
    forget_loss: f64,
}

/// Reads `series,retain_loss,forget_loss` rows, grouped in first-appearance
/// order.
pub fn read_frontier_csv<R: Read>(r: R) -> Result<Vec<FrontierSeries>> {
    let mut out: Vec<FrontierSeries> = Vec::new();
    for rec in csv::Reader::from_reader(r).deserialize() {
        let rec: FrontierRecord = rec?;
        match out.iter_mut().find(|s| s.label == rec.series) {
            Some(s) => s.points.push((rec.retain_loss, rec.forget_loss)),
            None => out.push(FrontierSeries {
                label: rec.series,
                points: vec![(rec.retain_loss, rec.forget_loss)],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn power_law(a: f64, alpha: f64, budgets: &[f64]) -> ScalingSeries {
        let pts: Vec<(f64, f64)> = budgets.iter().map(|&c| (c, a * c.powf(-alpha))).collect();
        ScalingSeries::from_pairs("law", &pts).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn interpolant_reproduces_power_law() {
        let s = power_law(1.0, 0.1, &[1e12, 1e13, 1e15, 1e18]);
        let f = fit_loglog(&s).unwrap();
        for c in [2e12, 5.5e13, 9e14, 3.3e17] {
            let got = f.loss_at(c);
            assert!(!got.extrapolated);
            assert!(rel(got.value, c.powf(-0.1)) < 1e-12);
        }
        for k in &s.points {
            assert_eq!(f.loss_at(k.compute).value, k.loss);
        }
    }

    #[test]
    fn two_point_slope() {
        let s = ScalingSeries::from_pairs("two", &[(10.0, 4.0), (1000.0, 2.0)]).unwrap();
        let f = fit_loglog(&s).unwrap();
        assert!(rel(f.slope(0), (0.5f64).ln() / 100f64.ln()) < 1e-15);
    }

    #[test]
    fn non_monotone_rejected_with_indices() {
        let s = ScalingSeries::from_pairs("x", &[(1.0, 3.0), (2.0, 3.5), (3.0, 2.0), (4.0, 2.0)]).unwrap();
        match fit_loglog(&s) {
            Err(ScalingError::NonMonotone { indices, .. }) => assert_eq!(indices, vec![1, 3]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            fit_loglog(&ScalingSeries::from_pairs("y", &[(1.0, 1.0)]).unwrap()),
            Err(ScalingError::TooFewPoints(_))
        ));
        assert!(ScalingSeries::from_pairs("z", &[(2.0, 1.0), (1.0, 0.5)]).is_err());
    }

    #[test]
    fn matched_compute_examples() {
        let s = power_law(1.0, 0.1, &[1e12, 1e14, 1e16, 1e18]);
        let f = fit_loglog(&s).unwrap();
        let m = matched_compute(&f, 10f64.powf(-1.5)).unwrap();
        assert!(rel(m.value, 1e15) < 1e-12, "{}", m.value);
        assert!(!m.extrapolated);

        assert_eq!(matched_compute(&f, s.points[2].loss).unwrap().value, 1e16);

        let above = matched_compute(&f, 1.0).unwrap();
        assert!(above.extrapolated);
        assert!(rel(above.value, 1.0) < 1e-9);
        assert!(matches!(matched_compute(&f, 0.0), Err(ScalingError::BadLoss(_))));
    }

    #[test]
    fn slowdown_examples() {
        let budgets = [1e12, 1e14, 1e16, 1e18];
        let base = power_law(1.0, 0.1, &budgets);
        let same = slowdown(&base, &base).unwrap();
        assert!(same.rows.iter().all(|r| r.slowdown == 1.0 && r.inverse_slowdown == 1.0));

        let filtered = ScalingSeries::from_pairs("f", &[(1e16, 10f64.powf(-1.5))]).unwrap();
        let r = slowdown(&base, &filtered).unwrap().rows[0];
        assert!(rel(r.slowdown, 10.0) < 1e-12);
        assert_eq!(r.inverse_slowdown, 1.0 / r.slowdown);

        let shifted: Vec<(f64, f64)> = budgets.iter().map(|&c| (c, 10f64.powf(0.1) * c.powf(-0.1))).collect();
        let rep = slowdown(&base, &ScalingSeries::from_pairs("shift", &shifted).unwrap()).unwrap();
        for row in &rep.rows {
            assert!(rel(row.slowdown, 10.0) < 1e-9, "{row:?}");
        }
        // the smallest budget needs baseline compute below the first knot
        assert!(rep.rows[0].extrapolated);
        assert!(!rep.rows[1].extrapolated);
    }

    #[test]
    fn power_law_fit_recovers_exact_law() {
        let f = fit_power_law(&power_law(2.5, 0.07, &[1e10, 1e11, 1e13, 1e14])).unwrap();
        assert!(rel(f.a, 2.5) < 1e-9 && rel(f.alpha, 0.07) < 1e-9);
    }

    #[test]
    fn frontier_examples() {
        let base = FrontierSeries {
            label: "b".into(),
            points: vec![(2.0, 3.0), (2.5, 3.4), (3.0, 4.0)],
        };
        assert_eq!(frontier_auc(&base, &base).unwrap(), 1.0);
        let doubled = FrontierSeries {
            label: "d".into(),
            points: base.points.iter().map(|&(r, f)| (r, 2.0 * f)).collect(),
        };
        assert_eq!(frontier_auc(&doubled, &base).unwrap(), 2.0);
        let disjoint = FrontierSeries {
            label: "x".into(),
            points: vec![(5.0, 1.0), (6.0, 1.0)],
        };
        assert!(matches!(frontier_auc(&disjoint, &base), Err(ScalingError::EmptyIntersection)));
        // partial overlap: area over [2.5, 3.0] only
        let part = FrontierSeries {
            label: "p".into(),
            points: vec![(2.5, 1.0), (3.5, 1.0)],
        };
        let expect = 0.5 * 1.0 / (0.5 * (3.4 + 4.0) / 2.0);
        assert!(rel(frontier_auc(&part, &base).unwrap(), expect) < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let a = power_law(1.0, 0.1, &[1e12, 1e14]);
        let b = ScalingSeries::from_pairs("other", &[(5.0, 2.0), (6.0, 1.5)]).unwrap();
        let mut buf = Vec::new();
        write_series_csv(&mut buf, &[a.clone(), b.clone()]).unwrap();
        assert!(buf.starts_with(b"series,compute_flops,loss\n"));
        assert_eq!(read_series_csv(buf.as_slice()).unwrap(), vec![a, b]);
    }

    proptest! {
        #[test]
        fn power_law_slowdowns_match_closed_form(
            a in 0.5f64..5.0, alpha in 0.01f64..0.5,
            cf in 12.0f64..18.0, lf_shift in -0.3f64..0.3,
        ) {
            let budgets: Vec<f64> = (10..=20).map(|e| 10f64.powi(e)).collect();
            let base = power_law(a, alpha, &budgets);
            let c_f = 10f64.powf(cf);
            let l_f = a * c_f.powf(-alpha) * lf_shift.exp();
            let filtered = ScalingSeries::from_pairs("f", &[(c_f, l_f)]).unwrap();
            let row = slowdown(&base, &filtered).unwrap().rows[0];
            let closed = c_f * (l_f / a).powf(1.0 / alpha);
            prop_assert!(rel(row.slowdown, closed) < 1e-9, "{} vs {}", row.slowdown, closed);
        }

        #[test]
        fn inversion_is_consistent(a in 0.5f64..5.0, alpha in 0.01f64..0.5, t in 0.0f64..1.0) {
            let budgets: Vec<f64> = (10..=16).map(|e| 10f64.powi(e)).collect();
            let f = fit_loglog(&power_law(a, alpha, &budgets)).unwrap();
            for k in f.knots() {
                prop_assert_eq!(matched_compute(&f, k.loss).unwrap().value, k.compute);
            }
            let c = 10f64.powf(10.0 + 6.0 * t);
            let back = matched_compute(&f, f.loss_at(c).value).unwrap().value;
            prop_assert!(rel(back, c) < 1e-9);
        }
    }
}
