//! Bjøntegaard delta rate between two rate-quality curves.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    /// `(bpp, quality)` sorted by bpp.
    points: Vec<(f64, f64)>,
    pub metric_name: String,
    pub higher_is_better: bool,
}

impl RdCurve {
    pub fn new(
        mut points: Vec<(f64, f64)>,
        metric_name: impl Into<String>,
        higher_is_better: bool,
    ) -> Result<Self> {
        if points
            .iter()
            .any(|(r, q)| !(r.is_finite() && *r > 0.0 && q.is_finite()))
        {
            return Err(Error::invalid("rate must be positive and quality finite"));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("bpp values must be distinct"));
        }
        Ok(Self {
            points,
            metric_name: metric_name.into(),
            higher_is_better,
        })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Reads `bpp,quality` rows. A non-numeric first row is taken as a header and its
    /// second column names the metric.
    pub fn from_csv(path: &Path, higher_is_better: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, higher_is_better)
    }

    pub fn parse_csv(text: &str, higher_is_better: bool) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut name = String::from("quality");
        let mut points = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("rd csv: {e}")))?;
            if rec.len() < 2 {
                return Err(Error::Data(format!(
                    "rd csv row {}: need bpp,quality",
                    i + 1
                )));
            }
            match (rec[0].parse::<f64>(), rec[1].parse::<f64>()) {
                (Ok(r), Ok(q)) => points.push((r, q)),
                _ if i == 0 => name = rec[1].to_string(),
                _ => {
                    return Err(Error::Data(format!(
                        "rd csv row {}: not numeric: {:?}",
                        i + 1,
                        rec
                    )))
                }
            }
        }
        Self::new(points, name, higher_is_better)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BdVariant {
    /// One least-squares cubic per curve.
    Cubic,
    /// Piecewise-cubic Hermite interpolation, used when both curves have ≥ 5 points.
    Pchip,
}

impl std::fmt::Display for BdVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BdVariant::Cubic => "cubic",
            BdVariant::Pchip => "pchip",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BdRate {
    /// Average rate difference in percent; negative means the candidate is cheaper.
    pub percent: f64,
    pub variant: BdVariant,
    /// Shared quality interval in the (possibly negated) fitting orientation.
    pub interval: (f64, f64),
}

trait Fit {
    /// Integral of the fitted log-rate over `[a, b]`.
    fn integral(&self, a: f64, b: f64) -> f64;
}

struct Poly3([f64; 4]);

impl Poly3 {
    fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        let a = DMatrix::from_fn(x.len(), 4, |i, j| x[i].powi(j as i32));
        let b = DVector::from_column_slice(y);
        let sol = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::Data(format!("cubic fit failed: {e}")))?;
        Ok(Self([sol[0], sol[1], sol[2], sol[3]]))
    }
}

impl Fit for Poly3 {
    fn integral(&self, a: f64, b: f64) -> f64 {
        let p = |x: f64| {
            let c = &self.0;
            x * (c[0] + x * (c[1] / 2.0 + x * (c[2] / 3.0 + x * c[3] / 4.0)))
        };
        p(b) - p(a)
    }
}

struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(x: &[f64], y: &[f64]) -> Self {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let s: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        for k in 1..n - 1 {
            if s[k - 1] * s[k] > 0.0 {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                d[k] = (w1 + w2) / (w1 / s[k - 1] + w2 / s[k]);
            }
        }
        let end = |h0: f64, h1: f64, s0: f64, s1: f64| {
            let v = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
            if v.signum() != s0.signum() {
                0.0
            } else if s0.signum() != s1.signum() && v.abs() > 3.0 * s0.abs() {
                3.0 * s0
            } else {
                v
            }
        };
        d[0] = end(h[0], h[1], s[0], s[1]);
        d[n - 1] = end(h[n - 2], h[n - 3], s[n - 2], s[n - 3]);
        Self {
            x: x.to_vec(),
            y: y.to_vec(),
            d,
        }
    }

    fn eval(&self, k: usize, t: f64) -> f64 {
        let h = self.x[k + 1] - self.x[k];
        let u = (t - self.x[k]) / h;
        let (u2, u3) = (u * u, u * u * u);
        (2.0 * u3 - 3.0 * u2 + 1.0) * self.y[k]
            + (u3 - 2.0 * u2 + u) * h * self.d[k]
            + (-2.0 * u3 + 3.0 * u2) * self.y[k + 1]
            + (u3 - u2) * h * self.d[k + 1]
    }
}

impl Fit for Pchip {
    fn integral(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..self.x.len() - 1 {
            let lo = a.max(self.x[k]);
            let hi = b.min(self.x[k + 1]);
            if hi > lo {
                let mid = 0.5 * (lo + hi);
                total += (hi - lo) / 6.0
                    * (self.eval(k, lo) + 4.0 * self.eval(k, mid) + self.eval(k, hi));
            }
        }
        total
    }
}

fn oriented(curve: &RdCurve) -> Result<(Vec<f64>, Vec<f64>)> {
    let sign = if curve.higher_is_better { 1.0 } else { -1.0 };
    let mut pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|&(r, q)| (sign * q, r.ln()))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::invalid(format!(
            "{}: quality values must be distinct",
            curve.metric_name
        )));
    }
    Ok(pts.into_iter().unzip())
}

/// Bjøntegaard delta rate of `candidate` against `reference`.
///
/// Log-rate is fitted as a function of quality (negated when lower is better) and the
/// two fits are averaged over the shared quality interval.
pub fn bd_rate(reference: &RdCurve, candidate: &RdCurve) -> Result<BdRate> {
    if reference.higher_is_better != candidate.higher_is_better {
        return Err(Error::invalid("curves disagree on metric orientation"));
    }
    if reference.points.len() < 4 || candidate.points.len() < 4 {
        return Err(Error::invalid("bd-rate needs at least 4 points per curve"));
    }
    let (qa, ra) = oriented(reference)?;
    let (qb, rb) = oriented(candidate)?;
    let lo = qa[0].max(qb[0]);
    let hi = qa[qa.len() - 1].min(qb[qb.len() - 1]);
    if !(hi > lo) {
        return Err(Error::invalid("quality ranges do not overlap"));
    }
    let variant = if qa.len() >= 5 && qb.len() >= 5 {
        BdVariant::Pchip
    } else {
        BdVariant::Cubic
    };
    let (fa, fb): (Box<dyn Fit>, Box<dyn Fit>) = match variant {
        BdVariant::Cubic => (
            Box::new(Poly3::fit(&qa, &ra)?),
            Box::new(Poly3::fit(&qb, &rb)?),
        ),
        BdVariant::Pchip => (
            Box::new(Pchip::new(&qa, &ra)),
            Box::new(Pchip::new(&qb, &rb)),
        ),
    };
    let avg = (fb.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok(BdRate {
        percent: avg.exp_m1() * 100.0,
        variant,
        interval: (lo, hi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(points: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(points.to_vec(), "psnr", true).unwrap()
    }

    fn smooth(n: usize, scale: f64) -> RdCurve {
        curve(
            &(0..n)
                .map(|i| {
                    let r = 0.1 * (1.0 + i as f64) * scale;
                    (r, 24.0 + 6.0 * (r / scale).ln())
                })
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn identical_curves_give_zero() {
        for n in [4, 6] {
            let c = smooth(n, 1.0);
            assert!(bd_rate(&c, &c).unwrap().percent.abs() < 1e-12);
        }
    }

    #[test]
    fn rate_scaling_is_recovered() {
        for n in [4, 5, 8] {
            let a = smooth(n, 1.0);
            let pts: Vec<_> = a.points().iter().map(|&(r, q)| (0.9 * r, q)).collect();
            let b = curve(&pts);
            let bd = bd_rate(&a, &b).unwrap();
            assert!((bd.percent + 10.0).abs() < 0.01, "{bd:?}");
            assert_eq!(
                bd.variant,
                if n >= 5 {
                    BdVariant::Pchip
                } else {
                    BdVariant::Cubic
                }
            );
        }
    }

    #[test]
    fn reversing_roles_negates() {
        let a = smooth(6, 1.0);
        let b = smooth(6, 0.95);
        let ab = bd_rate(&a, &b).unwrap().percent;
        let ba = bd_rate(&b, &a).unwrap().percent;
        assert!((ab + ba).abs() < 0.5, "{ab} {ba}");
    }

    #[test]
    fn lower_is_better_is_negated() {
        let pts: Vec<_> = (1..=5).map(|i| (0.1 * i as f64, 50.0 / i as f64)).collect();
        let a = RdCurve::new(pts.clone(), "fid", false).unwrap();
        let b = RdCurve::new(
            pts.iter().map(|&(r, q)| (0.8 * r, q)).collect(),
            "fid",
            false,
        )
        .unwrap();
        assert!((bd_rate(&a, &b).unwrap().percent + 20.0).abs() < 1e-9);
        let c = RdCurve::new(pts, "fid", true).unwrap();
        assert!(bd_rate(&a, &c).is_err());
    }

    #[test]
    fn disjoint_quality_ranges_are_rejected() {
        let a = curve(&[(0.1, 20.0), (0.2, 21.0), (0.3, 22.0), (0.4, 23.0)]);
        let b = curve(&[(0.1, 30.0), (0.2, 31.0), (0.3, 32.0), (0.4, 33.0)]);
        assert!(bd_rate(&a, &b).is_err());
        let short = curve(&[(0.1, 20.0), (0.2, 21.0), (0.3, 22.0)]);
        assert!(bd_rate(&short, &short).is_err());
    }

    #[test]
    fn csv_with_and_without_header() {
        let c = RdCurve::parse_csv("bpp,fid\n0.3,12\n0.1,20\n0.2,15\n", false).unwrap();
        assert_eq!(c.metric_name, "fid");
        assert_eq!(c.points()[0], (0.1, 20.0));
        let d = RdCurve::parse_csv("0.1, 30\n0.2, 31\n", true).unwrap();
        assert_eq!(d.points().len(), 2);
        assert!(RdCurve::parse_csv("0.1,x\n0.2,y\n", true).is_err());
    }

    #[test]
    fn pchip_integrates_linear_data_exactly() {
        let x = [0.0, 1.0, 3.0, 4.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let p = Pchip::new(&x, &y);
        let exact = |a: f64, b: f64| (b * b + b) - (a * a + a);
        assert!((p.integral(0.5, 6.0) - exact(0.5, 6.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn affine_quality_reparameterization(a in 0.1f64..10.0, b in -50.0f64..50.0, s in 0.7f64..1.3, n in 4usize..8) {
            let r = smooth(n, 1.0);
            let c = smooth(n, s);
            let map = |k: &RdCurve| curve(&k.points().iter().map(|&(x, q)| (x, a * q + b)).collect::<Vec<_>>());
            let base = bd_rate(&r, &c).unwrap().percent;
            let moved = bd_rate(&map(&r), &map(&c)).unwrap().percent;
            prop_assert!((base - moved).abs() < 1e-6 * (1.0 + base.abs()));
        }
    }
}
