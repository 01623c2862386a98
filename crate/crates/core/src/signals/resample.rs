use crate::error::{Error, Result};

use super::SignalSegment;

/// Natural cubic spline through uniformly spaced knots `x_i = i * h`.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    y: Vec<f64>,
    /// Second derivatives at the knots; zero at both ends.
    m: Vec<f64>,
    h: f64,
}

impl CubicSpline {
    pub fn natural(y: &[f64], h: f64) -> Result<Self> {
        let n = y.len();
        if n < 4 {
            return Err(Error::TooShort { needed: 4, got: n });
        }
        // Tridiagonal system for interior second derivatives:
        // m[i-1] + 4 m[i] + m[i+1] = 6 (y[i-1] - 2 y[i] + y[i+1]) / h^2
        let k = n - 2;
        let mut diag = vec![4.0; k];
        let mut rhs: Vec<f64> = (1..n - 1)
            .map(|i| 6.0 * (y[i - 1] - 2.0 * y[i] + y[i + 1]) / (h * h))
            .collect();
        for i in 1..k {
            let w = 1.0 / diag[i - 1];
            diag[i] -= w;
            rhs[i] -= w * rhs[i - 1];
        }
        let mut m = vec![0.0; n];
        m[k] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            m[i + 1] = (rhs[i] - m[i + 2]) / diag[i];
        }
        Ok(Self { y: y.to_vec(), m, h })
    }

    /// Evaluates at `x`; outside the knot span the end pieces are extended.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.y.len();
        let pos = x / self.h;
        let i = (pos.floor().max(0.0) as usize).min(n - 2);
        let a = (i as f64 + 1.0) - pos;
        let b = pos - i as f64;
        let h2 = self.h * self.h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h2 / 6.0
    }
}

/// Piecewise-cubic resampling of every channel onto a `dst_rate` grid
/// starting at t = 0.
pub fn resample(signal: &SignalSegment, dst_rate: f64) -> Result<SignalSegment> {
    if !(dst_rate > 0.0 && dst_rate.is_finite()) {
        return Err(Error::invalid(format!("dst_rate must be positive, got {dst_rate}")));
    }
    let n = signal.len();
    if n < 4 {
        return Err(Error::TooShort { needed: 4, got: n });
    }
    if dst_rate == signal.rate {
        return Ok(signal.clone());
    }
    let m = (n as f64 * dst_rate / signal.rate).round() as usize;
    let h = 1.0 / signal.rate;
    let samples = signal
        .samples
        .iter()
        .map(|ch| {
            let spline = CubicSpline::natural(ch, h)?;
            Ok((0..m).map(|k| spline.eval(k as f64 / dst_rate)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(signal.with_samples(samples, dst_rate))
}
