//! Small statistics helpers for sample diagnostics and acceptance checks.

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0)
}

/// Mean of one coordinate of interleaved d-dimensional samples.
pub fn coord_mean(samples: &[f64], dim: usize, axis: usize) -> f64 {
    let n = samples.len() / dim;
    (0..n).map(|r| samples[r * dim + axis]).sum::<f64>() / n as f64
}

pub fn coord_column(samples: &[f64], dim: usize, axis: usize) -> Vec<f64> {
    samples.chunks_exact(dim).map(|row| row[axis]).collect()
}

/// Welch's two-sample t statistic for mean(a) > mean(b).
pub fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (variance(a), variance(b));
    let se = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
    (ma - mb) / se.max(1e-300)
}

/// One-sided p-value for the hypothesis mean(a) > mean(b), normal
/// approximation (adequate at the sample sizes used here).
pub fn welch_p_one_sided(a: &[f64], b: &[f64]) -> f64 {
    normal_sf(welch_t(a, b))
}

/// Survival function of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Complementary error function (Abramowitz-Stegun 7.1.26 on |x|).
fn erfc(x: f64) -> f64 {
    let ax = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * ax);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let val = poly * (-ax * ax).exp();
    if x >= 0.0 {
        val
    } else {
        2.0 - val
    }
}
