use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// One-sided Welch test of `mean(a) > mean(b)`; returns `(t, p)`.
pub fn welch_greater(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (va, vb) = (var(a) / a.len() as f64, var(b) / b.len() as f64);
    let se = (va + vb).sqrt();
    if se == 0.0 {
        let p = if mean(a) > mean(b) { 0.0 } else { 1.0 };
        return (f64::INFINITY, p);
    }
    let t = (mean(a) - mean(b)) / se;
    let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).unwrap();
    (t, 1.0 - dist.cdf(t))
}

/// One-sided paired test of `mean(after - before) > 0`; returns `(t, p)`.
pub fn paired_greater(after: &[f64], before: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    let se = (var(&d) / d.len() as f64).sqrt();
    if se == 0.0 {
        return (0.0, 1.0);
    }
    let t = mean(&d) / se;
    let dist = StudentsT::new(0.0, 1.0, (d.len() - 1) as f64).unwrap();
    (t, 1.0 - dist.cdf(t))
}

/// Pearson goodness of fit against equal expected counts; returns `(chi2, p)`.
pub fn chi_square_uniform(counts: &[usize]) -> (f64, f64) {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let chi2 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum::<f64>();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    (chi2, 1.0 - dist.cdf(chi2))
}
