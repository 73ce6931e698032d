//! Small statistics helpers shared by diagnostics and the test suites.

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(a.len() >= 2, "spearman needs at least two points");
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).expect("non-finite rank input"));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // average rank over the tie block, 1-based
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// One-sample Kolmogorov-Smirnov statistic against Uniform(0, 1).
pub fn ks_statistic_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|x, y| x.partial_cmp(y).expect("non-finite KS input"));
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let hi = (i + 1) as f64 / n - x;
        let lo = x - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}

/// Asymptotic KS critical value at significance alpha = 0.01.
pub fn ks_critical_001(n: usize) -> f64 {
    1.62762 / (n as f64).sqrt()
}

/// Half-width of the 99% normal-approximation binomial confidence interval.
pub fn binomial_ci99_halfwidth(p: f64, n: usize) -> f64 {
    2.5758 * (p * (1.0 - p) / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn spearman_monotone_and_reversed() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [10.0, 20.0, 25.0, 40.0, 100.0];
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        let c = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &c) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties() {
        let a = [1.0, 1.0, 2.0, 3.0];
        let b = [4.0, 4.0, 5.0, 6.0];
        let r = spearman(&a, &b);
        assert!(r > 0.99);
    }

    #[test]
    fn ks_accepts_uniform_rejects_shifted() {
        let mut r = crate::rng::stream(3, "ks", 0);
        let samples: Vec<f64> = (0..50_000).map(|_| r.gen::<f64>()).collect();
        assert!(ks_statistic_uniform(&samples) < ks_critical_001(samples.len()));
        let squashed: Vec<f64> = samples.iter().map(|x| x * 0.9).collect();
        assert!(ks_statistic_uniform(&squashed) > ks_critical_001(squashed.len()));
    }
}
