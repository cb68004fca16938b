//! Platt scaling: `P(change | f) = 1 / (1 + exp(A f + B))`.
//!
//! Fitted by regularised maximum likelihood (Newton with backtracking)
//! against smoothed targets `t+ = (N+ + 1)/(N+ + 2)`, `t- = 1/(N- + 2)`.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Platt {
    pub a: f64,
    pub b: f64,
}

/// Smallest admissible slope magnitude; keeps the mapping strictly
/// decreasing in `A f` when the fit yields a non-negative slope.
pub const MIN_SLOPE: f64 = 1e-6;

impl Platt {
    /// Probability of the positive (change) class; numerically stable.
    pub fn prob(&self, f: f64) -> f64 {
        let fab = f * self.a + self.b;
        if fab >= 0.0 {
            let e = (-fab).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + fab.exp())
        }
    }

    /// Fits `(A, B)` to decision values and boolean labels (`true` = change).
    pub fn fit(dec: &[f64], labels: &[bool]) -> Platt {
        assert_eq!(dec.len(), labels.len());
        let prior1 = labels.iter().filter(|&&l| l).count() as f64;
        let prior0 = labels.len() as f64 - prior1;
        let hi = (prior1 + 1.0) / (prior1 + 2.0);
        let lo = 1.0 / (prior0 + 2.0);
        let t: Vec<f64> = labels.iter().map(|&l| if l { hi } else { lo }).collect();

        const MAX_ITER: usize = 100;
        const MIN_STEP: f64 = 1e-10;
        const SIGMA: f64 = 1e-12;
        const EPS: f64 = 1e-5;

        let objective = |a: f64, b: f64| -> f64 {
            dec.iter()
                .zip(&t)
                .map(|(&d, &ti)| {
                    let fab = d * a + b;
                    if fab >= 0.0 {
                        ti * fab + (-fab).exp().ln_1p()
                    } else {
                        (ti - 1.0) * fab + fab.exp().ln_1p()
                    }
                })
                .sum()
        };

        let mut a = 0.0;
        let mut b = ((prior0 + 1.0) / (prior1 + 1.0)).ln();
        let mut fval = objective(a, b);
        for _ in 0..MAX_ITER {
            let (mut h11, mut h22, mut h21, mut g1, mut g2) = (SIGMA, SIGMA, 0.0, 0.0, 0.0);
            for (&d, &ti) in dec.iter().zip(&t) {
                let fab = d * a + b;
                let (p, q) = if fab >= 0.0 {
                    let e = (-fab).exp();
                    (e / (1.0 + e), 1.0 / (1.0 + e))
                } else {
                    let e = fab.exp();
                    (1.0 / (1.0 + e), e / (1.0 + e))
                };
                let d2 = p * q;
                h11 += d * d * d2;
                h22 += d2;
                h21 += d * d2;
                let d1 = ti - p;
                g1 += d * d1;
                g2 += d1;
            }
            if g1.abs() < EPS && g2.abs() < EPS {
                break;
            }
            let det = h11 * h22 - h21 * h21;
            let da = -(h22 * g1 - h21 * g2) / det;
            let db = -(-h21 * g1 + h11 * g2) / det;
            let gd = g1 * da + g2 * db;
            let mut step = 1.0;
            while step >= MIN_STEP {
                let (na, nb) = (a + step * da, b + step * db);
                let nf = objective(na, nb);
                if nf < fval + 1e-4 * step * gd {
                    a = na;
                    b = nb;
                    fval = nf;
                    break;
                }
                step /= 2.0;
            }
            if step < MIN_STEP {
                break;
            }
        }
        if !(a < -MIN_SLOPE) {
            a = -MIN_SLOPE;
        }
        Platt { a, b }
    }
}
