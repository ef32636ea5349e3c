/// Strictly positive weights needed before any pair participates.
pub const MIN_ACTIVE_WEIGHTS: usize = 2;

pub fn active_weights(w: &[f64]) -> usize {
    w.iter().filter(|v| **v > 0.0).count()
}

/// `((c·w)^2 - (c^2)·(w^2)) / ((Σw)^2 - Σw^2)`, or 0 with fewer than two
/// positive weights.
pub fn interact_closed_form(c: &[f64], w: &[f64]) -> f64 {
    debug_assert_eq!(c.len(), w.len());
    if active_weights(w) < MIN_ACTIVE_WEIGHTS {
        return 0.0;
    }
    let (mut s1, mut s2, mut w1, mut w2) = (0.0, 0.0, 0.0, 0.0);
    for (&ci, &wi) in c.iter().zip(w) {
        s1 += ci * wi;
        s2 += ci * ci * wi * wi;
        w1 += wi;
        w2 += wi * wi;
    }
    let value = (s1 * s1 - s2) / (w1 * w1 - w2);
    // Cancellation can push the quotient an ulp outside the hull of the pair products.
    let lo = c.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let hi = c.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    if lo >= 0.0 && value < 0.0 {
        0.0
    } else if hi <= 1.0 && lo >= 0.0 && value > 1.0 {
        1.0
    } else {
        value
    }
}

/// Partial derivatives of [`interact_closed_form`] with respect to `c` and `w`.
pub fn interact_gradient(c: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = c.len();
    if active_weights(w) < MIN_ACTIVE_WEIGHTS {
        return (vec![0.0; k], vec![0.0; k]);
    }
    let (mut s1, mut s2, mut w1, mut w2) = (0.0, 0.0, 0.0, 0.0);
    for (&ci, &wi) in c.iter().zip(w) {
        s1 += ci * wi;
        s2 += ci * ci * wi * wi;
        w1 += wi;
        w2 += wi * wi;
    }
    let num = s1 * s1 - s2;
    let den = w1 * w1 - w2;
    let dc = (0..k)
        .map(|i| (2.0 * s1 * w[i] - 2.0 * c[i] * w[i] * w[i]) / den)
        .collect();
    let dw = (0..k)
        .map(|i| {
            let dnum = 2.0 * s1 * c[i] - 2.0 * c[i] * c[i] * w[i];
            let dden = 2.0 * w1 - 2.0 * w[i];
            (dnum * den - num * dden) / (den * den)
        })
        .collect();
    (dc, dw)
}
