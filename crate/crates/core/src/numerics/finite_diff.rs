//! Central finite differences, independent of the tape.

/// Step used by the gradient checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Below this magnitude both gradients are treated as zero.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)`, or 0 when both sit under [`MAGNITUDE_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < MAGNITUDE_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientComparison {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradientComparison {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = GradientComparison {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > worst.max_relative_error {
            worst = GradientComparison {
                max_relative_error: e,
                worst_index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    worst
}
