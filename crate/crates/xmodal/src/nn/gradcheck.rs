use crate::rng::RngState;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Central-difference check of `analytic` against `loss` at `params`.
///
/// For each checked coordinate i the numeric estimate is
/// `(loss(p + eps*e_i) - loss(p - eps*e_i)) / (2*eps)` and the relative error
/// uses `max(|numeric|, |analytic|, 1e-12)` as denominator. When the
/// parameter vector is larger than `max_coords`, a deterministic random
/// subset of coordinates is checked.
///
/// `loss` must be deterministic and smooth near `params`; the caller is
/// responsible for staying away from rectifier kinks.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
    max_coords: usize,
    rng: &mut RngState,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    assert!(
        (1e-8..=1e-4).contains(&epsilon),
        "epsilon {epsilon} outside sensible central-difference range"
    );
    let coords: Vec<usize> = if params.len() <= max_coords {
        (0..params.len()).collect()
    } else {
        rng.choose_distinct(params.len(), max_coords)
    };

    let mut scratch = params.to_vec();
    let mut report = GradCheckReport {
        checked: coords.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &i in &coords {
        let orig = scratch[i];
        scratch[i] = orig + epsilon;
        let plus = loss(&scratch);
        scratch[i] = orig - epsilon;
        let minus = loss(&scratch);
        scratch[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let ana = analytic[i];
        let rel = (numeric - ana).abs() / numeric.abs().max(ana.abs()).max(1e-12);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.worst_analytic = ana;
            report.worst_numeric = numeric;
        }
    }
    report
}
