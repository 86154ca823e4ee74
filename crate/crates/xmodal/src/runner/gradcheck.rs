//! Self-contained gradient verification for the `gradcheck` subcommand.
//!
//! Builds a fixed small fixture (three modalities, one hidden layer, both
//! density families) and compares analytic gradients against central finite
//! differences over every parameter. The relative error uses a denominator
//! floor of 1e-4: with f64 central differences at epsilon 1e-6 the absolute
//! noise sits near 1e-10, so a healthy build clears a 1e-5 tolerance with
//! orders of magnitude to spare while any real backward bug lands far above
//! it.

use std::collections::BTreeMap;

use crate::crossmodal::{regularized_objective, ArchConfig, CrossModalNet};
use crate::density::{
    fit_gmm_em, DensityModel, DiagonalGaussian, EmConfig, LayerDensitySet, LayerId,
};
use crate::error::{Error, Result};
use crate::evalkit::align;
use crate::rng::RngState;
use crate::synthdata::ModalityId;
use crate::tensor::Tensor;

const EPSILON: f64 = 1e-6;
const DENOM_FLOOR: f64 = 1e-4;

pub struct GradCheckOutcome {
    /// Human table, one row per check.
    pub text: String,
    pub passed: bool,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

struct CheckRow {
    name: String,
    coords: usize,
    max_rel_err: f64,
    worst: String,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Central-difference gradient of `loss` over every net parameter, compared
/// against `analytic` (in `flat_params` order).
fn sweep_params<F>(net: &CrossModalNet, analytic: &[f64], mut loss: F) -> Result<(f64, String)>
where
    F: FnMut(&CrossModalNet) -> Result<f64>,
{
    let spans = net.param_spans();
    let params = net.flat_params();
    assert_eq!(params.len(), analytic.len());
    let name_of = |i: usize| {
        let mut at = 0usize;
        for (name, len) in &spans {
            if i < at + len {
                return format!("{name}[{}]", i - at);
            }
            at += len;
        }
        format!("param[{i}]")
    };
    let mut scratch = net.clone();
    let mut worst = (0.0f64, String::from("-"));
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] = params[i] + EPSILON;
        scratch.load_flat_params(&p)?;
        let up = loss(&scratch)?;
        p[i] = params[i] - EPSILON;
        scratch.load_flat_params(&p)?;
        let down = loss(&scratch)?;
        let numeric = (up - down) / (2.0 * EPSILON);
        let err = rel_err(analytic[i], numeric);
        if err > worst.0 {
            worst = (err, name_of(i));
        }
    }
    Ok(worst)
}

fn random_batch(dim: usize, n: usize, rng: &mut RngState) -> Tensor {
    let mut t = Tensor::zeros(vec![n, dim]);
    for v in t.as_mut_slice() {
        *v = rng.normal(0.0, 1.0);
    }
    t
}

fn fixture(seed: u64) -> Result<(CrossModalNet, BTreeMap<ModalityId, Tensor>, Vec<u16>)> {
    let arch = ArchConfig {
        shared_dim: 6,
        hidden_dim: 6,
        classes: 4,
        encoder_widths: vec![8],
        init_std: 0.5,
    };
    let dims: BTreeMap<ModalityId, usize> = [(0u16, 5usize), (1, 7), (2, 9)].into();
    let net = CrossModalNet::init_gaussian(&arch, &dims, &RngState::new(seed))?;
    let mut rng = RngState::new(seed).fork("inputs");
    let batch = 8;
    let inputs: BTreeMap<ModalityId, Tensor> = dims
        .iter()
        .map(|(&m, &d)| (m, random_batch(d, batch, &mut rng)))
        .collect();
    let labels: Vec<u16> = (0..batch).map(|i| (i % 4) as u16).collect();
    Ok((net, inputs, labels))
}

/// Densities fitted on the fixture net's own activations so the penalties
/// are exercised away from their minima but inside a sane range. The fit
/// uses its own wide sample and a generous variance floor: collapsed
/// variances make the mixture responsibilities flip within the finite
/// difference step, which breaks the numeric side, not the analytic one.
fn fixture_densities(
    net: &CrossModalNet,
    input_dim: usize,
    seed: u64,
) -> Result<(LayerDensitySet, LayerDensitySet)> {
    let mut rng = RngState::new(seed).fork("density_sample");
    let sample = random_batch(input_dim, 64, &mut rng);
    let trace = net.forward(0, &sample)?;
    let em = EmConfig {
        variance_floor: 0.05,
        ..EmConfig::default()
    };
    let mut gauss = LayerDensitySet::new();
    let mut gmm = LayerDensitySet::new();
    for id in LayerId::REGULARIZABLE {
        let taps = trace.tap(id);
        gauss.insert(id, DensityModel::Gaussian(DiagonalGaussian::fit(taps, 0.05)?));
        let mut rng = RngState::new(seed).fork(id.name());
        let fit = fit_gmm_em(taps, 2, &em, &mut rng)?;
        gmm.insert(id, DensityModel::Gmm(fit.model));
    }
    Ok((gauss, gmm))
}

fn lambdas(value: f64) -> BTreeMap<LayerId, f64> {
    LayerId::REGULARIZABLE.into_iter().map(|id| (id, value)).collect()
}

/// Direct check of the penalty gradients themselves, independent of the
/// network: perturb the activation vector coordinate by coordinate.
fn check_penalty(model: &DensityModel, rng: &mut RngState) -> (f64, String) {
    let dim = model.dim();
    let mut worst = (0.0f64, String::from("-"));
    for sample in 0..4 {
        let h: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.5)).collect();
        let mut analytic = vec![0.0; dim];
        model.penalty_grad_into(&h, 1.0, &mut analytic);
        for i in 0..dim {
            let mut hp = h.clone();
            hp[i] += EPSILON;
            let up = model.penalty(&hp);
            hp[i] = h[i] - EPSILON;
            let down = model.penalty(&hp);
            let numeric = (up - down) / (2.0 * EPSILON);
            let err = rel_err(analytic[i], numeric);
            if err > worst.0 {
                worst = (err, format!("h[{sample}][{i}]"));
            }
        }
    }
    worst
}

/// Run every check and render the verdict table. `tolerance` bounds the
/// worst relative error; the stock build passes at 1e-5.
pub fn run_gradcheck(tolerance: f64, seed: u64) -> Result<GradCheckOutcome> {
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(Error::Config(format!("gradcheck tolerance must be positive, got {tolerance}")));
    }
    let (net, inputs, labels) = fixture(seed)?;
    let (gauss, gmm) = fixture_densities(&net, inputs[&0].cols(), seed)?;
    let zero = lambdas(0.0);
    let reg = lambdas(0.3);
    let n_params = net.flat_params().len();
    let mut rows = Vec::new();

    for (&m, input) in &inputs {
        let (_, grads) = regularized_objective(&net, m, input, &labels, None, &zero)?;
        let analytic = net.flat_grads(&grads);
        let (err, at) = sweep_params(&net, &analytic, |n| {
            Ok(regularized_objective(n, m, input, &labels, None, &zero)?.0.total)
        })?;
        rows.push(CheckRow {
            name: format!("cross-entropy, modality {m}"),
            coords: n_params,
            max_rel_err: err,
            worst: at,
        });
    }

    let mut rng = RngState::new(seed).fork("penalty_points");
    for (label, set) in [("gaussian", &gauss), ("gmm", &gmm)] {
        for id in LayerId::REGULARIZABLE {
            let model = set.get(id).expect("fixture fits every layer");
            let (err, at) = check_penalty(model, &mut rng);
            rows.push(CheckRow {
                name: format!("{label} penalty at {id}"),
                coords: 4 * model.dim(),
                max_rel_err: err,
                worst: at,
            });
        }
    }

    for (label, set) in [("gaussian", &gauss), ("gmm", &gmm)] {
        let (_, grads) = regularized_objective(&net, 1, &inputs[&1], &labels, Some(set), &reg)?;
        let analytic = net.flat_grads(&grads);
        let (err, at) = sweep_params(&net, &analytic, |n| {
            Ok(regularized_objective(n, 1, &inputs[&1], &labels, Some(set), &reg)?.0.total)
        })?;
        rows.push(CheckRow {
            name: format!("full objective, {label} penalties"),
            coords: n_params,
            max_rel_err: err,
            worst: at,
        });
    }

    let max_rel_err = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let passed = max_rel_err <= tolerance;
    let mut table = vec![vec![
        "check".to_string(),
        "coords".into(),
        "max rel err".into(),
        "worst at".into(),
        "ok".into(),
    ]];
    for r in &rows {
        table.push(vec![
            r.name.clone(),
            r.coords.to_string(),
            format!("{:.2e}", r.max_rel_err),
            r.worst.clone(),
            if r.max_rel_err <= tolerance { "yes".into() } else { "NO".into() },
        ]);
    }
    let mut text = format!("gradient check, tolerance {tolerance:.0e}, epsilon {EPSILON:.0e}\n");
    text.push_str(&align(&table));
    text.push_str(&format!(
        "worst over all checks: {max_rel_err:.2e} -> {}\n",
        if passed { "pass" } else { "FAIL" }
    ));
    Ok(GradCheckOutcome {
        text,
        passed,
        max_rel_err,
        tolerance,
    })
}
