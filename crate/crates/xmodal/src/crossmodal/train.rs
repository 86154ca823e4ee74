//! Strategy execution: anchor pretraining, density fitting, and the
//! round-robin multi-modality training loop.
//!
//! Determinism contract: everything a run draws comes from labeled forks of
//! the single rng handed in. Net initialization forks "strategy_init",
//! batch sampling forks "batches" (or "batches/{m}" for the per-modality
//! private runs), and density fitting is expected to happen on its own fork
//! before training starts. Labels never include the strategy name, so two
//! strategies with the same schedule and seed consume identical streams.
//! That is what makes the reduction identities (a penalty with lambda 0 is
//! exactly no penalty) hold bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::objective::{regularized_objective, LossBreakdown};
use super::strategy::{trainable_set, RegConfig, StrategySpec, TrainScope};
use super::{ArchConfig, CrossModalNet, NetGrads, StrategyKind};
use crate::density::{
    fit_gmm_em, DensityKind, DensityModel, DiagonalGaussian, EmConfig, LayerDensitySet, LayerId,
};
use crate::error::{Error, Result};
use crate::nn::{sgd_step, ParamUpdate};
use crate::rng::RngState;
use crate::synthdata::{CrossModalDataset, ModalityId, Split};
use crate::tensor::Tensor;

/// One logged training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub modality: ModalityId,
    pub ce: f64,
    /// Per-layer penalty contributions (lambda times batch-mean penalty).
    pub reg: BTreeMap<String, f64>,
    pub total: f64,
}

impl TrainLogEntry {
    fn from_breakdown(iteration: usize, modality: ModalityId, b: &LossBreakdown) -> Self {
        TrainLogEntry {
            iteration,
            modality,
            ce: b.ce,
            reg: b.reg.clone(),
            total: b.total,
        }
    }
}

/// What a strategy produces: one shared net, or one private net per modality.
/// A handful of these exist per process, so the variant size gap is fine.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum TrainedModel {
    Shared(CrossModalNet),
    Individual(BTreeMap<ModalityId, CrossModalNet>),
}

impl TrainedModel {
    /// The network that serves this modality.
    pub fn net_for(&self, modality: ModalityId) -> Result<&CrossModalNet> {
        match self {
            TrainedModel::Shared(net) => {
                net.branch(modality)?;
                Ok(net)
            }
            TrainedModel::Individual(nets) => {
                nets.get(&modality).ok_or(Error::UnknownModality(modality))
            }
        }
    }

    pub fn extract(&self, modality: ModalityId, input: &Tensor, layer: LayerId) -> Result<Tensor> {
        self.net_for(modality)?.extract_features(modality, input, layer)
    }
}

/// The anchor net and the densities fitted from its activations; everything
/// a non-scratch strategy inherits.
pub struct AnchorArtifacts<'a> {
    pub net: &'a CrossModalNet,
    pub densities: Option<&'a LayerDensitySet>,
}

/// Plain supervised training of the anchor modality's network. The result
/// initializes the shared trunk of every non-scratch strategy.
pub fn train_anchor(
    data: &CrossModalDataset,
    arch: &ArchConfig,
    sched: &super::CurriculumSchedule,
    rng: &RngState,
) -> Result<(CrossModalNet, Vec<TrainLogEntry>)> {
    arch.validate()?;
    sched.validate()?;
    if arch.classes != data.class_count() {
        return Err(Error::Config(format!(
            "arch declares {} classes but the dataset has {}",
            arch.classes,
            data.class_count()
        )));
    }
    let anchor = data.anchor;
    let present = data.classes_present(anchor, Split::Train);
    for class in 0..data.class_count() {
        if !present.contains(&class) {
            return Err(Error::MissingClass {
                class,
                context: "anchor training split".into(),
            });
        }
    }

    let dims: BTreeMap<ModalityId, usize> = [(anchor, data.input_dim(anchor))].into();
    let mut net = CrossModalNet::init_gaussian(arch, &dims, &rng.fork("init"))?;
    let idx = data.indices(anchor, Split::Train);
    let mut brng = rng.fork("batches");
    let lambdas = BTreeMap::new();
    let scope = TrainScope { encoder: true, trunk: true };
    let mut log = Vec::with_capacity(sched.total_iters);
    for iteration in 0..sched.total_iters {
        let batch = sample_batch(&idx, sched.batch_size, &mut brng);
        let (x, labels) = data.gather(&batch)?;
        let breakdown = run_step(
            &mut net, anchor, &x, &labels, None, &lambdas, scope, sched.lr,
            sched.weight_decay, iteration,
        )?;
        log.push(TrainLogEntry::from_breakdown(iteration, anchor, &breakdown));
    }
    Ok((net, log))
}

/// Fit one density per requested layer from the net's activations on
/// `input` (normally the anchor training split).
pub fn fit_layer_densities(
    net: &CrossModalNet,
    modality: ModalityId,
    input: &Tensor,
    layers: &[LayerId],
    reg: &RegConfig,
    rng: &RngState,
) -> Result<LayerDensitySet> {
    reg.validate()?;
    let mut srng = rng.fork("subsample");
    let acts =
        super::collect_activations(net, modality, input, layers, reg.max_fit_samples, &mut srng)?;
    let mut set = LayerDensitySet::new();
    for &id in layers {
        let samples = &acts[&id];
        let model = match reg.density_kind {
            DensityKind::Gaussian => {
                DensityModel::Gaussian(DiagonalGaussian::fit(samples, reg.fit_floor)?)
            }
            DensityKind::Gmm => {
                let mut erng = rng.fork(&format!("em/{}", id.name()));
                let cfg = EmConfig {
                    variance_floor: reg.fit_floor,
                    tol: reg.em_tol,
                    max_iters: reg.em_max_iters,
                };
                DensityModel::Gmm(fit_gmm_em(samples, reg.k, &cfg, &mut erng)?.model)
            }
        };
        set.insert(id, model);
    }
    Ok(set)
}

/// Execute one training strategy over the whole dataset.
pub fn train_strategy(
    spec: &StrategySpec,
    arch: &ArchConfig,
    data: &CrossModalDataset,
    anchor: Option<&AnchorArtifacts<'_>>,
    rng: &RngState,
) -> Result<(TrainedModel, Vec<TrainLogEntry>)> {
    spec.validate()?;
    arch.validate()?;
    if arch.classes != data.class_count() {
        return Err(Error::Config(format!(
            "arch declares {} classes but the dataset has {}",
            arch.classes,
            data.class_count()
        )));
    }

    let modalities: Vec<ModalityId> = (0..data.modality_count() as ModalityId).collect();
    for &m in &modalities {
        if data.indices(m, Split::Train).is_empty() {
            return Err(Error::InsufficientData {
                context: format!("training split of modality '{}'", data.modality_name(m)),
                needed: 1,
                got: 0,
            });
        }
    }

    let anchor_net = match anchor {
        Some(a) => {
            check_anchor_compat(a.net, arch, data)?;
            Some(a.net)
        }
        None => None,
    };
    if spec.kind.uses_anchor_init() && anchor_net.is_none() {
        return Err(Error::Config(format!(
            "strategy {} needs anchor artifacts",
            spec.kind
        )));
    }

    // The densities only have to exist where a penalty is live.
    let densities = anchor.and_then(|a| a.densities);
    if spec.kind.regularizer_active() {
        for (&layer, &lambda) in &spec.reg.lambdas {
            if lambda == 0.0 {
                continue;
            }
            let model = densities
                .and_then(|d| d.get(layer))
                .ok_or_else(|| Error::MissingDensity(layer.name().into()))?;
            if model.kind() != spec.reg.density_kind {
                return Err(Error::Config(format!(
                    "density for '{layer}' is {} but strategy {} expects {}",
                    model.kind().name(),
                    spec.kind,
                    spec.reg.density_kind.name()
                )));
            }
        }
    }

    if spec.kind == StrategyKind::BlIndividual {
        train_individual(spec, arch, data, anchor_net.expect("checked above"), rng)
    } else {
        train_shared(spec, arch, data, anchor_net, densities, rng)
    }
}

fn check_anchor_compat(
    net: &CrossModalNet,
    arch: &ArchConfig,
    data: &CrossModalDataset,
) -> Result<()> {
    let trunk = &net.trunk;
    if trunk.fc6.in_dim() != arch.shared_dim
        || trunk.fc6.out_dim() != arch.hidden_dim
        || trunk.classes() != arch.classes
    {
        return Err(Error::ShapeMismatch {
            context: "anchor trunk".into(),
            expected: format!(
                "dims {}x{} with {} classes",
                arch.shared_dim, arch.hidden_dim, arch.classes
            ),
            got: format!(
                "dims {}x{} with {} classes",
                trunk.fc6.in_dim(),
                trunk.fc6.out_dim(),
                trunk.classes()
            ),
        });
    }
    let branch = net.branch(data.anchor)?;
    if branch.encoder.in_dim() != data.input_dim(data.anchor) {
        return Err(Error::ShapeMismatch {
            context: "anchor branch".into(),
            expected: format!("input dim {}", data.input_dim(data.anchor)),
            got: format!("{}", branch.encoder.in_dim()),
        });
    }
    Ok(())
}

fn train_shared(
    spec: &StrategySpec,
    arch: &ArchConfig,
    data: &CrossModalDataset,
    anchor_net: Option<&CrossModalNet>,
    densities: Option<&LayerDensitySet>,
    rng: &RngState,
) -> Result<(TrainedModel, Vec<TrainLogEntry>)> {
    let modalities: Vec<ModalityId> = (0..data.modality_count() as ModalityId).collect();
    let mut input_dims = BTreeMap::new();
    for &m in &modalities {
        input_dims.insert(m, data.input_dim(m));
    }

    let init_rng = rng.fork("strategy_init");
    let mut net = CrossModalNet::init_gaussian(arch, &input_dims, &init_rng)?;
    if let Some(a) = anchor_net {
        net.trunk = a.trunk.clone();
        let branch = a.branch(data.anchor)?;
        net.insert_branch(branch.clone())?;
    }

    let train_idx: BTreeMap<ModalityId, Vec<usize>> = modalities
        .iter()
        .map(|&m| (m, data.indices(m, Split::Train)))
        .collect();

    let mut brng = rng.fork("batches");
    let no_lambdas = BTreeMap::new();
    let mut log = Vec::with_capacity(spec.curriculum.total_iters);
    for iteration in 0..spec.curriculum.total_iters {
        let m = modalities[iteration % modalities.len()];
        let batch = sample_batch(&train_idx[&m], spec.curriculum.batch_size, &mut brng);
        let (x, labels) = data.gather(&batch)?;
        let phase = spec.kind.phase(iteration, spec.curriculum.freeze_iters);
        let scope = trainable_set(spec.kind, phase);
        let lambdas = if spec.penalizes(m, data.anchor) {
            &spec.reg.lambdas
        } else {
            &no_lambdas
        };
        let breakdown = run_step(
            &mut net, m, &x, &labels, densities, lambdas, scope,
            spec.curriculum.lr, spec.curriculum.weight_decay, iteration,
        )?;
        log.push(TrainLogEntry::from_breakdown(iteration, m, &breakdown));
    }
    Ok((TrainedModel::Shared(net), log))
}

/// One fully private network per modality, trained sequentially. Each net
/// starts from the anchor parameters where shapes permit (the trunk always
/// does; an encoder only if its input width matches the anchor's).
fn train_individual(
    spec: &StrategySpec,
    arch: &ArchConfig,
    data: &CrossModalDataset,
    anchor_net: &CrossModalNet,
    rng: &RngState,
) -> Result<(TrainedModel, Vec<TrainLogEntry>)> {
    let modalities: Vec<ModalityId> = (0..data.modality_count() as ModalityId).collect();
    let init_rng = rng.fork("strategy_init");
    let anchor_branch = anchor_net.branch(data.anchor)?;
    let no_lambdas = BTreeMap::new();
    let scope = TrainScope { encoder: true, trunk: true };

    let mut nets = BTreeMap::new();
    let mut log = Vec::new();
    for &m in &modalities {
        let dims: BTreeMap<ModalityId, usize> = [(m, data.input_dim(m))].into();
        let mut net = CrossModalNet::init_gaussian(arch, &dims, &init_rng)?;
        net.trunk = anchor_net.trunk.clone();
        if anchor_branch.encoder.in_dim() == data.input_dim(m) {
            net.branch_mut(m)?.encoder = anchor_branch.encoder.clone();
        }

        let idx = data.indices(m, Split::Train);
        let mut brng = rng.fork(&format!("batches/{m}"));
        for iteration in 0..spec.curriculum.total_iters {
            let batch = sample_batch(&idx, spec.curriculum.batch_size, &mut brng);
            let (x, labels) = data.gather(&batch)?;
            let breakdown = run_step(
                &mut net, m, &x, &labels, None, &no_lambdas, scope,
                spec.curriculum.lr, spec.curriculum.weight_decay, iteration,
            )?;
            log.push(TrainLogEntry::from_breakdown(iteration, m, &breakdown));
        }
        nets.insert(m, net);
    }
    Ok((TrainedModel::Individual(nets), log))
}

/// Uniform batch with replacement; one rng draw per row.
fn sample_batch(idx: &[usize], batch_size: usize, rng: &mut RngState) -> Vec<usize> {
    (0..batch_size).map(|_| idx[rng.index(idx.len())]).collect()
}

/// One optimizer step. A non-finite loss, or non-finite gradients caught by
/// the sgd shape/finiteness screen, surface as divergence at this iteration.
#[allow(clippy::too_many_arguments)]
fn run_step(
    net: &mut CrossModalNet,
    modality: ModalityId,
    x: &Tensor,
    labels: &[u16],
    densities: Option<&LayerDensitySet>,
    lambdas: &BTreeMap<LayerId, f64>,
    scope: TrainScope,
    lr: f64,
    weight_decay: f64,
    iteration: usize,
) -> Result<LossBreakdown> {
    let (breakdown, grads) =
        match regularized_objective(net, modality, x, labels, densities, lambdas) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { iteration }),
            Err(e) => return Err(e),
        };
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged { iteration });
    }
    match apply_sgd(net, &grads, scope, lr, weight_decay) {
        Ok(()) => Ok(breakdown),
        Err(Error::NonFinite(_)) => Err(Error::Diverged { iteration }),
        Err(e) => Err(e),
    }
}

fn apply_sgd(
    net: &mut CrossModalNet,
    grads: &NetGrads,
    scope: TrainScope,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let m = grads.modality;
    let mut names: Vec<String> = Vec::new();
    if scope.encoder {
        for j in 0..grads.encoder.len() {
            names.push(format!("branch.{m}.enc{j}.weight"));
            names.push(format!("branch.{m}.enc{j}.bias"));
        }
    }

    let CrossModalNet { branches, trunk } = net;
    let mut updates: Vec<ParamUpdate<'_>> = Vec::new();
    if scope.encoder {
        let branch = branches.get_mut(&m).ok_or(Error::UnknownModality(m))?;
        for (j, (layer, lg)) in branch.encoder.layers_mut().zip(&grads.encoder).enumerate() {
            updates.push(ParamUpdate {
                name: &names[2 * j],
                value: &mut layer.weight,
                grad: &lg.weight,
                decay: true,
            });
            updates.push(ParamUpdate {
                name: &names[2 * j + 1],
                value: &mut layer.bias,
                grad: &lg.bias,
                decay: false,
            });
        }
    }
    if scope.trunk {
        for (name, layer, lg) in [
            ("trunk.fc6", &mut trunk.fc6, &grads.fc6),
            ("trunk.fc7", &mut trunk.fc7, &grads.fc7),
            ("trunk.classifier", &mut trunk.classifier, &grads.classifier),
        ] {
            updates.push(ParamUpdate {
                name,
                value: &mut layer.weight,
                grad: &lg.weight,
                decay: true,
            });
            updates.push(ParamUpdate {
                name,
                value: &mut layer.bias,
                grad: &lg.bias,
                decay: false,
            });
        }
    }
    sgd_step(&mut updates, lr, weight_decay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossmodal::CurriculumSchedule;
    use crate::synthdata::{generate_dataset, GeneratorSpec, Nonlinearity, RendererSpec};

    /// Small but genuinely learnable three-modality world.
    fn tiny_data(seed: u64) -> CrossModalDataset {
        let spec = GeneratorSpec {
            classes: 3,
            latent_dim: 8,
            parts: 2,
            prototype_scale: 3.0,
            spread: 0.4,
            train_per_class: 12,
            val_per_class: 3,
            anchor: 0,
            renderers: vec![
                RendererSpec {
                    name: "a".into(),
                    render_dim: 6,
                    distractor_dims: 1,
                    nonlinearity: Nonlinearity::Tanh,
                    noise_std: 0.05,
                },
                RendererSpec {
                    name: "b".into(),
                    render_dim: 6,
                    distractor_dims: 1,
                    nonlinearity: Nonlinearity::Linear,
                    noise_std: 0.05,
                },
                RendererSpec {
                    name: "t".into(),
                    render_dim: 9,
                    distractor_dims: 1,
                    nonlinearity: Nonlinearity::Sign,
                    noise_std: 0.1,
                },
            ],
        };
        generate_dataset(&spec, seed).unwrap()
    }

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            shared_dim: 8,
            hidden_dim: 8,
            classes: 3,
            encoder_widths: vec![10],
            init_std: 0.3,
        }
    }

    fn tiny_sched(total: usize, freeze: usize) -> CurriculumSchedule {
        CurriculumSchedule {
            freeze_iters: freeze,
            total_iters: total,
            lr: 0.1,
            batch_size: 8,
            weight_decay: 5e-4,
        }
    }

    fn accuracy(net: &CrossModalNet, data: &CrossModalDataset, m: ModalityId) -> f64 {
        let (x, y) = data.gather(&data.indices(m, Split::Train)).unwrap();
        let trace = net.forward(m, &x).unwrap();
        let logits = trace.logits();
        let mut hits = 0usize;
        for (r, &label) in y.iter().enumerate() {
            let row = logits.row(r);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == usize::from(label) {
                hits += 1;
            }
        }
        hits as f64 / y.len() as f64
    }

    fn anchor_pair(data: &CrossModalDataset, iters: usize, seed: u64) -> CrossModalNet {
        let (net, _) =
            train_anchor(data, &tiny_arch(), &tiny_sched(iters, 0), &RngState::new(seed)).unwrap();
        net
    }

    #[test]
    fn anchor_learns_separable_data() {
        let data = tiny_data(1);
        let net = anchor_pair(&data, 600, 2);
        let acc = accuracy(&net, &data, 0);
        assert!(acc > 0.95, "anchor training accuracy {acc}");
    }

    #[test]
    fn anchor_training_is_deterministic() {
        let data = tiny_data(1);
        let a = anchor_pair(&data, 60, 3);
        let b = anchor_pair(&data, 60, 3);
        let pa = a.flat_params();
        let pb = b.flat_params();
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_iterations_returns_the_initialization() {
        let data = tiny_data(1);
        let net = anchor_pair(&data, 0, 4);
        let dims: BTreeMap<ModalityId, usize> = [(0u16, data.input_dim(0))].into();
        let fresh =
            CrossModalNet::init_gaussian(&tiny_arch(), &dims, &RngState::new(4).fork("init"))
                .unwrap();
        let a = net.flat_params();
        let b = fresh.flat_params();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn anchor_requires_every_class() {
        let data = tiny_data(1);
        let mut crippled = data.clone();
        crippled
            .examples
            .retain(|e| !(e.modality == 0 && e.split == Split::Train && e.class == 2));
        match train_anchor(&crippled, &tiny_arch(), &tiny_sched(10, 0), &RngState::new(5)) {
            Err(Error::MissingClass { class: 2, .. }) => {}
            other => panic!("expected MissingClass, got {other:?}"),
        }
    }

    fn densities_for(
        data: &CrossModalDataset,
        anchor: &CrossModalNet,
        kind: DensityKind,
        seed: u64,
    ) -> LayerDensitySet {
        let (x, _) = data.gather(&data.indices(data.anchor, Split::Train)).unwrap();
        let mut reg = RegConfig::default_desk();
        reg.density_kind = kind;
        reg.k = 2;
        fit_layer_densities(
            anchor,
            data.anchor,
            &x,
            &LayerId::REGULARIZABLE,
            &reg,
            &RngState::new(seed).fork("densities"),
        )
        .unwrap()
    }

    fn run_kind(
        kind: StrategyKind,
        lambda: f64,
        lr: f64,
        data: &CrossModalDataset,
        anchor: &CrossModalNet,
        densities: &LayerDensitySet,
        seed: u64,
    ) -> (TrainedModel, Vec<TrainLogEntry>) {
        let mut reg = RegConfig::default_desk();
        reg.k = 2;
        for id in LayerId::REGULARIZABLE {
            reg.lambdas.insert(id, lambda);
        }
        let mut sched = tiny_sched(36, 18);
        sched.lr = lr;
        let spec = StrategySpec::new(kind, sched, reg);
        let artifacts = AnchorArtifacts {
            net: anchor,
            densities: Some(densities),
        };
        train_strategy(&spec, &tiny_arch(), data, Some(&artifacts), &RngState::new(seed)).unwrap()
    }

    fn params_bits_eq(a: &TrainedModel, b: &TrainedModel) -> bool {
        match (a, b) {
            (TrainedModel::Shared(x), TrainedModel::Shared(y)) => {
                let (px, py) = (x.flat_params(), y.flat_params());
                px.len() == py.len()
                    && px.iter().zip(&py).all(|(u, v)| u.to_bits() == v.to_bits())
            }
            _ => false,
        }
    }

    #[test]
    fn c_joint_with_zero_lambda_is_exactly_a_tune_free() {
        let data = tiny_data(7);
        let anchor = anchor_pair(&data, 120, 8);
        let densities = densities_for(&data, &anchor, DensityKind::Gmm, 9);
        let (c, _) = run_kind(StrategyKind::CJoint, 0.0, 0.1, &data, &anchor, &densities, 10);
        let (a, _) = run_kind(StrategyKind::ATuneFree, 0.0, 0.1, &data, &anchor, &densities, 10);
        assert!(params_bits_eq(&c, &a));
    }

    #[test]
    fn b_strategies_with_zero_lambda_are_exactly_shared_upper() {
        let data = tiny_data(7);
        let anchor = anchor_pair(&data, 120, 8);
        let gmm = densities_for(&data, &anchor, DensityKind::Gmm, 9);
        let gauss = densities_for(&data, &anchor, DensityKind::Gaussian, 9);
        let (upper, _) = run_kind(StrategyKind::BlSharedUpper, 0.0, 0.1, &data, &anchor, &gmm, 11);
        let (bg, _) = run_kind(StrategyKind::BGauss, 0.0, 0.1, &data, &anchor, &gauss, 11);
        let (bm, _) = run_kind(StrategyKind::BGmm, 0.0, 0.1, &data, &anchor, &gmm, 11);
        assert!(params_bits_eq(&bg, &upper));
        assert!(params_bits_eq(&bm, &upper));
    }

    #[test]
    fn live_lambda_changes_the_trajectory() {
        let data = tiny_data(7);
        let anchor = anchor_pair(&data, 120, 8);
        let densities = densities_for(&data, &anchor, DensityKind::Gmm, 9);
        let (zero, _) = run_kind(StrategyKind::BGmm, 0.0, 5e-3, &data, &anchor, &densities, 12);
        let (live, _) = run_kind(StrategyKind::BGmm, 0.1, 5e-3, &data, &anchor, &densities, 12);
        assert!(!params_bits_eq(&zero, &live));
    }

    #[test]
    fn frozen_strategy_leaves_the_trunk_bit_identical() {
        let data = tiny_data(7);
        let anchor = anchor_pair(&data, 120, 8);
        let densities = densities_for(&data, &anchor, DensityKind::Gmm, 9);
        let (model, _) = run_kind(StrategyKind::ATuneFrozen, 0.0, 0.1, &data, &anchor, &densities, 13);
        match model {
            TrainedModel::Shared(net) => assert!(net.trunk.bits_eq(&anchor.trunk)),
            _ => panic!("expected a shared model"),
        }
        // The free strategies must move it.
        let (model, _) = run_kind(StrategyKind::BlSharedUpper, 0.0, 0.1, &data, &anchor, &densities, 13);
        match model {
            TrainedModel::Shared(net) => assert!(!net.trunk.bits_eq(&anchor.trunk)),
            _ => panic!("expected a shared model"),
        }
    }

    #[test]
    fn round_robin_visits_each_modality_once_per_cycle() {
        let data = tiny_data(7);
        let anchor = anchor_pair(&data, 60, 8);
        let densities = densities_for(&data, &anchor, DensityKind::Gmm, 9);
        let (_, log) = run_kind(StrategyKind::BlSharedUpper, 0.0, 0.1, &data, &anchor, &densities, 14);
        assert_eq!(log.len(), 36);
        for cycle in log.chunks(3) {
            let ms: Vec<ModalityId> = cycle.iter().map(|e| e.modality).collect();
            assert_eq!(ms, vec![0, 1, 2]);
        }
    }

    #[test]
    fn penalty_terms_appear_only_for_non_anchor_batches() {
        let data = tiny_data(7);
        let anchor = anchor_pair(&data, 120, 8);
        let densities = densities_for(&data, &anchor, DensityKind::Gmm, 9);
        let (_, log) = run_kind(StrategyKind::BGmm, 0.1, 5e-3, &data, &anchor, &densities, 15);
        for e in &log {
            if e.modality == 0 {
                assert!(e.reg.is_empty(), "anchor batch at {} carries a penalty", e.iteration);
            } else {
                assert_eq!(e.reg.len(), 3);
                let sum: f64 = e.ce + e.reg.values().sum::<f64>();
                assert!((e.total - sum).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn missing_anchor_artifacts_are_rejected() {
        let data = tiny_data(7);
        let spec = StrategySpec::new(
            StrategyKind::ATuneFree,
            tiny_sched(10, 5),
            RegConfig::default_desk(),
        );
        let err = train_strategy(&spec, &tiny_arch(), &data, None, &RngState::new(1))
            .unwrap_err()
            .to_string();
        assert!(err.contains("anchor"), "{err}");
    }

    #[test]
    fn live_penalty_without_densities_is_rejected() {
        let data = tiny_data(7);
        let anchor = anchor_pair(&data, 60, 8);
        let mut reg = RegConfig::default_desk();
        reg.lambdas.insert(LayerId::Fc6, 0.2);
        let spec = StrategySpec::new(StrategyKind::BGmm, tiny_sched(10, 5), reg);
        let artifacts = AnchorArtifacts { net: &anchor, densities: None };
        match train_strategy(&spec, &tiny_arch(), &data, Some(&artifacts), &RngState::new(1)) {
            Err(Error::MissingDensity(_)) => {}
            other => panic!("expected MissingDensity, got {other:?}"),
        }
    }

    #[test]
    fn density_kind_mismatch_is_rejected() {
        let data = tiny_data(7);
        let anchor = anchor_pair(&data, 60, 8);
        let gauss = densities_for(&data, &anchor, DensityKind::Gaussian, 9);
        let mut reg = RegConfig::default_desk();
        reg.k = 2;
        let spec = StrategySpec::new(StrategyKind::BGmm, tiny_sched(10, 5), reg);
        let artifacts = AnchorArtifacts { net: &anchor, densities: Some(&gauss) };
        let err = train_strategy(&spec, &tiny_arch(), &data, Some(&artifacts), &RngState::new(1))
            .unwrap_err()
            .to_string();
        assert!(err.contains("expects"), "{err}");
    }

    #[test]
    fn divergence_reports_the_iteration() {
        let data = tiny_data(7);
        let mut sched = tiny_sched(50, 0);
        sched.lr = 1e9;
        let arch = tiny_arch();
        match train_anchor(&data, &arch, &sched, &RngState::new(2)) {
            Err(Error::Diverged { iteration }) => assert!(iteration > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn individual_model_serves_each_modality_privately() {
        let data = tiny_data(7);
        let anchor = anchor_pair(&data, 120, 8);
        let densities = densities_for(&data, &anchor, DensityKind::Gmm, 9);
        let (model, log) =
            run_kind(StrategyKind::BlIndividual, 0.0, 0.1, &data, &anchor, &densities, 16);
        assert_eq!(log.len(), 3 * 36);
        let nets = match &model {
            TrainedModel::Individual(nets) => nets,
            _ => panic!("expected individual nets"),
        };
        assert_eq!(nets.len(), 3);
        // Private trunks drift apart during finetuning.
        assert!(!nets[&0].trunk.bits_eq(&nets[&1].trunk));
        // Every modality still yields features.
        for m in 0..3u16 {
            let (x, _) = data.gather(&data.indices(m, Split::Val)).unwrap();
            let f = model.extract(m, &x, LayerId::Fc7).unwrap();
            assert_eq!(f.rows(), x.rows());
        }
        // The anchor's private net starts from the anchor and keeps learning.
        let acc = accuracy(&nets[&0], &data, 0);
        assert!(acc > 0.9, "anchor private net accuracy {acc}");
    }

    #[test]
    fn far_batch_penalty_is_finite_under_gmm() {
        // A modality whose activations sit far from every anchor component
        // must still produce a finite penalty (log-sum-exp path).
        let data = tiny_data(7);
        let anchor = anchor_pair(&data, 120, 8);
        let densities = densities_for(&data, &anchor, DensityKind::Gmm, 9);
        let (model, log) = run_kind(StrategyKind::CJoint, 0.1, 5e-3, &data, &anchor, &densities, 17);
        assert!(log.iter().all(|e| e.total.is_finite()));
        match model {
            TrainedModel::Shared(_) => {}
            _ => panic!("expected a shared model"),
        }
    }
}
