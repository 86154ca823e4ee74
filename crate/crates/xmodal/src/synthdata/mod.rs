//! Synthetic unpaired multi-modal scene data.
//!
//! The generative story: a shared latent space of dimension `L` holds one
//! prototype vector per class plus a small dictionary of "part" directions
//! mixed with per-class weights. An example of class `c` draws
//!
//! ```text
//! z = prototype[c] + part_weights[c] * part_dictionary + spread * eps
//! ```
//!
//! and each modality renders `z` through its own frozen random linear map
//! followed by an elementwise nonlinearity, additive observation noise, and
//! appended pure-noise distractor coordinates. Latent draws are independent
//! across modalities, so examples are never paired; only the class label is
//! shared. Every modality can use a different input width, nonlinearity, and
//! noise level, which is what makes transfer between them nontrivial.
//!
//! All feature values are rounded through `f32` at generation time so that
//! the on-disk format (which stores `f32`) round-trips bit-exactly.

mod io;

pub use io::{read_dataset, write_dataset};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, RngState};
use crate::tensor::Tensor;

/// Modalities are addressed by their index in the generator spec.
pub type ModalityId = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Elementwise nonlinearity applied after the mixing map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Linear,
    /// sign(0) is defined as +1 so the output is always in {-1, +1}.
    Sign,
}

impl Nonlinearity {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Linear => v,
            Nonlinearity::Sign => {
                if v >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Linear => "linear",
            Nonlinearity::Sign => "sign",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Nonlinearity::Tanh),
            "linear" => Ok(Nonlinearity::Linear),
            "sign" => Ok(Nonlinearity::Sign),
            other => Err(Error::Config(format!("unknown nonlinearity '{other}'"))),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Nonlinearity::Tanh => 0,
            Nonlinearity::Linear => 1,
            Nonlinearity::Sign => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Nonlinearity::Tanh),
            1 => Some(Nonlinearity::Linear),
            2 => Some(Nonlinearity::Sign),
            _ => None,
        }
    }
}

/// One example of one modality. `latent_id` tags the latent draw that
/// produced it; ids are unique across the whole dataset, which is how we
/// assert unpairedness. Training code must not look at it.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub modality: ModalityId,
    pub class: u16,
    pub split: Split,
    pub latent_id: u64,
    pub features: Vec<f64>,
}

/// Renderer parameters requested by the spec; the frozen mixing matrix is
/// drawn at generation time and stored in [`ModalityRenderer`].
#[derive(Debug, Clone, PartialEq)]
pub struct RendererSpec {
    pub name: String,
    pub render_dim: usize,
    pub distractor_dims: usize,
    pub nonlinearity: Nonlinearity,
    pub noise_std: f64,
}

/// A frozen modality renderer, stored with the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityRenderer {
    pub name: String,
    pub render_dim: usize,
    pub distractor_dims: usize,
    pub nonlinearity: Nonlinearity,
    pub noise_std: f64,
    /// Shape `[render_dim, latent_dim]`.
    pub mixing: Tensor,
}

impl ModalityRenderer {
    /// Width of this modality's feature vectors, distractors included.
    pub fn input_dim(&self) -> usize {
        self.render_dim + self.distractor_dims
    }
}

/// The latent world shared by all modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConceptModel {
    /// Shape `[classes, latent_dim]`.
    pub prototypes: Tensor,
    pub spread: f64,
    /// Shape `[parts, latent_dim]`, rows unit length.
    pub part_dictionary: Tensor,
    /// Shape `[classes, parts]`, rows nonnegative and summing to 1.
    pub part_weights: Tensor,
}

impl SceneConceptModel {
    /// prototype + weighted part mixture, per class. Shape `[classes, latent_dim]`.
    pub fn class_centers(&self) -> Tensor {
        let mut centers = self.part_weights.matmul(&self.part_dictionary);
        centers.add_assign(&self.prototypes);
        centers
    }
}

/// Which classes were removed from which modalities' training splits.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutSpec {
    /// Sorted, deduplicated class ids.
    pub classes: Vec<u16>,
    /// Sorted modality ids; never contains the anchor.
    pub affected: Vec<ModalityId>,
}

/// Draw `round(frac * class_count)` distinct holdout classes.
pub fn sample_holdout_classes(class_count: u16, frac: f64, rng: &mut RngState) -> Result<Vec<u16>> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::Config(format!(
            "holdout fraction must be in [0, 1], got {frac}"
        )));
    }
    let k = (frac * f64::from(class_count)).round() as usize;
    let mut classes: Vec<u16> = rng
        .choose_distinct(class_count as usize, k)
        .into_iter()
        .map(|c| c as u16)
        .collect();
    classes.sort_unstable();
    Ok(classes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub classes: u16,
    pub latent_dim: usize,
    pub parts: usize,
    /// Std of the Gaussian the class prototypes are drawn from.
    pub prototype_scale: f64,
    /// Within-class latent noise std.
    pub spread: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// The modality that always keeps all classes under holdout surgery.
    pub anchor: ModalityId,
    pub renderers: Vec<RendererSpec>,
}

impl GeneratorSpec {
    /// Desk-scale default: ten classes, three modalities. Two "visual"
    /// modalities share a width; the third is text-like with a different
    /// width, a hard sign nonlinearity, and the most noise.
    pub fn default_desk() -> Self {
        GeneratorSpec {
            classes: 10,
            latent_dim: 32,
            parts: 6,
            prototype_scale: 3.0,
            spread: 0.6,
            train_per_class: 100,
            val_per_class: 10,
            anchor: 0,
            renderers: vec![
                RendererSpec {
                    name: "alpha".into(),
                    render_dim: 24,
                    distractor_dims: 8,
                    nonlinearity: Nonlinearity::Tanh,
                    noise_std: 0.05,
                },
                RendererSpec {
                    name: "beta".into(),
                    render_dim: 24,
                    distractor_dims: 8,
                    nonlinearity: Nonlinearity::Linear,
                    noise_std: 0.10,
                },
                RendererSpec {
                    name: "text".into(),
                    render_dim: 40,
                    distractor_dims: 8,
                    nonlinearity: Nonlinearity::Sign,
                    noise_std: 0.20,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("data spec: {msg}")));
        if self.classes == 0 {
            return bad("classes must be >= 1".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if self.parts == 0 {
            return bad("parts must be >= 1".into());
        }
        if !(self.prototype_scale.is_finite() && self.prototype_scale > 0.0) {
            return bad(format!("prototype_scale must be positive, got {}", self.prototype_scale));
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return bad(format!("spread must be >= 0, got {}", self.spread));
        }
        if self.train_per_class == 0 {
            return bad("train_per_class must be >= 1".into());
        }
        if self.val_per_class == 0 {
            return bad("val_per_class must be >= 1".into());
        }
        if self.renderers.is_empty() {
            return bad("at least one modality renderer is required".into());
        }
        if usize::from(self.anchor) >= self.renderers.len() {
            return bad(format!(
                "anchor modality {} out of range, have {} renderers",
                self.anchor,
                self.renderers.len()
            ));
        }
        let mut names = BTreeSet::new();
        for (i, r) in self.renderers.iter().enumerate() {
            if r.name.is_empty() {
                return bad(format!("renderer {i}: empty name"));
            }
            if !names.insert(r.name.as_str()) {
                return bad(format!("renderer {i}: duplicate name '{}'", r.name));
            }
            if r.render_dim == 0 {
                return bad(format!("renderer '{}': render_dim must be >= 1", r.name));
            }
            if !(r.noise_std.is_finite() && r.noise_std >= 0.0) {
                return bad(format!("renderer '{}': noise_std must be >= 0", r.name));
            }
        }
        Ok(())
    }

    /// Canonical text form; its hash ties datasets back to the spec that
    /// produced them.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("classes={}\n", self.classes));
        s.push_str(&format!("latent_dim={}\n", self.latent_dim));
        s.push_str(&format!("parts={}\n", self.parts));
        s.push_str(&format!("prototype_scale={}\n", self.prototype_scale));
        s.push_str(&format!("spread={}\n", self.spread));
        s.push_str(&format!("train_per_class={}\n", self.train_per_class));
        s.push_str(&format!("val_per_class={}\n", self.val_per_class));
        s.push_str(&format!("anchor={}\n", self.anchor));
        for (i, r) in self.renderers.iter().enumerate() {
            s.push_str(&format!(
                "renderer.{i}={}:{}:{}:{}:{}\n",
                r.name,
                r.render_dim,
                r.distractor_dims,
                r.nonlinearity.name(),
                r.noise_std
            ));
        }
        s
    }

    pub fn spec_hash(&self) -> u64 {
        fnv1a64(self.canonical_text().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalDataset {
    pub seed: u64,
    pub spec_hash: u64,
    pub anchor: ModalityId,
    pub concept: SceneConceptModel,
    pub renderers: Vec<ModalityRenderer>,
    pub holdout: Option<HoldoutSpec>,
    pub examples: Vec<Example>,
}

impl CrossModalDataset {
    pub fn modality_count(&self) -> usize {
        self.renderers.len()
    }

    pub fn class_count(&self) -> u16 {
        self.concept.prototypes.rows() as u16
    }

    pub fn input_dim(&self, modality: ModalityId) -> usize {
        self.renderers[usize::from(modality)].input_dim()
    }

    pub fn modality_name(&self, modality: ModalityId) -> &str {
        &self.renderers[usize::from(modality)].name
    }

    /// Indices into `examples` for one (modality, split) pane, in stored order.
    pub fn indices(&self, modality: ModalityId, split: Split) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.modality == modality && e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Stack the chosen examples into a feature matrix plus labels.
    /// All indices must refer to examples of equal width.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<u16>)> {
        if idx.is_empty() {
            return Err(Error::InsufficientData {
                context: "gather".into(),
                needed: 1,
                got: 0,
            });
        }
        let dim = self.examples[idx[0]].features.len();
        let mut data = Vec::with_capacity(idx.len() * dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let e = &self.examples[i];
            if e.features.len() != dim {
                return Err(Error::ShapeMismatch {
                    context: "gather".into(),
                    expected: format!("feature width {dim}"),
                    got: format!("width {} at example {i}", e.features.len()),
                });
            }
            data.extend_from_slice(&e.features);
            labels.push(e.class);
        }
        Ok((Tensor::new(vec![idx.len(), dim], data)?, labels))
    }

    pub fn classes_present(&self, modality: ModalityId, split: Split) -> BTreeSet<u16> {
        self.examples
            .iter()
            .filter(|e| e.modality == modality && e.split == split)
            .map(|e| e.class)
            .collect()
    }
}

/// Generate a dataset from the spec. Deterministic in (spec, seed): the
/// concept model, each renderer, and each modality's example stream draw
/// from independently forked generators, so nothing downstream shifts when
/// an unrelated knob changes count.
pub fn generate_dataset(spec: &GeneratorSpec, seed: u64) -> Result<CrossModalDataset> {
    spec.validate()?;
    let root = RngState::new(seed);
    let c = usize::from(spec.classes);
    let l = spec.latent_dim;

    let mut crng = root.fork("concept");
    let mut prototypes = Tensor::zeros(vec![c, l]);
    for v in prototypes.as_mut_slice() {
        *v = crng.normal(0.0, spec.prototype_scale);
    }
    // Collisions are astronomically unlikely but would silently merge two
    // classes, so check.
    for a in 0..c {
        for b in (a + 1)..c {
            let d2: f64 = prototypes
                .row(a)
                .iter()
                .zip(prototypes.row(b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if d2 <= 0.0 {
                return Err(Error::Config(format!(
                    "prototypes for classes {a} and {b} collided; change the seed"
                )));
            }
        }
    }

    let mut part_dictionary = Tensor::zeros(vec![spec.parts, l]);
    for p in 0..spec.parts {
        let row = part_dictionary.row_mut(p);
        for v in row.iter_mut() {
            *v = crng.normal(0.0, 1.0);
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Config(format!("part direction {p} degenerated to zero")));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }

    // Softmax of unit Gaussians: strictly positive rows that sum to one.
    let mut part_weights = Tensor::zeros(vec![c, spec.parts]);
    for class in 0..c {
        let row = part_weights.row_mut(class);
        for v in row.iter_mut() {
            *v = crng.normal(0.0, 1.0);
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    let concept = SceneConceptModel {
        prototypes,
        spread: spec.spread,
        part_dictionary,
        part_weights,
    };
    let centers = concept.class_centers();

    // Mixing entries scale with 1/sqrt(L) so rendered coordinates keep the
    // latent magnitude regardless of latent width.
    let col_scale = 1.0 / (l as f64).sqrt();
    let mut renderers = Vec::with_capacity(spec.renderers.len());
    for r in &spec.renderers {
        let mut rrng = root.fork(&format!("render/{}", r.name));
        let mut mixing = Tensor::zeros(vec![r.render_dim, l]);
        for v in mixing.as_mut_slice() {
            *v = rrng.normal(0.0, col_scale);
        }
        renderers.push(ModalityRenderer {
            name: r.name.clone(),
            render_dim: r.render_dim,
            distractor_dims: r.distractor_dims,
            nonlinearity: r.nonlinearity,
            noise_std: r.noise_std,
            mixing,
        });
    }

    let per_class = spec.train_per_class + spec.val_per_class;
    let mut examples = Vec::with_capacity(renderers.len() * c * per_class);
    let mut latent_id: u64 = 0;
    let mut z = vec![0.0; l];
    for (m, renderer) in renderers.iter().enumerate() {
        let mut erng = root.fork(&format!("examples/{m}"));
        for class in 0..c {
            for k in 0..per_class {
                let split = if k < spec.train_per_class {
                    Split::Train
                } else {
                    Split::Val
                };
                for (zi, &ci) in z.iter_mut().zip(centers.row(class)) {
                    *zi = ci + spec.spread * erng.normal(0.0, 1.0);
                }
                let mut features = Vec::with_capacity(renderer.input_dim());
                for i in 0..renderer.render_dim {
                    let pre: f64 = renderer
                        .mixing
                        .row(i)
                        .iter()
                        .zip(&z)
                        .map(|(a, b)| a * b)
                        .sum();
                    let v = renderer.nonlinearity.apply(pre)
                        + renderer.noise_std * erng.normal(0.0, 1.0);
                    features.push(v as f32 as f64);
                }
                for _ in 0..renderer.distractor_dims {
                    features.push(erng.normal(0.0, 1.0) as f32 as f64);
                }
                examples.push(Example {
                    modality: m as ModalityId,
                    class: class as u16,
                    split,
                    latent_id,
                    features,
                });
                latent_id += 1;
            }
        }
    }

    Ok(CrossModalDataset {
        seed,
        spec_hash: spec.spec_hash(),
        anchor: spec.anchor,
        concept,
        renderers,
        holdout: None,
        examples,
    })
}

/// Remove the training rows of the held-out classes from the affected
/// modalities. Validation splits and the anchor modality keep everything.
pub fn holdout_classes(
    dataset: &CrossModalDataset,
    holdout: &HoldoutSpec,
) -> Result<CrossModalDataset> {
    if dataset.holdout.is_some() {
        return Err(Error::Config("dataset already has a holdout applied".into()));
    }
    if holdout.classes.is_empty() {
        return Err(Error::Config("holdout class set is empty".into()));
    }
    if holdout.affected.is_empty() {
        return Err(Error::Config("holdout affects no modalities".into()));
    }
    let c = dataset.class_count();
    let m = dataset.modality_count() as u16;
    let mut classes: Vec<u16> = holdout.classes.clone();
    classes.sort_unstable();
    classes.dedup();
    for &cls in &classes {
        if cls >= c {
            return Err(Error::Config(format!("holdout class {cls} out of range (C={c})")));
        }
    }
    let mut affected: Vec<u16> = holdout.affected.clone();
    affected.sort_unstable();
    affected.dedup();
    for &mo in &affected {
        if mo >= m {
            return Err(Error::Config(format!("holdout modality {mo} out of range ({m} modalities)")));
        }
        if mo == dataset.anchor {
            return Err(Error::Config(format!(
                "holdout must not affect the anchor modality ({mo})"
            )));
        }
    }
    let held: BTreeSet<u16> = classes.iter().copied().collect();
    for &mo in &affected {
        let train = dataset.classes_present(mo, Split::Train);
        if train.iter().all(|cls| held.contains(cls)) {
            return Err(Error::Config(format!(
                "holdout removes every training class of modality '{}'",
                dataset.modality_name(mo)
            )));
        }
    }

    let affected_set: BTreeSet<u16> = affected.iter().copied().collect();
    let examples = dataset
        .examples
        .iter()
        .filter(|e| {
            !(e.split == Split::Train
                && affected_set.contains(&e.modality)
                && held.contains(&e.class))
        })
        .cloned()
        .collect();

    Ok(CrossModalDataset {
        holdout: Some(HoldoutSpec { classes, affected }),
        examples,
        ..dataset.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{softmax_cross_entropy, LinearLayer};

    fn tiny_spec() -> GeneratorSpec {
        GeneratorSpec {
            classes: 3,
            latent_dim: 8,
            parts: 2,
            prototype_scale: 3.0,
            spread: 0.5,
            train_per_class: 6,
            val_per_class: 2,
            anchor: 0,
            renderers: vec![
                RendererSpec {
                    name: "a".into(),
                    render_dim: 5,
                    distractor_dims: 2,
                    nonlinearity: Nonlinearity::Tanh,
                    noise_std: 0.05,
                },
                RendererSpec {
                    name: "b".into(),
                    render_dim: 7,
                    distractor_dims: 0,
                    nonlinearity: Nonlinearity::Sign,
                    noise_std: 0.1,
                },
            ],
        }
    }

    #[test]
    fn counts_match_the_spec() {
        let d = generate_dataset(&GeneratorSpec::default_desk(), 11).unwrap();
        assert_eq!(d.examples.len(), 3 * 10 * 110);
        for m in 0..3u16 {
            for class in 0..10u16 {
                let train = d
                    .examples
                    .iter()
                    .filter(|e| e.modality == m && e.class == class && e.split == Split::Train)
                    .count();
                let val = d
                    .examples
                    .iter()
                    .filter(|e| e.modality == m && e.class == class && e.split == Split::Val)
                    .count();
                assert_eq!(train, 100);
                assert_eq!(val, 10);
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = tiny_spec();
        let a = generate_dataset(&spec, 5).unwrap();
        let b = generate_dataset(&spec, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec, 6).unwrap();
        assert_ne!(a.examples, c.examples);
    }

    #[test]
    fn latent_ids_are_unique_across_modalities() {
        let d = generate_dataset(&tiny_spec(), 9).unwrap();
        let ids: BTreeSet<u64> = d.examples.iter().map(|e| e.latent_id).collect();
        assert_eq!(ids.len(), d.examples.len());
    }

    #[test]
    fn degenerate_spec_collapses_classes_to_points() {
        // Distractor coordinates are unconditional noise, so the degenerate
        // spec drops them too.
        let mut spec = tiny_spec();
        spec.spread = 0.0;
        for r in &mut spec.renderers {
            r.noise_std = 0.0;
            r.distractor_dims = 0;
        }
        let d = generate_dataset(&spec, 3).unwrap();
        for m in 0..2u16 {
            for class in 0..3u16 {
                let rows: Vec<&Vec<f64>> = d
                    .examples
                    .iter()
                    .filter(|e| e.modality == m && e.class == class)
                    .map(|e| &e.features)
                    .collect();
                for r in &rows[1..] {
                    assert_eq!(*r, rows[0]);
                }
            }
        }
    }

    #[test]
    fn part_weights_lie_on_the_simplex() {
        let d = generate_dataset(&tiny_spec(), 21).unwrap();
        for class in 0..d.class_count() as usize {
            let row = d.concept.part_weights.row(class);
            assert!(row.iter().all(|&w| w >= 0.0));
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for p in 0..d.concept.part_dictionary.rows() {
            let norm: f64 = d.concept.part_dictionary.row(p).iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn features_survive_f32_rounding_exactly() {
        let d = generate_dataset(&tiny_spec(), 4).unwrap();
        for e in &d.examples {
            for &v in &e.features {
                assert_eq!(v, v as f32 as f64);
            }
        }
    }

    #[test]
    fn invalid_specs_name_the_offending_field() {
        let mut spec = tiny_spec();
        spec.latent_dim = 0;
        let err = generate_dataset(&spec, 1).unwrap_err().to_string();
        assert!(err.contains("latent_dim"), "{err}");

        let mut spec = tiny_spec();
        spec.renderers[1].name = "a".into();
        let err = generate_dataset(&spec, 1).unwrap_err().to_string();
        assert!(err.contains("duplicate name"), "{err}");

        let mut spec = tiny_spec();
        spec.anchor = 9;
        let err = generate_dataset(&spec, 1).unwrap_err().to_string();
        assert!(err.contains("anchor"), "{err}");
    }

    #[test]
    fn holdout_removes_train_rows_from_affected_modalities_only() {
        let d = generate_dataset(&tiny_spec(), 7).unwrap();
        let h = HoldoutSpec {
            classes: vec![0],
            affected: vec![1],
        };
        let held = holdout_classes(&d, &h).unwrap();
        assert_eq!(held.holdout.as_ref().unwrap().classes, vec![0]);
        // Anchor keeps everything.
        assert_eq!(held.indices(0, Split::Train).len(), 3 * 6);
        // Affected modality loses exactly class 0's training rows.
        assert_eq!(held.indices(1, Split::Train).len(), 2 * 6);
        assert!(!held.classes_present(1, Split::Train).contains(&0));
        // Validation panes untouched everywhere.
        assert_eq!(held.indices(0, Split::Val).len(), 3 * 2);
        assert_eq!(held.indices(1, Split::Val).len(), 3 * 2);
        assert!(held.classes_present(1, Split::Val).contains(&0));
    }

    #[test]
    fn holdout_rejects_empty_and_total_removals() {
        let d = generate_dataset(&tiny_spec(), 7).unwrap();
        let err = holdout_classes(
            &d,
            &HoldoutSpec { classes: vec![], affected: vec![1] },
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("empty"), "{err}");

        let err = holdout_classes(
            &d,
            &HoldoutSpec { classes: vec![0, 1, 2], affected: vec![1] },
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("every training class"), "{err}");

        let err = holdout_classes(
            &d,
            &HoldoutSpec { classes: vec![0], affected: vec![0] },
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("anchor"), "{err}");
    }

    #[test]
    fn holdout_sampling_rounds_the_fraction() {
        let mut rng = RngState::new(1);
        let h = sample_holdout_classes(10, 0.27, &mut rng).unwrap();
        assert_eq!(h.len(), 3);
        let h = sample_holdout_classes(205, 0.27, &mut rng).unwrap();
        assert_eq!(h.len(), 55);
        assert!(h.windows(2).all(|w| w[0] < w[1]));
    }

    /// Full-batch softmax regression; returns accuracy on the eval set.
    fn linear_probe(
        train_x: &Tensor,
        train_y: &[u16],
        eval_x: &Tensor,
        eval_y: &[u16],
        classes: usize,
        iters: usize,
        lr: f64,
    ) -> f64 {
        let dim = train_x.cols();
        let mut layer = LinearLayer::zeros(dim, classes);
        for _ in 0..iters {
            let mut with_bias = train_x.matmul_nt(&layer.weight);
            for r in 0..with_bias.rows() {
                for (v, b) in with_bias.row_mut(r).iter_mut().zip(layer.bias.as_slice()) {
                    *v += b;
                }
            }
            let (_, grad) = softmax_cross_entropy(&with_bias, train_y).unwrap();
            let wgrad = grad.matmul_tn(train_x);
            let mut bgrad = vec![0.0; classes];
            for r in 0..grad.rows() {
                for (g, &v) in bgrad.iter_mut().zip(grad.row(r)) {
                    *g += v;
                }
            }
            for (w, g) in layer.weight.as_mut_slice().iter_mut().zip(wgrad.as_slice()) {
                *w -= lr * g;
            }
            for (b, g) in layer.bias.as_mut_slice().iter_mut().zip(&bgrad) {
                *b -= lr * g;
            }
        }
        let mut logits = eval_x.matmul_nt(&layer.weight);
        for r in 0..logits.rows() {
            for (v, b) in logits.row_mut(r).iter_mut().zip(layer.bias.as_slice()) {
                *v += b;
            }
        }
        let mut correct = 0usize;
        for (r, &y) in eval_y.iter().enumerate() {
            let row = logits.row(r);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == usize::from(y) {
                correct += 1;
            }
        }
        correct as f64 / eval_y.len() as f64
    }

    #[test]
    fn classes_are_linearly_separable_within_each_modality() {
        let d = generate_dataset(&GeneratorSpec::default_desk(), 42).unwrap();
        for m in 0..3u16 {
            let (tx, ty) = d.gather(&d.indices(m, Split::Train)).unwrap();
            let (vx, vy) = d.gather(&d.indices(m, Split::Val)).unwrap();
            let acc = linear_probe(&tx, &ty, &vx, &vy, 10, 800, 0.2);
            assert!(acc > 0.9, "modality {m}: val accuracy {acc}");
        }
    }

    #[test]
    fn modalities_are_trivially_distinguishable() {
        // The renderers differ in scale and support, which are second-moment
        // facts, so the probe sees each coordinate and its square. That is
        // still a linear readout of fixed input statistics.
        let d = generate_dataset(&GeneratorSpec::default_desk(), 42).unwrap();
        let pad_width = (0..3u16).map(|m| d.input_dim(m)).max().unwrap();
        let width = 2 * pad_width;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for m in 0..3u16 {
            for split in [Split::Train, Split::Val] {
                for &i in &d.indices(m, split) {
                    let mut row = d.examples[i].features.clone();
                    row.resize(pad_width, 0.0);
                    let squares: Vec<f64> = row.iter().map(|v| v * v).collect();
                    row.extend(squares);
                    rows.push(row);
                    labels.push(m);
                }
            }
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let n = rows.len();
        let train: Vec<usize> = (0..n).filter(|i| i % 2 == 0).collect();
        let eval: Vec<usize> = (0..n).filter(|i| i % 2 == 1).collect();
        let take = |idx: &[usize]| {
            let data: Vec<f64> = idx.iter().flat_map(|&i| x.row(i).to_vec()).collect();
            Tensor::new(vec![idx.len(), width], data).unwrap()
        };
        let ty: Vec<u16> = train.iter().map(|&i| labels[i]).collect();
        let ey: Vec<u16> = eval.iter().map(|&i| labels[i]).collect();
        let acc = linear_probe(&take(&train), &ty, &take(&eval), &ey, 3, 2000, 0.5);
        assert!(acc > 0.99, "modality probe accuracy {acc}");
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn raw_cross_modal_cosine_retrieval_sits_near_chance() {
        // 10 classes with 10 val items each: random ranking gives a mean AP
        // of about 0.138. Raw inputs from different renderers should carry
        // no usable cross-modal signal.
        let d = generate_dataset(&GeneratorSpec::default_desk(), 42).unwrap();
        let (qx, qy) = d.gather(&d.indices(0, Split::Val)).unwrap();
        let (tx, ty) = d.gather(&d.indices(2, Split::Val)).unwrap();
        let width = qx.cols().max(tx.cols());
        let pad = |t: &Tensor| {
            let mut rows = Vec::new();
            for r in 0..t.rows() {
                let mut row = t.row(r).to_vec();
                row.resize(width, 0.0);
                rows.push(row);
            }
            Tensor::from_rows(&rows).unwrap()
        };
        let q = pad(&qx);
        let t = pad(&tx);
        let mut ap_sum = 0.0;
        for qi in 0..q.rows() {
            let qrow = q.row(qi);
            let qn = qrow.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut sims: Vec<(f64, usize)> = (0..t.rows())
                .map(|ti| {
                    let trow = t.row(ti);
                    let dot: f64 = qrow.iter().zip(trow).map(|(a, b)| a * b).sum();
                    let tn = trow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    (dot / (qn * tn), ti)
                })
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut hits = 0usize;
            let mut ap = 0.0;
            let total: usize = ty.iter().filter(|&&y| y == qy[qi]).count();
            for (rank, &(_, ti)) in sims.iter().enumerate() {
                if ty[ti] == qy[qi] {
                    hits += 1;
                    ap += hits as f64 / (rank + 1) as f64;
                }
            }
            ap_sum += ap / total as f64;
        }
        let map = ap_sum / q.rows() as f64;
        assert!(
            (0.07..0.25).contains(&map),
            "raw cross-modal mAP {map} strayed from chance"
        );
    }
}
