//! Run configuration: plain text, `[section]` headers, `key = value` lines,
//! full-line `#` comments. Six sections: `[data]`, `[arch]`, `[train]`,
//! `[reg]`, `[eval]`, `[zeroshot]`. Every key has a default, so an empty
//! config is a valid desk-scale run; unknown sections, unknown keys,
//! duplicate keys, and malformed values are hard errors naming the culprit.
//!
//! The renderer emits every key with its resolved value. A run directory
//! stores that snapshot, which parses back to an identical config, so a run
//! can always be reproduced from its directory alone.
//!
//! Modalities are declared by `modalities = name,name,...` in `[data]`; each
//! listed name gets four `<name>_*` keys. Names not mentioned elsewhere
//! default to a 24+8 tanh channel with 0.05 noise.

use std::collections::BTreeMap;

use crate::crossmodal::{ArchConfig, CurriculumSchedule, RegConfig, StrategyKind};
use crate::density::{DensityKind, LayerId};
use crate::error::{Error, Result};
use crate::synthdata::{GeneratorSpec, ModalityId, Nonlinearity, RendererSpec};

/// Retrieval, unit, and export knobs. Changing these never changes dataset
/// or checkpoint bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub seed: u64,
    pub layer: LayerId,
    pub n_queries: usize,
    pub top_k: usize,
    pub export_cap: usize,
    /// Trials behind the Monte-Carlo chance line in retrieval reports.
    pub chance_trials: usize,
}

/// Held-out class evaluation knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotSection {
    pub seed: u64,
    pub layer: LayerId,
    pub n_queries: usize,
}

/// Everything a run needs, resolved. The `[data]`, `[arch]`, `[train]` and
/// `[reg]` sections define the run's identity (what the dataset and
/// checkpoint bytes will be); `[eval]` and `[zeroshot]` only steer reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_seed: u64,
    pub holdout_frac: f64,
    pub generator: GeneratorSpec,
    pub arch: ArchConfig,
    pub train_seed: u64,
    pub strategy: StrategyKind,
    pub curriculum: CurriculumSchedule,
    /// Iterations for the anchor-only pretraining net.
    pub anchor_iters: usize,
    pub reg: RegConfig,
    pub eval: EvalSection,
    pub zeroshot: ZeroShotSection,
}

/// Command-line knobs layered on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Sets every section's seed to the same value; the labeled stream forks
    /// keep the stages decorrelated.
    pub seed: Option<u64>,
    pub holdout_frac: Option<f64>,
    pub strategy: Option<StrategyKind>,
    pub layer: Option<LayerId>,
    pub n_queries: Option<usize>,
    pub top_k: Option<usize>,
}

impl RunConfig {
    pub fn default_desk() -> Self {
        let generator = GeneratorSpec::default_desk();
        let arch = ArchConfig::default_desk(generator.classes);
        let strategy = StrategyKind::CJoint;
        let mut reg = RegConfig::default_desk();
        reg.density_kind = strategy.density_kind().unwrap_or(DensityKind::Gmm);
        RunConfig {
            data_seed: 42,
            holdout_frac: 0.0,
            generator,
            arch,
            train_seed: 7,
            strategy,
            curriculum: CurriculumSchedule::default_desk(),
            anchor_iters: 20_000,
            reg,
            eval: EvalSection {
                seed: 99,
                layer: LayerId::Fc7,
                n_queries: 1000,
                top_k: 5,
                export_cap: 1000,
                chance_trials: 20,
            },
            zeroshot: ZeroShotSection {
                seed: 111,
                layer: LayerId::Fc7,
                n_queries: 1000,
            },
        }
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.data_seed = seed;
            self.train_seed = seed;
            self.eval.seed = seed;
            self.zeroshot.seed = seed;
        }
        if let Some(frac) = ov.holdout_frac {
            self.holdout_frac = frac;
        }
        if let Some(kind) = ov.strategy {
            self.strategy = kind;
            if let Some(dk) = kind.density_kind() {
                self.reg.density_kind = dk;
            }
        }
        if let Some(layer) = ov.layer {
            self.eval.layer = layer;
            self.zeroshot.layer = layer;
        }
        if let Some(n) = ov.n_queries {
            self.eval.n_queries = n;
            self.zeroshot.n_queries = n;
        }
        if let Some(k) = ov.top_k {
            self.eval.top_k = k;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.curriculum.validate()?;
        self.reg.validate()?;
        if !(0.0..=1.0).contains(&self.holdout_frac) {
            return Err(Error::Config(format!(
                "data.holdout_frac must be in [0, 1], got {}",
                self.holdout_frac
            )));
        }
        if self.arch.classes != self.generator.classes {
            return Err(Error::Config(format!(
                "arch expects {} classes but data generates {}",
                self.arch.classes, self.generator.classes
            )));
        }
        for (section, layer) in [("eval", self.eval.layer), ("zeroshot", self.zeroshot.layer)] {
            if !layer.is_regularizable() {
                return Err(Error::Config(format!(
                    "{section}.layer must be one of shared_in, fc6, fc7; got {layer}"
                )));
            }
        }
        for (name, v) in [
            ("eval.n_queries", self.eval.n_queries),
            ("eval.top_k", self.eval.top_k),
            ("eval.export_cap", self.eval.export_cap),
            ("zeroshot.n_queries", self.zeroshot.n_queries),
            ("train.anchor_iters", self.anchor_iters),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.eval.chance_trials < 2 {
            return Err(Error::Config("eval.chance_trials must be >= 2".into()));
        }
        Ok(())
    }

    /// The schedule used for anchor pretraining: same optimizer knobs, its
    /// own iteration budget, no curriculum.
    pub fn anchor_schedule(&self) -> CurriculumSchedule {
        CurriculumSchedule {
            freeze_iters: 0,
            total_iters: self.anchor_iters,
            ..self.curriculum.clone()
        }
    }

    /// Full key=value snapshot; parses back to an equal config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_identity_into(&mut out);
        let e = &self.eval;
        out.push_str("\n[eval]\n");
        out.push_str(&format!("seed = {}\n", e.seed));
        out.push_str(&format!("layer = {}\n", e.layer));
        out.push_str(&format!("n_queries = {}\n", e.n_queries));
        out.push_str(&format!("top_k = {}\n", e.top_k));
        out.push_str(&format!("export_cap = {}\n", e.export_cap));
        out.push_str(&format!("chance_trials = {}\n", e.chance_trials));
        let z = &self.zeroshot;
        out.push_str("\n[zeroshot]\n");
        out.push_str(&format!("seed = {}\n", z.seed));
        out.push_str(&format!("layer = {}\n", z.layer));
        out.push_str(&format!("n_queries = {}\n", z.n_queries));
        out
    }

    /// The `[data]`/`[arch]`/`[train]`/`[reg]` sections only: everything
    /// that determines dataset and checkpoint bytes.
    pub fn render_identity(&self) -> String {
        let mut out = String::new();
        self.render_identity_into(&mut out);
        out
    }

    fn render_identity_into(&self, out: &mut String) {
        let g = &self.generator;
        out.push_str("[data]\n");
        out.push_str(&format!("seed = {}\n", self.data_seed));
        out.push_str(&format!("classes = {}\n", g.classes));
        out.push_str(&format!("latent_dim = {}\n", g.latent_dim));
        out.push_str(&format!("parts = {}\n", g.parts));
        out.push_str(&format!("prototype_scale = {}\n", g.prototype_scale));
        out.push_str(&format!("spread = {}\n", g.spread));
        out.push_str(&format!("train_per_class = {}\n", g.train_per_class));
        out.push_str(&format!("val_per_class = {}\n", g.val_per_class));
        out.push_str(&format!("holdout_frac = {}\n", self.holdout_frac));
        let names: Vec<&str> = g.renderers.iter().map(|r| r.name.as_str()).collect();
        out.push_str(&format!("modalities = {}\n", names.join(",")));
        out.push_str(&format!(
            "anchor = {}\n",
            g.renderers[usize::from(g.anchor)].name
        ));
        for r in &g.renderers {
            out.push_str(&format!("{}_render_dim = {}\n", r.name, r.render_dim));
            out.push_str(&format!("{}_distractors = {}\n", r.name, r.distractor_dims));
            out.push_str(&format!(
                "{}_nonlinearity = {}\n",
                r.name,
                nonlinearity_name(r.nonlinearity)
            ));
            out.push_str(&format!("{}_noise = {}\n", r.name, r.noise_std));
        }

        let a = &self.arch;
        out.push_str("\n[arch]\n");
        out.push_str(&format!("shared_dim = {}\n", a.shared_dim));
        out.push_str(&format!("hidden_dim = {}\n", a.hidden_dim));
        let widths: Vec<String> = a.encoder_widths.iter().map(|w| w.to_string()).collect();
        out.push_str(&format!("encoder_widths = {}\n", widths.join(",")));
        out.push_str(&format!("init_std = {}\n", a.init_std));

        let c = &self.curriculum;
        out.push_str("\n[train]\n");
        out.push_str(&format!("seed = {}\n", self.train_seed));
        out.push_str(&format!("strategy = {}\n", self.strategy));
        out.push_str(&format!("lr = {}\n", c.lr));
        out.push_str(&format!("batch_size = {}\n", c.batch_size));
        out.push_str(&format!("total_iters = {}\n", c.total_iters));
        out.push_str(&format!("freeze_iters = {}\n", c.freeze_iters));
        out.push_str(&format!("weight_decay = {}\n", c.weight_decay));
        out.push_str(&format!("anchor_iters = {}\n", self.anchor_iters));

        let r = &self.reg;
        out.push_str("\n[reg]\n");
        for id in LayerId::REGULARIZABLE {
            let lambda = r.lambdas.get(&id).copied().unwrap_or(0.0);
            out.push_str(&format!("lambda_{id} = {lambda}\n"));
        }
        out.push_str(&format!("gmm_k = {}\n", r.k));
        out.push_str(&format!("max_fit_samples = {}\n", r.max_fit_samples));
        out.push_str(&format!("fit_floor = {}\n", r.fit_floor));
        out.push_str(&format!("include_anchor = {}\n", r.include_anchor));
        out.push_str(&format!("em_tol = {}\n", r.em_tol));
        out.push_str(&format!("em_max_iters = {}\n", r.em_max_iters));
    }

    /// Parse a config file over the desk defaults and validate the result.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut bag = Bag::collect(text)?;
        let mut cfg = RunConfig::default_desk();

        // [data] scalars first, then the modality table.
        if let Some(v) = bag.take("data", "seed") {
            cfg.data_seed = parse_num("data.seed", &v)?;
        }
        if let Some(v) = bag.take("data", "classes") {
            cfg.generator.classes = parse_num("data.classes", &v)?;
            cfg.arch.classes = cfg.generator.classes;
        }
        if let Some(v) = bag.take("data", "latent_dim") {
            cfg.generator.latent_dim = parse_num("data.latent_dim", &v)?;
        }
        if let Some(v) = bag.take("data", "parts") {
            cfg.generator.parts = parse_num("data.parts", &v)?;
        }
        if let Some(v) = bag.take("data", "prototype_scale") {
            cfg.generator.prototype_scale = parse_float("data.prototype_scale", &v)?;
        }
        if let Some(v) = bag.take("data", "spread") {
            cfg.generator.spread = parse_float("data.spread", &v)?;
        }
        if let Some(v) = bag.take("data", "train_per_class") {
            cfg.generator.train_per_class = parse_num("data.train_per_class", &v)?;
        }
        if let Some(v) = bag.take("data", "val_per_class") {
            cfg.generator.val_per_class = parse_num("data.val_per_class", &v)?;
        }
        if let Some(v) = bag.take("data", "holdout_frac") {
            cfg.holdout_frac = parse_float("data.holdout_frac", &v)?;
        }

        let names: Vec<String> = match bag.take("data", "modalities") {
            Some(v) => {
                let names: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
                for n in &names {
                    check_name("data.modalities", n)?;
                }
                let mut uniq = names.clone();
                uniq.sort();
                uniq.dedup();
                if uniq.len() != names.len() {
                    return Err(Error::Config("data.modalities lists a name twice".into()));
                }
                if names.is_empty() {
                    return Err(Error::Config("data.modalities must list at least one".into()));
                }
                names
            }
            None => cfg.generator.renderers.iter().map(|r| r.name.clone()).collect(),
        };
        // Names from the stock list keep their stock profile; new names start
        // from the generic dense channel.
        let profiles: BTreeMap<String, RendererSpec> = cfg
            .generator
            .renderers
            .iter()
            .map(|r| (r.name.clone(), r.clone()))
            .collect();
        let mut renderers = Vec::with_capacity(names.len());
        for name in &names {
            let mut r = profiles.get(name).cloned().unwrap_or(RendererSpec {
                name: name.clone(),
                render_dim: 24,
                distractor_dims: 8,
                nonlinearity: Nonlinearity::Tanh,
                noise_std: 0.05,
            });
            r.name = name.clone();
            if let Some(v) = bag.take("data", &format!("{name}_render_dim")) {
                r.render_dim = parse_num(&format!("data.{name}_render_dim"), &v)?;
            }
            if let Some(v) = bag.take("data", &format!("{name}_distractors")) {
                r.distractor_dims = parse_num(&format!("data.{name}_distractors"), &v)?;
            }
            if let Some(v) = bag.take("data", &format!("{name}_nonlinearity")) {
                r.nonlinearity = parse_nonlinearity(&format!("data.{name}_nonlinearity"), &v)?;
            }
            if let Some(v) = bag.take("data", &format!("{name}_noise")) {
                r.noise_std = parse_float(&format!("data.{name}_noise"), &v)?;
            }
            renderers.push(r);
        }
        cfg.generator.renderers = renderers;
        let anchor_name = match bag.take("data", "anchor") {
            Some(v) => v,
            None if names.contains(&"alpha".to_string()) => "alpha".into(),
            None => names[0].clone(),
        };
        cfg.generator.anchor = names
            .iter()
            .position(|n| *n == anchor_name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "data.anchor '{anchor_name}' is not in modalities ({})",
                    names.join(", ")
                ))
            })? as ModalityId;

        if let Some(v) = bag.take("arch", "shared_dim") {
            cfg.arch.shared_dim = parse_num("arch.shared_dim", &v)?;
        }
        if let Some(v) = bag.take("arch", "hidden_dim") {
            cfg.arch.hidden_dim = parse_num("arch.hidden_dim", &v)?;
        }
        if let Some(v) = bag.take("arch", "encoder_widths") {
            let widths: Result<Vec<usize>> = v
                .split(',')
                .map(|s| parse_num("arch.encoder_widths", s.trim()))
                .collect();
            cfg.arch.encoder_widths = widths?;
        }
        if let Some(v) = bag.take("arch", "init_std") {
            cfg.arch.init_std = parse_float("arch.init_std", &v)?;
        }

        if let Some(v) = bag.take("train", "seed") {
            cfg.train_seed = parse_num("train.seed", &v)?;
        }
        if let Some(v) = bag.take("train", "strategy") {
            cfg.strategy = StrategyKind::parse(&v)?;
            if let Some(dk) = cfg.strategy.density_kind() {
                cfg.reg.density_kind = dk;
            }
        }
        if let Some(v) = bag.take("train", "lr") {
            cfg.curriculum.lr = parse_float("train.lr", &v)?;
        }
        if let Some(v) = bag.take("train", "batch_size") {
            cfg.curriculum.batch_size = parse_num("train.batch_size", &v)?;
        }
        if let Some(v) = bag.take("train", "total_iters") {
            cfg.curriculum.total_iters = parse_num("train.total_iters", &v)?;
        }
        if let Some(v) = bag.take("train", "freeze_iters") {
            cfg.curriculum.freeze_iters = parse_num("train.freeze_iters", &v)?;
        }
        if let Some(v) = bag.take("train", "weight_decay") {
            cfg.curriculum.weight_decay = parse_float("train.weight_decay", &v)?;
        }
        if let Some(v) = bag.take("train", "anchor_iters") {
            cfg.anchor_iters = parse_num("train.anchor_iters", &v)?;
        }

        for id in LayerId::REGULARIZABLE {
            if let Some(v) = bag.take("reg", &format!("lambda_{id}")) {
                let lambda = parse_float(&format!("reg.lambda_{id}"), &v)?;
                cfg.reg.lambdas.insert(id, lambda);
            }
        }
        if let Some(v) = bag.take("reg", "gmm_k") {
            cfg.reg.k = parse_num("reg.gmm_k", &v)?;
        }
        if let Some(v) = bag.take("reg", "max_fit_samples") {
            cfg.reg.max_fit_samples = parse_num("reg.max_fit_samples", &v)?;
        }
        if let Some(v) = bag.take("reg", "fit_floor") {
            cfg.reg.fit_floor = parse_float("reg.fit_floor", &v)?;
        }
        if let Some(v) = bag.take("reg", "include_anchor") {
            cfg.reg.include_anchor = parse_bool("reg.include_anchor", &v)?;
        }
        if let Some(v) = bag.take("reg", "em_tol") {
            cfg.reg.em_tol = parse_float("reg.em_tol", &v)?;
        }
        if let Some(v) = bag.take("reg", "em_max_iters") {
            cfg.reg.em_max_iters = parse_num("reg.em_max_iters", &v)?;
        }

        if let Some(v) = bag.take("eval", "seed") {
            cfg.eval.seed = parse_num("eval.seed", &v)?;
        }
        if let Some(v) = bag.take("eval", "layer") {
            cfg.eval.layer = LayerId::parse(&v)?;
        }
        if let Some(v) = bag.take("eval", "n_queries") {
            cfg.eval.n_queries = parse_num("eval.n_queries", &v)?;
        }
        if let Some(v) = bag.take("eval", "top_k") {
            cfg.eval.top_k = parse_num("eval.top_k", &v)?;
        }
        if let Some(v) = bag.take("eval", "export_cap") {
            cfg.eval.export_cap = parse_num("eval.export_cap", &v)?;
        }
        if let Some(v) = bag.take("eval", "chance_trials") {
            cfg.eval.chance_trials = parse_num("eval.chance_trials", &v)?;
        }

        if let Some(v) = bag.take("zeroshot", "seed") {
            cfg.zeroshot.seed = parse_num("zeroshot.seed", &v)?;
        }
        if let Some(v) = bag.take("zeroshot", "layer") {
            cfg.zeroshot.layer = LayerId::parse(&v)?;
        }
        if let Some(v) = bag.take("zeroshot", "n_queries") {
            cfg.zeroshot.n_queries = parse_num("zeroshot.n_queries", &v)?;
        }

        bag.expect_empty()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn nonlinearity_name(n: Nonlinearity) -> &'static str {
    match n {
        Nonlinearity::Tanh => "tanh",
        Nonlinearity::Linear => "linear",
        Nonlinearity::Sign => "sign",
    }
}

fn parse_nonlinearity(key: &str, v: &str) -> Result<Nonlinearity> {
    match v {
        "tanh" => Ok(Nonlinearity::Tanh),
        "linear" => Ok(Nonlinearity::Linear),
        "sign" => Ok(Nonlinearity::Sign),
        other => Err(Error::Config(format!(
            "{key}: expected tanh, linear, or sign; got '{other}'"
        ))),
    }
}

fn check_name(key: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{key}: modality names must be nonempty [a-z0-9_], got '{name}'"
        )))
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got '{v}'")))
}

fn parse_float(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got '{v}'")))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Config(format!("{key}: must be finite, got '{v}'")))
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "{key}: expected true or false, got '{other}'"
        ))),
    }
}

const SECTIONS: [&str; 6] = ["data", "arch", "train", "reg", "eval", "zeroshot"];

/// All key=value pairs from the file, checked off as the typed parse
/// consumes them; leftovers are unknown keys.
struct Bag {
    entries: BTreeMap<(String, String), String>,
}

impl Bag {
    fn collect(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{name}]; expected {}",
                        ln + 1,
                        SECTIONS.join(", ")
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    ln + 1
                )));
            };
            let Some(section) = section.clone() else {
                return Err(Error::Config(format!(
                    "line {}: key outside any [section]",
                    ln + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries
                .insert((section.clone(), key.clone()), value)
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {section}.{key}",
                    ln + 1
                )));
            }
        }
        Ok(Bag { entries })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.entries.remove(&(section.to_string(), key.to_string()))
    }

    fn expect_empty(&self) -> Result<()> {
        if let Some((section, key)) = self.entries.keys().next() {
            return Err(Error::Config(format!("unknown key {section}.{key}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_render_and_parse() {
        let cfg = RunConfig::default_desk();
        let text = cfg.render();
        let parsed = RunConfig::parse_str(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.render(), text);
    }

    #[test]
    fn empty_config_is_the_desk_default() {
        assert_eq!(RunConfig::parse_str("").unwrap(), RunConfig::default_desk());
        assert_eq!(
            RunConfig::parse_str("# just a comment\n\n").unwrap(),
            RunConfig::default_desk()
        );
    }

    #[test]
    fn snapshot_materializes_every_default() {
        let text = RunConfig::default_desk().render();
        for needle in [
            "[data]", "[arch]", "[train]", "[reg]", "[eval]", "[zeroshot]",
            "classes = 10",
            "latent_dim = 32",
            "parts = 6",
            "prototype_scale = 3",
            "spread = 0.6",
            "train_per_class = 100",
            "val_per_class = 10",
            "modalities = alpha,beta,text",
            "anchor = alpha",
            "alpha_render_dim = 24",
            "alpha_distractors = 8",
            "alpha_nonlinearity = tanh",
            "alpha_noise = 0.05",
            "beta_nonlinearity = linear",
            "beta_noise = 0.1",
            "text_render_dim = 40",
            "text_nonlinearity = sign",
            "text_noise = 0.2",
            "shared_dim = 32",
            "hidden_dim = 32",
            "encoder_widths = 64",
            "init_std = 0.1",
            "strategy = c_joint",
            "lr = 0.001",
            "batch_size = 32",
            "total_iters = 20000",
            "freeze_iters = 10000",
            "weight_decay = 0.0005",
            "anchor_iters = 20000",
            "lambda_shared_in = 0.1",
            "lambda_fc6 = 0.1",
            "lambda_fc7 = 0.1",
            "gmm_k = 8",
            "max_fit_samples = 1000",
            "fit_floor = 0.01",
            "include_anchor = false",
            "em_tol = 0.000001",
            "em_max_iters = 200",
            "layer = fc7",
            "n_queries = 1000",
            "top_k = 5",
            "export_cap = 1000",
            "chance_trials = 20",
        ] {
            assert!(text.contains(needle), "snapshot is missing '{needle}':\n{text}");
        }
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected_by_name() {
        let err = RunConfig::parse_str("[data]\nnope = 3\n").unwrap_err();
        assert!(err.to_string().contains("data.nope"), "{err}");
        let err = RunConfig::parse_str("[wat]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("[wat]"), "{err}");
        let err = RunConfig::parse_str("x = 1\n").unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
        let err = RunConfig::parse_str("[train]\nlr = 0.1\nlr = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn file_keys_override_defaults_only_where_present() {
        let cfg = RunConfig::parse_str("[train]\nlr = 0.01\n\n[eval]\ntop_k = 9\n").unwrap();
        assert_eq!(cfg.curriculum.lr, 0.01);
        assert_eq!(cfg.eval.top_k, 9);
        assert_eq!(cfg.curriculum.batch_size, 32);
        assert_eq!(cfg.generator.classes, 10);
    }

    #[test]
    fn custom_modalities_get_their_own_keys() {
        let text = "\
[data]
modalities = left,right
anchor = right
left_render_dim = 6
left_nonlinearity = sign
right_noise = 0.5
";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.generator.renderers.len(), 2);
        assert_eq!(cfg.generator.anchor, 1);
        let left = &cfg.generator.renderers[0];
        assert_eq!((left.render_dim, left.nonlinearity), (6, Nonlinearity::Sign));
        assert_eq!(left.distractor_dims, 8);
        let right = &cfg.generator.renderers[1];
        assert_eq!(right.noise_std, 0.5);
        // Keys for unlisted modalities are unknown keys.
        let err = RunConfig::parse_str("[data]\nmodalities = a\nb_noise = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("data.b_noise"), "{err}");
        // The default anchor name must exist in a custom list.
        let err = RunConfig::parse_str("[data]\nmodalities = a,b\nanchor = alpha\n").unwrap_err();
        assert!(err.to_string().contains("anchor"), "{err}");
    }

    #[test]
    fn strategy_key_sets_the_density_family() {
        let cfg = RunConfig::parse_str("[train]\nstrategy = b_gauss\n").unwrap();
        assert_eq!(cfg.reg.density_kind, DensityKind::Gaussian);
        let cfg = RunConfig::parse_str("[train]\nstrategy = b_gmm\n").unwrap();
        assert_eq!(cfg.reg.density_kind, DensityKind::Gmm);
    }

    #[test]
    fn global_seed_override_reaches_every_section() {
        let mut cfg = RunConfig::default_desk();
        cfg.apply_overrides(&Overrides { seed: Some(5), ..Overrides::default() });
        assert_eq!(
            (cfg.data_seed, cfg.train_seed, cfg.eval.seed, cfg.zeroshot.seed),
            (5, 5, 5, 5)
        );
        cfg.apply_overrides(&Overrides {
            strategy: Some(StrategyKind::BGauss),
            layer: Some(LayerId::Fc6),
            ..Overrides::default()
        });
        assert_eq!(cfg.reg.density_kind, DensityKind::Gaussian);
        assert_eq!(cfg.eval.layer, LayerId::Fc6);
        assert_eq!(cfg.zeroshot.layer, LayerId::Fc6);
    }

    #[test]
    fn identity_render_excludes_report_knobs() {
        let mut a = RunConfig::default_desk();
        let mut b = RunConfig::default_desk();
        b.eval.n_queries = 17;
        b.zeroshot.seed = 1234;
        assert_eq!(a.render_identity(), b.render_identity());
        a.curriculum.lr = 0.5;
        assert_ne!(a.render_identity(), b.render_identity());
    }

    #[test]
    fn bad_values_name_the_key() {
        for (text, needle) in [
            ("[data]\nseed = soup\n", "data.seed"),
            ("[train]\nlr = fast\n", "train.lr"),
            ("[reg]\ninclude_anchor = yes\n", "reg.include_anchor"),
            ("[data]\nalpha_nonlinearity = relu\n", "data.alpha_nonlinearity"),
            ("[eval]\nlayer = logits\n", "eval.layer"),
            ("[train]\nstrategy = sgd\n", "strategy"),
        ] {
            let err = RunConfig::parse_str(text).unwrap_err();
            assert!(err.to_string().contains(needle), "'{text}' -> {err}");
        }
    }
}
