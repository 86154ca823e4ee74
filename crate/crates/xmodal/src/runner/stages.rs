//! The pipeline stages behind the `xmodal` subcommands. Every stage is
//! idempotent over its run directory: outputs that already exist for the
//! current configuration are left untouched unless `force` is set, and
//! re-running a stage rewrites byte-identical files.
//!
//! Stages return the human summary they want printed; machine-readable
//! results go to files inside the run directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RunConfig, RunDir};
use crate::crossmodal::{
    fit_layer_densities, load_checkpoint, save_checkpoint, train_anchor, train_strategy,
    AnchorArtifacts, StrategyKind, StrategySpec, TrainLogEntry, TrainedModel,
};
use crate::density::{LayerDensitySet, LayerId};
use crate::error::{Error, Result};
use crate::evalkit::{
    self, align, chance_map_estimate, collect_export_rows, export_embeddings,
    extract_feature_map, render_retrieval_table, render_unit_report, render_zero_shot,
    retrieval_eval, unit_activation_report, RetrievalProtocol, RetrievalReport,
    UnitConsistencyReport, ZeroShotAccuracy,
};
use crate::rng::RngState;
use crate::synthdata::{
    generate_dataset, holdout_classes, read_dataset, sample_holdout_classes, write_dataset,
    CrossModalDataset, HoldoutSpec, ModalityId, Split,
};

const SKIP_HINT: &str = "up to date, skipping (use --force to redo)";

/// Retrieval report file: the full pair matrix plus the Monte-Carlo chance
/// level for the same target composition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalFile {
    pub report: RetrievalReport,
    pub chance_map_mean: f64,
    pub chance_map_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerLine {
    pub grand_mean_map: f64,
    pub grand_mean_pr: f64,
    pub zero_norm_items: usize,
}

/// Grand means for every feature layer, one eval seed, one strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSummaryFile {
    pub strategy: String,
    pub chance_map_mean: f64,
    pub chance_map_std: f64,
    pub layers: BTreeMap<String, LayerLine>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroShotFile {
    pub strategy: String,
    pub held_out_classes: Vec<u16>,
    /// Argmax over all classes, so chance is 1/C.
    pub chance_accuracy: f64,
    pub accuracies: Vec<ZeroShotAccuracy>,
    pub retrieval: RetrievalReport,
    pub chance_map_mean: f64,
    pub chance_map_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitsFile {
    pub strategy: String,
    pub trained: UnitConsistencyReport,
    /// Same architecture and init seed, zero training steps.
    pub untrained_rate: f64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        message: e.to_string(),
    })
}

fn write_jsonl(path: &Path, entries: &[TrainLogEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(
            &serde_json::to_string(e).map_err(|e| Error::Config(format!("log entry: {e}")))?,
        );
        out.push('\n');
    }
    write_text(path, &out)
}

fn require_dataset(dir: &RunDir) -> Result<CrossModalDataset> {
    let path = dir.dataset_path();
    if !path.exists() {
        return Err(Error::Config(format!(
            "{}: no dataset; run `xmodal gen-data` first",
            path.display()
        )));
    }
    read_dataset(&path)
}

fn require_model(dir: &RunDir, kind: StrategyKind) -> Result<TrainedModel> {
    let path = dir.strategy_checkpoint(kind);
    if !path.exists() {
        return Err(Error::MissingCheckpoint {
            path: path.display().to_string(),
        });
    }
    load_checkpoint(&path)
}

fn all_exist(paths: &[std::path::PathBuf]) -> bool {
    paths.iter().all(|p| p.exists())
}

/// Per-class validation counts; target sets in retrieval draw from these.
fn val_class_counts(data: &CrossModalDataset, modality: ModalityId) -> Vec<usize> {
    let mut counts = vec![0usize; usize::from(data.class_count())];
    for &i in &data.indices(modality, Split::Val) {
        counts[usize::from(data.examples[i].class)] += 1;
    }
    counts
}

/// Generate the dataset (and apply class holdout when configured), then
/// print the per-modality, per-class training counts.
pub fn stage_gen_data(dir: &RunDir, cfg: &RunConfig, force: bool) -> Result<String> {
    let stored = dir.reconcile(cfg)?;
    if stored.is_some() && dir.dataset_path().exists() && !force {
        return Ok(format!("dataset {}", SKIP_HINT));
    }
    dir.ensure_layout()?;

    let mut data = generate_dataset(&cfg.generator, cfg.data_seed)?;
    if cfg.holdout_frac > 0.0 {
        let mut rng = RngState::new(cfg.data_seed).fork("holdout");
        let classes = sample_holdout_classes(cfg.generator.classes, cfg.holdout_frac, &mut rng)?;
        let affected: Vec<ModalityId> = (0..data.modality_count() as ModalityId)
            .filter(|&m| m != data.anchor)
            .collect();
        data = holdout_classes(&data, &HoldoutSpec { classes, affected })?;
    }
    write_dataset(&data, &dir.dataset_path())?;
    dir.store_config(cfg)?;

    let c = usize::from(data.class_count());
    let mut rows = Vec::new();
    let mut header = vec!["train rows".to_string()];
    header.extend((0..c).map(|k| format!("c{k}")));
    header.push("val".into());
    rows.push(header);
    for m in 0..data.modality_count() as ModalityId {
        let mut counts = vec![0usize; c];
        for &i in &data.indices(m, Split::Train) {
            counts[usize::from(data.examples[i].class)] += 1;
        }
        let mut row = vec![data.modality_name(m).to_string()];
        row.extend(counts.iter().map(|n| n.to_string()));
        row.push(data.indices(m, Split::Val).len().to_string());
        rows.push(row);
    }
    let mut text = format!("wrote {}\n", dir.dataset_path().display());
    text.push_str(&align(&rows));
    if let Some(h) = &data.holdout {
        let names: Vec<String> = h.classes.iter().map(|c| format!("c{c}")).collect();
        text.push_str(&format!(
            "held out {} of {c} classes ({}) from every non-anchor training split\n",
            h.classes.len(),
            names.join(", ")
        ));
    }
    Ok(text)
}

/// Layers that need a fitted density: positive penalty weight only.
fn penalized_layers(cfg: &RunConfig) -> Vec<LayerId> {
    cfg.reg
        .lambdas
        .iter()
        .filter(|(_, &l)| l > 0.0)
        .map(|(&id, _)| id)
        .collect()
}

/// Train the configured strategy, materializing its prerequisites (anchor
/// net, activation densities) into the run directory first.
pub fn stage_train(dir: &RunDir, cfg: &RunConfig, force: bool) -> Result<String> {
    dir.reconcile(cfg)?;
    let kind = cfg.strategy;
    let ckpt = dir.strategy_checkpoint(kind);
    if all_exist(&[ckpt.clone(), dir.strategy_log(kind)]) && !force {
        return Ok(format!("checkpoint {} {}", ckpt.display(), SKIP_HINT));
    }
    let data = require_dataset(dir)?;
    dir.ensure_layout()?;
    let mut text = String::new();

    // The anchor net seeds the trunk of every non-scratch strategy and is
    // the distribution the penalties are fitted on.
    let needs_anchor = kind.uses_anchor_init() || kind.regularizer_active();
    let anchor_net = if needs_anchor {
        let path = dir.anchor_checkpoint();
        if path.exists() && !force {
            text.push_str(&format!("anchor checkpoint {} reused\n", path.display()));
            match load_checkpoint(&path)? {
                TrainedModel::Shared(net) => Some(net),
                TrainedModel::Individual(_) => {
                    return Err(Error::Config(format!(
                        "{}: anchor checkpoint holds per-modality nets",
                        path.display()
                    )))
                }
            }
        } else {
            let rng = RngState::new(cfg.train_seed).fork("anchor");
            let (net, log) = train_anchor(&data, &cfg.arch, &cfg.anchor_schedule(), &rng)?;
            save_checkpoint(&TrainedModel::Shared(net.clone()), &path)?;
            write_jsonl(&dir.anchor_log(), &log)?;
            text.push_str(&format!(
                "trained anchor net ({} iterations) -> {}\n",
                cfg.anchor_iters,
                path.display()
            ));
            Some(net)
        }
    } else {
        None
    };

    let layers = penalized_layers(cfg);
    let densities = if kind.regularizer_active() && !layers.is_empty() {
        let paths: Vec<_> = layers.iter().map(|&l| dir.density_path(l)).collect();
        if all_exist(&paths) && !force {
            text.push_str("activation densities reused\n");
            Some(LayerDensitySet::load(&dir.densities_dir(), &layers)?)
        } else {
            let net = anchor_net.as_ref().expect("regularized strategies use the anchor");
            let idx = data.indices(data.anchor, Split::Train);
            let (inputs, _) = data.gather(&idx)?;
            let rng = RngState::new(cfg.train_seed).fork("densities");
            let set = fit_layer_densities(net, data.anchor, &inputs, &layers, &cfg.reg, &rng)?;
            set.save(&dir.densities_dir())?;
            let names: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
            text.push_str(&format!(
                "fitted {} densities at {}\n",
                cfg.reg.density_kind.name(),
                names.join(", ")
            ));
            Some(set)
        }
    } else {
        None
    };

    let spec = StrategySpec::new(kind, cfg.curriculum.clone(), cfg.reg.clone());
    let anchor_art = anchor_net.as_ref().map(|net| AnchorArtifacts {
        net,
        densities: densities.as_ref(),
    });
    let rng = RngState::new(cfg.train_seed);
    let (model, log) = train_strategy(&spec, &cfg.arch, &data, anchor_art.as_ref(), &rng)?;
    save_checkpoint(&model, &ckpt)?;
    write_jsonl(&dir.strategy_log(kind), &log)?;
    dir.store_config(cfg)?;

    let tail = log.last().map_or(0.0, |e| e.total);
    text.push_str(&format!(
        "trained {kind} for {} iterations (final batch loss {tail:.4}) -> {}\n",
        cfg.curriculum.total_iters,
        ckpt.display()
    ));
    let accs = evalkit::classification_accuracy(&model, &data, Split::Val)?;
    let cells: Vec<String> = accs
        .iter()
        .map(|a| format!("{} {:.1}", a.name, 100.0 * a.accuracy))
        .collect();
    text.push_str(&format!("val accuracy (%): {}\n", cells.join("  ")));
    Ok(text)
}

/// Cross-modal retrieval at the configured layer, plus a grand-mean summary
/// across every feature layer.
pub fn stage_eval(dir: &RunDir, cfg: &RunConfig, force: bool) -> Result<String> {
    let stored = dir.reconcile(cfg)?;
    let layer = cfg.eval.layer;
    let outputs = [
        dir.retrieval_report(layer, "json"),
        dir.retrieval_report(layer, "txt"),
        dir.layer_summary("json"),
        dir.layer_summary("txt"),
    ];
    let knobs_match = stored.as_ref().is_some_and(|s| s.eval == cfg.eval);
    if all_exist(&outputs) && knobs_match && !force {
        return Ok(format!("reports for {layer} {}", SKIP_HINT));
    }
    let data = require_dataset(dir)?;
    let model = require_model(dir, cfg.strategy)?;
    dir.ensure_layout()?;

    let counts = val_class_counts(&data, data.anchor);
    let (chance_mean, chance_std) =
        chance_map_estimate(&counts, cfg.eval.n_queries, cfg.eval.chance_trials, cfg.eval.seed)?;

    let mut reports: BTreeMap<LayerId, RetrievalReport> = BTreeMap::new();
    for l in LayerId::REGULARIZABLE {
        let features = extract_feature_map(&model, &data, l, Split::Val)?;
        let protocol = RetrievalProtocol {
            n_queries: cfg.eval.n_queries,
            layer: l.name().to_string(),
            seed: cfg.eval.seed,
        };
        let mut rep = retrieval_eval(&features, &protocol)?;
        rep.strategy = cfg.strategy.name().to_string();
        reports.insert(l, rep);
    }

    let chosen = &reports[&layer];
    write_json(
        &dir.retrieval_report(layer, "json"),
        &RetrievalFile {
            report: chosen.clone(),
            chance_map_mean: chance_mean,
            chance_map_std: chance_std,
        },
    )?;
    let mut table = render_retrieval_table(chosen);
    table.push_str(&format!(
        "chance mAP {:.1} (Monte-Carlo, {} trials, std {:.2})\n",
        100.0 * chance_mean,
        cfg.eval.chance_trials,
        100.0 * chance_std
    ));
    write_text(&dir.retrieval_report(layer, "txt"), &table)?;

    let summary = LayerSummaryFile {
        strategy: cfg.strategy.name().to_string(),
        chance_map_mean: chance_mean,
        chance_map_std: chance_std,
        layers: reports
            .iter()
            .map(|(l, r)| {
                (
                    l.name().to_string(),
                    LayerLine {
                        grand_mean_map: r.grand_mean_map,
                        grand_mean_pr: r.grand_mean_pr,
                        zero_norm_items: r.zero_norm_items,
                    },
                )
            })
            .collect(),
    };
    write_json(&dir.layer_summary("json"), &summary)?;
    let mut rows = vec![vec![
        "layer".to_string(),
        "mAP (%)".into(),
        "precision@10 (%)".into(),
    ]];
    for l in LayerId::REGULARIZABLE {
        let r = &reports[&l];
        rows.push(vec![
            l.name().to_string(),
            format!("{:.1}", 100.0 * r.grand_mean_map),
            format!("{:.1}", 100.0 * r.grand_mean_pr),
        ]);
    }
    let mut summary_text = format!("retrieval grand means, strategy={}\n", cfg.strategy);
    summary_text.push_str(&align(&rows));
    summary_text.push_str(&format!("chance mAP {:.1}\n", 100.0 * chance_mean));
    write_text(&dir.layer_summary("txt"), &summary_text)?;
    dir.store_config(cfg)?;

    Ok(format!(
        "{table}\nwrote {} and layer summary\n",
        dir.retrieval_report(layer, "json").display()
    ))
}

/// Held-out class evaluation: per-modality classification accuracy and
/// retrieval over held-out validation items, anchor excluded.
pub fn stage_zeroshot(dir: &RunDir, cfg: &RunConfig, force: bool) -> Result<String> {
    let stored = dir.reconcile(cfg)?;
    let outputs = [dir.zeroshot_report("json"), dir.zeroshot_report("txt")];
    let knobs_match = stored.as_ref().is_some_and(|s| s.zeroshot == cfg.zeroshot);
    if all_exist(&outputs) && knobs_match && !force {
        return Ok(format!("zero-shot reports {}", SKIP_HINT));
    }
    let data = require_dataset(dir)?;
    let model = require_model(dir, cfg.strategy)?;
    dir.ensure_layout()?;

    let holdout = data.holdout.clone().ok_or(Error::NoHoldout)?;
    let accuracies = evalkit::zero_shot_classify(&model, &data)?;
    let protocol = RetrievalProtocol {
        n_queries: cfg.zeroshot.n_queries,
        layer: cfg.zeroshot.layer.name().to_string(),
        seed: cfg.zeroshot.seed,
    };
    let mut retrieval =
        evalkit::zero_shot_retrieval(&model, &data, cfg.zeroshot.layer, &protocol)?;
    retrieval.strategy = cfg.strategy.name().to_string();

    // Chance for the held-out pool: |H| classes with full validation counts.
    let all_counts = val_class_counts(&data, data.anchor);
    let held_counts: Vec<usize> = holdout
        .classes
        .iter()
        .map(|&c| all_counts[usize::from(c)])
        .collect();
    let (chance_mean, chance_std) = chance_map_estimate(
        &held_counts,
        cfg.zeroshot.n_queries,
        cfg.eval.chance_trials,
        cfg.zeroshot.seed,
    )?;
    let chance_accuracy = 1.0 / f64::from(data.class_count());

    let file = ZeroShotFile {
        strategy: cfg.strategy.name().to_string(),
        held_out_classes: holdout.classes.clone(),
        chance_accuracy,
        accuracies: accuracies.clone(),
        retrieval: retrieval.clone(),
        chance_map_mean: chance_mean,
        chance_map_std: chance_std,
    };
    write_json(&dir.zeroshot_report("json"), &file)?;

    let mut text = render_zero_shot(&accuracies);
    text.push_str(&format!(
        "chance accuracy {:.1} (argmax over all {} classes)\n\n",
        100.0 * chance_accuracy,
        data.class_count()
    ));
    text.push_str(&render_retrieval_table(&retrieval));
    text.push_str(&format!(
        "chance mAP over held-out classes {:.1} (std {:.2})\n",
        100.0 * chance_mean,
        100.0 * chance_std
    ));
    write_text(&dir.zeroshot_report("txt"), &text)?;
    dir.store_config(cfg)?;
    Ok(format!("{text}\nwrote {}\n", dir.zeroshot_report("json").display()))
}

/// Unit consistency for the trained checkpoint next to the same net at its
/// initialization, which anchors the chance level.
pub fn stage_units(dir: &RunDir, cfg: &RunConfig, force: bool) -> Result<String> {
    let stored = dir.reconcile(cfg)?;
    let layer = cfg.eval.layer;
    let outputs = [dir.units_report(layer, "json"), dir.units_report(layer, "txt")];
    let knobs_match = stored.as_ref().is_some_and(|s| s.eval == cfg.eval);
    if all_exist(&outputs) && knobs_match && !force {
        return Ok(format!("unit report for {layer} {}", SKIP_HINT));
    }
    let data = require_dataset(dir)?;
    let model = require_model(dir, cfg.strategy)?;
    dir.ensure_layout()?;

    let trained = unit_activation_report(&model, &data, layer, cfg.eval.top_k)?;

    let input_dims: BTreeMap<ModalityId, usize> = (0..data.modality_count() as ModalityId)
        .map(|m| (m, data.input_dim(m)))
        .collect();
    let init_rng = RngState::new(cfg.train_seed).fork("strategy_init");
    let untrained = crate::crossmodal::CrossModalNet::init_gaussian(
        &cfg.arch,
        &input_dims,
        &init_rng,
    )?;
    let untrained_report = unit_activation_report(
        &TrainedModel::Shared(untrained),
        &data,
        layer,
        cfg.eval.top_k,
    )?;

    let file = UnitsFile {
        strategy: cfg.strategy.name().to_string(),
        trained: trained.clone(),
        untrained_rate: untrained_report.consistency_rate,
    };
    write_json(&dir.units_report(layer, "json"), &file)?;
    let mut text = render_unit_report(&trained);
    text.push_str(&format!(
        "same net untrained: {:.1} consistent\n",
        100.0 * untrained_report.consistency_rate
    ));
    write_text(&dir.units_report(layer, "txt"), &text)?;
    dir.store_config(cfg)?;
    Ok(format!("{text}\nwrote {}\n", dir.units_report(layer, "json").display()))
}

/// CSV embedding export for external projection tools.
pub fn stage_export(dir: &RunDir, cfg: &RunConfig, force: bool) -> Result<String> {
    let stored = dir.reconcile(cfg)?;
    let layer = cfg.eval.layer;
    let csv = dir.embeddings_csv(layer);
    let knobs_match = stored.as_ref().is_some_and(|s| s.eval == cfg.eval);
    if csv.exists() && knobs_match && !force {
        return Ok(format!("embeddings for {layer} {}", SKIP_HINT));
    }
    let data = require_dataset(dir)?;
    let model = require_model(dir, cfg.strategy)?;
    dir.ensure_layout()?;

    let mut rng = RngState::new(cfg.eval.seed).fork("export");
    let rows = collect_export_rows(&model, &data, layer, cfg.eval.export_cap, &mut rng)?;
    export_embeddings(&rows, &csv)?;
    dir.store_config(cfg)?;
    Ok(format!(
        "wrote {} ({} rows, cap {}/modality)\n",
        csv.display(),
        rows.len(),
        cfg.eval.export_cap
    ))
}

/// Read-only aggregation across run directories: grand-mean retrieval and
/// zero-shot accuracy per strategy, mean and sample std over runs.
pub fn aggregate(dirs: &[std::path::PathBuf]) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::Config("aggregate needs at least one run directory".into()));
    }
    struct Acc {
        maps: Vec<f64>,
        prs: Vec<f64>,
        chance: Vec<f64>,
        zs_acc: BTreeMap<String, Vec<f64>>,
        zs_map: Vec<f64>,
    }
    let mut by_strategy: BTreeMap<String, Acc> = BTreeMap::new();
    for d in dirs {
        let run = RunDir::new(d);
        let Some(cfg) = run.load_config()? else {
            return Err(Error::Config(format!(
                "{}: not a run directory (no config.resolved)",
                d.display()
            )));
        };
        let report_path = run.retrieval_report(cfg.eval.layer, "json");
        if !report_path.exists() {
            return Err(Error::Config(format!(
                "{}: no retrieval report at layer {}; run `xmodal eval` first",
                d.display(),
                cfg.eval.layer
            )));
        }
        let file: RetrievalFile = read_json(&report_path)?;
        let acc = by_strategy
            .entry(cfg.strategy.name().to_string())
            .or_insert_with(|| Acc {
                maps: Vec::new(),
                prs: Vec::new(),
                chance: Vec::new(),
                zs_acc: BTreeMap::new(),
                zs_map: Vec::new(),
            });
        acc.maps.push(file.report.grand_mean_map);
        acc.prs.push(file.report.grand_mean_pr);
        acc.chance.push(file.chance_map_mean);
        let zs_path = run.zeroshot_report("json");
        if zs_path.exists() {
            let zs: ZeroShotFile = read_json(&zs_path)?;
            for a in zs.accuracies {
                acc.zs_acc.entry(a.name).or_default().push(a.accuracy);
            }
            acc.zs_map.push(zs.retrieval.grand_mean_map);
        }
    }

    fn mean_std(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        (mean, var.sqrt())
    }
    fn cell(xs: &[f64]) -> String {
        let (m, s) = mean_std(xs);
        format!("{:.1} +- {:.1}", 100.0 * m, 100.0 * s)
    }

    let mut rows = vec![vec![
        "strategy".to_string(),
        "runs".into(),
        "mAP (%)".into(),
        "precision@10 (%)".into(),
        "zero-shot mAP (%)".into(),
    ]];
    let mut chance_all = Vec::new();
    for (name, acc) in &by_strategy {
        rows.push(vec![
            name.clone(),
            acc.maps.len().to_string(),
            cell(&acc.maps),
            cell(&acc.prs),
            if acc.zs_map.is_empty() { "--".into() } else { cell(&acc.zs_map) },
        ]);
        chance_all.extend_from_slice(&acc.chance);
    }
    let mut text = format!("aggregate over {} run(s)\n", dirs.len());
    text.push_str(&align(&rows));
    let (chance, _) = mean_std(&chance_all);
    text.push_str(&format!("chance mAP {:.1}\n", 100.0 * chance));

    let mut zs_rows = Vec::new();
    for (name, acc) in &by_strategy {
        for (modality, vals) in &acc.zs_acc {
            zs_rows.push(vec![name.clone(), modality.clone(), cell(vals)]);
        }
    }
    if !zs_rows.is_empty() {
        text.push_str("\nzero-shot accuracy (%)\n");
        let mut table = vec![vec![
            "strategy".to_string(),
            "modality".into(),
            "accuracy".into(),
        ]];
        table.extend(zs_rows);
        text.push_str(&align(&table));
    }
    Ok(text)
}
