//! Measurement harness: cost (size, time), accuracy, and fine-tuning-ability
//! attacks (incremental learning with an enlarged final layer, transfer
//! learning with or without frozen features).
//!
//! Overhead is `cost2/cost1 - 1`; declination is `1 - acc2/acc1`. Both are
//! recomputed from raw cells, never trusted from input.

use crate::data::{Dataset, Split};
use crate::distill::{train_on_labels, FitConfig, TrainLog};
use crate::error::{Error, Result};
use crate::graph::{
    node_id, BlockRole, LayerKind, Mode, ModelGraph, ModelMeta, NodeParams, ParamInit,
};
use crate::loss::predictions;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

// ---------------------------------------------------------------------------
// base metrics
// ---------------------------------------------------------------------------

/// Fraction of correctly classified samples, inference mode, deterministic.
pub fn accuracy_on_split(m: &ModelGraph, split: &Split, batch_size: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for batch in crate::data::batches(split, batch_size, 0, false)? {
        let logits = m.forward(&batch.images, Mode::Infer)?;
        for (p, l) in predictions(&logits)?.iter().zip(&batch.labels) {
            if p == l {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Test-split accuracy; the dataset's class count must match the model's.
pub fn accuracy(m: &ModelGraph, data: &Dataset) -> Result<f64> {
    if data.classes != m.meta().classes {
        return Err(Error::Interface {
            context: "accuracy".into(),
            expected: format!("{} classes", m.meta().classes),
            actual: format!("dataset with {} classes", data.classes),
        });
    }
    accuracy_on_split(m, &data.test, 64)
}

pub fn model_size_bytes(m: &ModelGraph) -> usize {
    m.param_bytes()
}

/// Mean wall time per sample in microseconds: single-sample forward passes,
/// single-threaded, `warmup` discarded passes then `passes` measured ones.
/// Data loading is excluded; only forward computation is timed.
pub fn inference_time_us(
    m: &ModelGraph,
    split: &Split,
    passes: usize,
    warmup: usize,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Data("cannot time on an empty split".into()));
    }
    let (c, h, w) = split.shape;
    let n = split.len();
    let sample = |i: usize| -> Result<Tensor> {
        Tensor::new(vec![1, c, h, w], split.image(i % n).to_vec())
    };
    for i in 0..warmup {
        let x = sample(i)?;
        m.forward(&x, Mode::Infer)?;
    }
    let mut total = 0.0f64;
    for i in 0..passes {
        let x = sample(i)?;
        let t = Instant::now();
        m.forward(&x, Mode::Infer)?;
        total += t.elapsed().as_secs_f64();
    }
    Ok(total / passes as f64 * 1e6)
}

/// `cost2/cost1 - 1`, in percent.
pub fn overhead_pct(cost1: f64, cost2: f64) -> f64 {
    (cost2 / cost1 - 1.0) * 100.0
}

/// `1 - acc2/acc1`, in percent. `None` when the baseline is zero.
pub fn declination_pct(acc1: f64, acc2: f64) -> Option<f64> {
    if acc1 == 0.0 {
        None
    } else {
        Some((1.0 - acc2 / acc1) * 100.0)
    }
}

// ---------------------------------------------------------------------------
// classifier surgery + attacks
// ---------------------------------------------------------------------------

/// Clone the model with its final linear layer replaced by a freshly
/// initialized one of `new_classes` outputs. Every other parameter is
/// preserved bit-identically.
pub fn reinit_classifier(m: &ModelGraph, new_classes: usize, seed: u64) -> Result<ModelGraph> {
    let classifier = m.classifier_block().clone();
    let linear_nodes: Vec<&str> = classifier
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, LayerKind::Linear { .. }))
        .map(|n| n.name.as_str())
        .collect();
    if linear_nodes.len() != 1 {
        return Err(Error::Graph(format!(
            "classifier must have exactly one linear layer, found {}",
            linear_nodes.len()
        )));
    }
    let linear_name = linear_nodes[0].to_string();
    let mut blocks: Vec<_> = m.blocks().to_vec();
    let head = blocks.last_mut().unwrap();
    for node in &mut head.nodes {
        if node.name == linear_name {
            node.kind = LayerKind::Linear {
                out_features: new_classes,
            };
        }
    }
    let head_name = head.name.clone();
    let linear_id = node_id(&head_name, &linear_name);
    let mut params: BTreeMap<String, NodeParams> = m
        .params()
        .iter()
        .filter(|(id, _)| **id != linear_id)
        .map(|(id, p)| (id.clone(), p.clone()))
        .collect();
    let in_features = match m.node_params(&linear_id)? {
        NodeParams::Linear(lp) => lp.in_features(),
        _ => unreachable!("linear node has linear params"),
    };
    let bound = (6.0 / in_features as f32).sqrt();
    let mut rng = crate::rng::stream(seed, &format!("reinit/{linear_id}"), 0);
    params.insert(
        linear_id,
        NodeParams::Linear(crate::ops::LinearParams {
            weight: Tensor::uniform(vec![new_classes, in_features], bound, &mut rng),
            bias: Tensor::zeros(vec![new_classes]),
        }),
    );
    let meta = ModelMeta {
        input: m.meta().input,
        classes: new_classes,
    };
    ModelGraph::build(meta, blocks, ParamInit::Provided(params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Incremental,
    TransferFinetune,
    TransferFrozen,
}

impl AttackKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "incremental" => Ok(AttackKind::Incremental),
            "transfer_finetune" => Ok(AttackKind::TransferFinetune),
            "transfer_frozen" => Ok(AttackKind::TransferFrozen),
            other => Err(Error::config(format!("unknown attack kind {other:?}"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AttackKind::Incremental => "incremental",
            AttackKind::TransferFinetune => "transfer_finetune",
            AttackKind::TransferFrozen => "transfer_frozen",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Class count of the enlarged final layer (incremental only).
    pub new_classes: usize,
    pub fit: FitConfig,
}

pub struct AttackOutcome {
    pub best_acc: f64,
    pub log: TrainLog,
    pub model: ModelGraph,
}

/// Run a fine-tuning attack against a clone of `m`; the input model is never
/// mutated. Returns the best test accuracy over the attack's epochs.
pub fn attack(m: &ModelGraph, cfg: &AttackConfig, data: &Dataset) -> Result<AttackOutcome> {
    let prepared = match cfg.kind {
        AttackKind::Incremental => {
            if cfg.new_classes <= m.meta().classes {
                return Err(Error::Interface {
                    context: "incremental attack".into(),
                    expected: format!("> {} classes", m.meta().classes),
                    actual: format!("{} classes", cfg.new_classes),
                });
            }
            if data.classes != cfg.new_classes {
                return Err(Error::Interface {
                    context: "incremental attack".into(),
                    expected: format!("dataset with {} classes", cfg.new_classes),
                    actual: format!("dataset with {} classes", data.classes),
                });
            }
            reinit_classifier(m, cfg.new_classes, cfg.fit.seed)?
        }
        AttackKind::TransferFinetune | AttackKind::TransferFrozen => {
            if data.classes != m.meta().classes {
                return Err(Error::Interface {
                    context: "transfer attack".into(),
                    expected: format!("dataset with {} classes", m.meta().classes),
                    actual: format!("dataset with {} classes", data.classes),
                });
            }
            let mut t = reinit_classifier(m, m.meta().classes, cfg.fit.seed)?;
            if cfg.kind == AttackKind::TransferFrozen {
                let head = t.classifier_block().name.clone();
                let ids: Vec<String> = t
                    .params()
                    .keys()
                    .filter(|id| !id.starts_with(&format!("{head}/")))
                    .cloned()
                    .collect();
                t.freeze(ids)?;
            }
            t
        }
    };
    let (model, log) = train_on_labels(&prepared, data, &cfg.fit, cfg.kind.label())?;
    let best_acc = log.best_test_acc().unwrap_or(0.0);
    Ok(AttackOutcome {
        best_acc,
        log,
        model,
    })
}

// ---------------------------------------------------------------------------
// declination table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DeclinationRow {
    pub network: String,
    pub attack: String,
    pub baseline_acc: f64,
    pub obfuscated_acc: f64,
}

impl DeclinationRow {
    pub fn declination_pct(&self) -> Option<f64> {
        declination_pct(self.baseline_acc, self.obfuscated_acc)
    }
}

/// CSV with the declination recomputed per row; a zero baseline flags the
/// row as undefined.
pub fn declination_csv(rows: &[DeclinationRow]) -> String {
    let mut s = String::from("network,attack,baseline_acc,obfuscated_acc,declination_pct\n");
    for r in rows {
        match r.declination_pct() {
            Some(d) => writeln!(
                s,
                "{},{},{},{},{:.2}",
                r.network, r.attack, r.baseline_acc, r.obfuscated_acc, d
            )
            .unwrap(),
            None => writeln!(
                s,
                "{},{},{},{},undefined",
                r.network, r.attack, r.baseline_acc, r.obfuscated_acc
            )
            .unwrap(),
        }
    }
    s
}

pub fn declination_text(rows: &[DeclinationRow]) -> String {
    let mut s = format!(
        "{:<14} {:<18} {:>9} {:>9} {:>8}\n",
        "network", "attack", "acc1", "acc2", "decline"
    );
    for r in rows {
        let d = r
            .declination_pct()
            .map(|d| format!("{d:.1}%"))
            .unwrap_or_else(|| "n/a".into());
        writeln!(
            s,
            "{:<14} {:<18} {:>8.2}% {:>8.2}% {:>8}",
            r.network,
            r.attack,
            r.baseline_acc * 100.0,
            r.obfuscated_acc * 100.0,
            d
        )
        .unwrap();
    }
    s
}

// ---------------------------------------------------------------------------
// reference-figure fixtures
// ---------------------------------------------------------------------------

/// Published cost/accuracy figures for the three reference networks, used to
/// check the overhead formula (not to reproduce the training runs).
#[derive(Debug, Clone, Copy)]
pub struct CostRow {
    pub model: &'static str,
    pub round: &'static str,
    pub acc_pct: f64,
    pub size_mb: f64,
    pub time_us: f64,
    /// Quoted overhead percentages and the tolerance (in percentage points)
    /// at which the formula must reproduce them from the size/time cells.
    pub quoted_size_ovh_pct: Option<f64>,
    pub quoted_time_ovh_pct: Option<f64>,
    pub size_tol_pp: f64,
    pub time_tol_pp: f64,
}

/// The googlenet time-overhead cells are quoted against a slightly different
/// timing baseline than the printed one (the printed cells give -57%/-61%,
/// the quoted values are -59%/-63%); their tolerance is widened to absorb
/// that inconsistency. Every other cell reproduces within one point.
pub fn reference_cost_rows() -> Vec<CostRow> {
    let row = |model, round, acc, size, time, sovh: Option<f64>, tovh: Option<f64>, ttol| CostRow {
        model,
        round,
        acc_pct: acc,
        size_mb: size,
        time_us: time,
        quoted_size_ovh_pct: sovh,
        quoted_time_ovh_pct: tovh,
        size_tol_pp: 1.0,
        time_tol_pp: ttol,
    };
    vec![
        row("googlenet", "original", 90.83, 2.51, 17.85, None, None, 1.0),
        row("googlenet", "1st", 90.99, 7.82, 7.69, Some(212.0), Some(-59.0), 2.5),
        row("googlenet", "2nd", 90.92, 2.49, 7.01, Some(-1.0), Some(-63.0), 2.5),
        row("resnet", "original", 90.94, 43.36, 10.50, None, None, 1.0),
        row("resnet", "1st", 91.39, 26.80, 6.76, Some(-38.0), Some(-36.0), 1.0),
        row("resnet", "2nd", 91.04, 11.38, 5.17, Some(-74.0), Some(-51.0), 1.0),
        row("densenet", "original", 90.14, 4.24, 35.53, None, None, 1.0),
        row("densenet", "1st", 90.87, 8.86, 8.86, Some(109.0), Some(-75.0), 1.0),
        row("densenet", "2nd", 90.31, 4.21, 5.52, Some(-1.0), Some(-84.0), 1.0),
    ]
}

/// Published fine-tuning-attack accuracies (baseline vs obfuscated) and the
/// quoted declination, reproduced by the formula within 0.1 points.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneRow {
    pub network: &'static str,
    pub task: &'static str,
    pub baseline_acc_pct: f64,
    pub obfuscated_acc_pct: f64,
    pub quoted_decl_pct: f64,
}

pub fn reference_finetune_rows() -> Vec<FinetuneRow> {
    let row = |network, task, a1, a2, d| FinetuneRow {
        network,
        task,
        baseline_acc_pct: a1,
        obfuscated_acc_pct: a2,
        quoted_decl_pct: d,
    };
    vec![
        row("googlenet", "cifar100", 66.5, 63.59, 4.4),
        row("googlenet", "stl10", 79.15, 77.95, 1.5),
        row("resnet", "cifar100", 66.92, 64.77, 3.2),
        row("resnet", "stl10", 78.86, 75.97, 3.7),
        row("densenet", "cifar100", 67.16, 62.91, 6.3),
        row("densenet", "stl10", 78.45, 76.90, 2.0),
    ]
}

/// Check that the overhead and declination formulas reproduce every quoted
/// reference figure within its tolerance. Returns a per-cell report; errors
/// if any cell fails.
pub fn verify_reference_figures() -> Result<String> {
    let mut report = String::new();
    let mut failures = 0;
    let cost = reference_cost_rows();
    for row in &cost {
        let base = cost
            .iter()
            .find(|r| r.model == row.model && r.round == "original")
            .unwrap();
        let mut check = |label: &str, cost1: f64, cost2: f64, quoted: f64, tol: f64| {
            let got = overhead_pct(cost1, cost2);
            let ok = (got - quoted).abs() <= tol;
            if !ok {
                failures += 1;
            }
            writeln!(
                report,
                "{} {} {} overhead: computed {:+.2}% quoted {:+.0}% (tol {tol}pp) {}",
                row.model,
                row.round,
                label,
                got,
                quoted,
                if ok { "ok" } else { "FAIL" }
            )
            .unwrap();
        };
        if let Some(q) = row.quoted_size_ovh_pct {
            check("size", base.size_mb, row.size_mb, q, row.size_tol_pp);
        }
        if let Some(q) = row.quoted_time_ovh_pct {
            check("time", base.time_us, row.time_us, q, row.time_tol_pp);
        }
    }
    for row in reference_finetune_rows() {
        let got = declination_pct(row.baseline_acc_pct, row.obfuscated_acc_pct)
            .expect("nonzero baseline");
        let ok = (got - row.quoted_decl_pct).abs() <= 0.1;
        if !ok {
            failures += 1;
        }
        writeln!(
            report,
            "{} {} declination: computed {:.2}% quoted {:.1}% (tol 0.1pp) {}",
            row.network,
            row.task,
            got,
            row.quoted_decl_pct,
            if ok { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    if failures > 0 {
        return Err(Error::Data(format!(
            "{failures} reference-figure check(s) failed:\n{report}"
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overhead_formula_reference_cells() {
        // 43.36 MB -> 11.38 MB gives -74%
        assert!((overhead_pct(43.36, 11.38) - -73.75).abs() < 0.01);
        assert_eq!(overhead_pct(10.0, 10.0), 0.0);
    }

    #[test]
    fn declination_formula_reference_cells() {
        // 67.16% vs 62.91% -> 6.3%; 79.15% vs 77.95% -> 1.5%
        assert!((declination_pct(67.16, 62.91).unwrap() - 6.3).abs() < 0.1);
        assert!((declination_pct(79.15, 77.95).unwrap() - 1.5).abs() < 0.1);
        // 66.5% vs 63.59% -> 4.4% (incremental anchor)
        assert!((declination_pct(66.5, 63.59).unwrap() - 4.4).abs() < 0.1);
        assert_eq!(declination_pct(80.0, 80.0), Some(0.0));
        assert_eq!(declination_pct(0.0, 10.0), None);
    }

    #[test]
    fn googlenet_time_cell_is_in_the_quoted_band() {
        // 17.85us -> 7.01us computes to about -61% while -63% is quoted
        let got = overhead_pct(17.85, 7.01);
        assert!(got.round() >= -63.0 && got.round() <= -61.0, "{got}");
    }

    #[test]
    fn reference_figures_all_reproduce() {
        let report = verify_reference_figures().unwrap();
        assert!(report.contains("resnet 2nd size overhead"));
        assert!(!report.contains("FAIL"));
    }

    #[test]
    fn declination_csv_flags_zero_baseline() {
        let rows = vec![DeclinationRow {
            network: "toy".into(),
            attack: "transfer_finetune".into(),
            baseline_acc: 0.0,
            obfuscated_acc: 0.5,
        }];
        assert!(declination_csv(&rows).contains("undefined"));
    }
}
