//! The two-round obfuscation procedure: per-block simulation bottom-up (so
//! residual errors of the lower layers can be mitigated when simulating the
//! upper ones), a whole-model fine-tune, then one simulation of the entire
//! feature extractor. Every stage is checkpointed so interrupted runs resume
//! at stage granularity; all randomness is derived from the plan seed, so a
//! resumed run reproduces an uninterrupted one bit for bit.

use crate::analyzer::SimulatorPlan;
use crate::data::Dataset;
use crate::distill::{
    train_on_labels, train_simulator, FitConfig, JointTrainConfig, SimTrainSpec, TrainLog,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy_on_split, inference_time_us, overhead_pct};
use crate::graph::{self, BlockRole, LayerKind, ModelGraph};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct GroupPlan {
    /// Contiguous run of feature blocks, bottom-up, replaced by one
    /// simulator.
    pub first: String,
    pub last: String,
    pub plan: SimulatorPlan,
}

impl GroupPlan {
    pub fn label(&self) -> String {
        if self.first == self.last {
            self.first.clone()
        } else {
            format!("{}..{}", self.first, self.last)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObfuscationPlan {
    pub round1: Vec<GroupPlan>,
    pub round1_train: JointTrainConfig,
    pub finetune: FitConfig,
    pub round2: SimulatorPlan,
    pub round2_train: JointTrainConfig,
    pub seed: u64,
}

impl ObfuscationPlan {
    /// Groups must be disjoint, contiguous, bottom-up, and name existing
    /// feature blocks.
    pub fn validate_against(&self, teacher: &ModelGraph) -> Result<()> {
        if self.round1.is_empty() {
            return Err(Error::config("obfuscation plan has no round-1 groups"));
        }
        let names: Vec<&str> = teacher
            .blocks()
            .iter()
            .filter(|b| b.role == BlockRole::Feature)
            .map(|b| b.name.as_str())
            .collect();
        let pos = |n: &str| -> Result<usize> {
            names
                .iter()
                .position(|b| *b == n)
                .ok_or_else(|| Error::config(format!("plan references unknown feature block {n:?}")))
        };
        let mut cursor = 0usize;
        let mut used = HashSet::new();
        for g in &self.round1 {
            let fi = pos(&g.first)?;
            let li = pos(&g.last)?;
            if fi > li {
                return Err(Error::config(format!(
                    "group {:?} is not in graph order",
                    g.label()
                )));
            }
            if fi < cursor {
                return Err(Error::config(
                    "round-1 groups must be disjoint and ordered bottom-up".to_string(),
                ));
            }
            for n in &names[fi..=li] {
                used.insert(n.to_string());
            }
            cursor = li + 1;
        }
        Ok(())
    }

    /// Canonical description used for the resume integrity hash.
    fn describe(&self) -> String {
        let mut s = String::new();
        let plan_str = |p: &SimulatorPlan, s: &mut String| {
            for l in &p.layers {
                write!(
                    s,
                    "[k{} s{} p{} c{} bn{} relu{}]",
                    l.kernel, l.stride, l.padding, l.out_channels, l.batchnorm as u8, l.relu as u8
                )
                .unwrap();
            }
        };
        let joint_str = |c: &JointTrainConfig, s: &mut String| {
            write!(
                s,
                "alpha={} mode={:?} epochs={} lr={} mom={} wd={} bs={} loss={:?};",
                c.alpha, c.mode, c.epochs, c.lr, c.momentum, c.weight_decay, c.batch_size,
                c.task_loss
            )
            .unwrap();
        };
        writeln!(s, "seed={}", self.seed).unwrap();
        for g in &self.round1 {
            write!(s, "group {}..{} ", g.first, g.last).unwrap();
            plan_str(&g.plan, &mut s);
            s.push('\n');
        }
        s.push_str("r1 ");
        joint_str(&self.round1_train, &mut s);
        write!(
            s,
            "\nft epochs={} lr={} mom={} wd={} bs={}\nr2 ",
            self.finetune.epochs,
            self.finetune.lr,
            self.finetune.momentum,
            self.finetune.weight_decay,
            self.finetune.batch_size
        )
        .unwrap();
        plan_str(&self.round2, &mut s);
        s.push(' ');
        joint_str(&self.round2_train, &mut s);
        s
    }

    pub fn integrity_hash(&self, data_digest: &str) -> String {
        use sha2::{Digest, Sha256};
        let text = format!("{}\ndata={data_digest}\n", self.describe());
        let d = Sha256::digest(text.as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Round1,
    Finetune,
    Round2,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "round1" => Ok(Stage::Round1),
            "finetune" => Ok(Stage::Finetune),
            "round2" => Ok(Stage::Round2),
            other => Err(Error::InvalidArg(format!("unknown stage {other:?}"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Stage::Round1 => "round1",
            Stage::Finetune => "finetune",
            Stage::Round2 => "round2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRow {
    pub stage: String,
    pub test_acc: f64,
    pub param_bytes: usize,
    pub mean_infer_us: f64,
}

/// Per-stage measurements; overheads are recomputed against the original
/// row, which therefore carries overheads of exactly zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObfuscationReport {
    pub rows: Vec<StageRow>,
}

impl ObfuscationReport {
    pub fn size_overhead_pct(&self, i: usize) -> f64 {
        overhead_pct(
            self.rows[0].param_bytes as f64,
            self.rows[i].param_bytes as f64,
        )
    }

    pub fn time_overhead_pct(&self, i: usize) -> f64 {
        overhead_pct(self.rows[0].mean_infer_us, self.rows[i].mean_infer_us)
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("stage,test_acc,param_bytes,mean_infer_us,size_overhead,time_overhead\n");
        for (i, r) in self.rows.iter().enumerate() {
            writeln!(
                s,
                "{},{},{},{:.3},{:.4},{:.4}",
                r.stage,
                r.test_acc,
                r.param_bytes,
                r.mean_infer_us,
                self.size_overhead_pct(i) / 100.0,
                self.time_overhead_pct(i) / 100.0
            )
            .unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<10} {:>8} {:>12} {:>10} {:>7} {:>7}\n",
            "stage", "acc", "size(bytes)", "time(us)", "size", "time"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let (so, to) = if i == 0 {
                ("-".to_string(), "-".to_string())
            } else {
                (
                    format!("{:+.0}%", self.size_overhead_pct(i)),
                    format!("{:+.0}%", self.time_overhead_pct(i)),
                )
            };
            writeln!(
                s,
                "{:<10} {:>7.2}% {:>12} {:>10.2} {:>7} {:>7}",
                r.stage,
                r.test_acc * 100.0,
                r.param_bytes,
                r.mean_infer_us,
                so,
                to
            )
            .unwrap();
        }
        s
    }
}

pub struct Round1Outcome {
    pub model: ModelGraph,
    /// `(group label, log)` in processing order (bottom-up contract).
    pub logs: Vec<(String, TrainLog)>,
}

/// Iterate round-1 groups bottom-up; each simulator trains against the
/// original teacher's tap while sitting inside the current working model,
/// then replaces its span. `checkpoint` receives the working model after
/// each group.
pub fn obfuscate_round1(
    teacher: &ModelGraph,
    plan: &ObfuscationPlan,
    data: &Dataset,
    mut checkpoint: impl FnMut(usize, &ModelGraph) -> Result<Option<ModelGraph>>,
) -> Result<Round1Outcome> {
    plan.validate_against(teacher)?;
    let mut working = teacher.clone();
    let mut logs = Vec::new();
    for (gi, group) in plan.round1.iter().enumerate() {
        let sim_name = format!("sim{}", gi + 1);
        if let Some(resumed) = checkpoint(gi, &working)? {
            working = resumed;
            logs.push((group.label(), TrainLog::default()));
            continue;
        }
        let mut cfg = plan.round1_train.clone();
        cfg.seed = crate::rng::derive(plan.seed, "round1", gi as u64);
        let result = train_simulator(
            SimTrainSpec {
                hint_model: teacher,
                hint_block: &group.last,
                working: &working,
                span: (&group.first, &group.last),
                plan: &group.plan,
                sim_block_name: &sim_name,
                init: None,
            },
            data,
            &cfg,
            &format!("round1/{}", group.label()),
        )?;
        working = result.mixed;
        logs.push((group.label(), result.log));
    }
    Ok(Round1Outcome {
        model: working,
        logs,
    })
}

/// Fine-tune all parameters on labels, returning the best-test-accuracy
/// checkpoint.
pub fn finetune(
    m: &ModelGraph,
    data: &Dataset,
    cfg: &FitConfig,
) -> Result<(ModelGraph, TrainLog)> {
    let mut m = m.clone();
    m.unfreeze_all();
    train_on_labels(&m, data, cfg, "finetune")
}

/// Simulate the entire feature extractor of the intermediate model at one
/// time; the hint ground truth is the intermediate model's own extractor
/// output.
pub fn obfuscate_round2(
    m_prime: &ModelGraph,
    plan: &ObfuscationPlan,
    data: &Dataset,
) -> Result<(ModelGraph, TrainLog)> {
    let feature_names: Vec<String> = m_prime
        .blocks()
        .iter()
        .filter(|b| b.role == BlockRole::Feature)
        .map(|b| b.name.clone())
        .collect();
    let (first, last) = match (feature_names.first(), feature_names.last()) {
        (Some(f), Some(l)) => (f.clone(), l.clone()),
        _ => return Err(Error::Graph("model has no feature extractor".into())),
    };
    let mut cfg = plan.round2_train.clone();
    cfg.seed = crate::rng::derive(plan.seed, "round2", 0);
    let result = train_simulator(
        SimTrainSpec {
            hint_model: m_prime,
            hint_block: &last,
            working: m_prime,
            span: (&first, &last),
            plan: &plan.round2,
            sim_block_name: "sim",
            init: None,
        },
        data,
        &cfg,
        "round2",
    )?;
    Ok((result.mixed, result.log))
}

// ---------------------------------------------------------------------------
// full pipeline with checkpoints
// ---------------------------------------------------------------------------

pub struct ObfuscateOptions {
    pub out_dir: PathBuf,
    /// Stop after the named stage (checkpoint is written first); the next
    /// invocation resumes from it.
    pub stop_after: Option<Stage>,
    pub timing_passes: usize,
    pub timing_warmup: usize,
}

impl ObfuscateOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        ObfuscateOptions {
            out_dir: out_dir.into(),
            stop_after: None,
            timing_passes: 1000,
            timing_warmup: 100,
        }
    }
}

pub struct ObfuscateOutcome {
    /// `None` when the run stopped early at `stop_after`.
    pub final_model: Option<ModelGraph>,
    pub report: Option<ObfuscationReport>,
    pub round1_logs: Vec<(String, TrainLog)>,
    pub finetune_log: Option<TrainLog>,
    pub round2_log: Option<TrainLog>,
}

fn stage_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.dobf"))
}

fn write_log(dir: &Path, name: &str, log: &TrainLog) -> Result<()> {
    std::fs::write(dir.join(format!("{name}.csv")), log.to_csv())?;
    Ok(())
}

/// Run round1 -> finetune -> round2 -> report, checkpointing each stage to
/// `out_dir` and resuming from any stage whose checkpoint already exists.
/// Resuming under a different plan, seed, or dataset is rejected via the
/// manifest hash.
pub fn obfuscate(
    teacher: &ModelGraph,
    plan: &ObfuscationPlan,
    data: &Dataset,
    opts: &ObfuscateOptions,
) -> Result<ObfuscateOutcome> {
    plan.validate_against(teacher)?;
    let dir = &opts.out_dir;
    std::fs::create_dir_all(dir)?;

    let data_digest = {
        use sha2::{Digest, Sha256};
        let d = Sha256::digest(data.spec_string.as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect::<String>()
    };
    let hash = plan.integrity_hash(&data_digest);
    let manifest = dir.join("pipeline.manifest");
    if manifest.exists() {
        let found = std::fs::read_to_string(&manifest)?;
        let found = found.trim();
        if found != hash {
            return Err(Error::Interface {
                context: "pipeline resume".into(),
                expected: format!("manifest hash {hash}"),
                actual: format!("existing run with hash {found}"),
            });
        }
    } else {
        std::fs::write(&manifest, format!("{hash}\n"))?;
    }

    let mut outcome = ObfuscateOutcome {
        final_model: None,
        report: None,
        round1_logs: Vec::new(),
        finetune_log: None,
        round2_log: None,
    };

    // round 1, group-granular checkpoints
    let round1_path = stage_path(dir, "round1");
    let m_prime = if round1_path.exists() {
        graph::load(&round1_path)?
    } else {
        let out = obfuscate_round1(teacher, plan, data, |gi, working| {
            let p = stage_path(dir, &format!("round1_g{gi}"));
            if p.exists() {
                Ok(Some(graph::load(&p)?))
            } else {
                // persist progress before training the next group
                if gi > 0 {
                    graph::save(working, &stage_path(dir, &format!("round1_g{}", gi - 1)))?;
                }
                Ok(None)
            }
        })?;
        for (label, log) in &out.logs {
            if !log.records.is_empty() {
                write_log(dir, &format!("round1_{}", label.replace("..", "-")), log)?;
            }
        }
        graph::save(&out.model, &round1_path)?;
        outcome.round1_logs = out.logs;
        out.model
    };
    if opts.stop_after == Some(Stage::Round1) {
        return Ok(outcome);
    }

    // fine-tune
    let finetune_path = stage_path(dir, "finetune");
    let tuned = if finetune_path.exists() {
        graph::load(&finetune_path)?
    } else {
        let mut cfg = plan.finetune.clone();
        cfg.seed = crate::rng::derive(plan.seed, "finetune", 0);
        let (tuned, log) = finetune(&m_prime, data, &cfg)?;
        write_log(dir, "finetune", &log)?;
        graph::save(&tuned, &finetune_path)?;
        outcome.finetune_log = Some(log);
        tuned
    };
    if opts.stop_after == Some(Stage::Finetune) {
        return Ok(outcome);
    }

    // round 2
    let final_path = stage_path(dir, "final");
    let final_model = if final_path.exists() {
        graph::load(&final_path)?
    } else {
        let (final_model, log) = obfuscate_round2(&tuned, plan, data)?;
        write_log(dir, "round2", &log)?;
        graph::save(&final_model, &final_path)?;
        outcome.round2_log = Some(log);
        final_model
    };
    if opts.stop_after == Some(Stage::Round2) {
        return Ok(outcome);
    }

    // report, recomputed from the saved checkpoints
    let mut report = ObfuscationReport::default();
    let stages: Vec<(&str, ModelGraph)> = vec![
        ("original", teacher.clone()),
        ("round1", graph::load(&round1_path)?),
        ("finetune", graph::load(&finetune_path)?),
        ("round2", graph::load(&final_path)?),
    ];
    for (name, model) in &stages {
        report.rows.push(StageRow {
            stage: name.to_string(),
            test_acc: accuracy_on_split(model, &data.test, 64)?,
            param_bytes: model.param_bytes(),
            mean_infer_us: inference_time_us(
                model,
                &data.test,
                opts.timing_passes,
                opts.timing_warmup,
            )?,
        });
    }
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    std::fs::write(dir.join("report.txt"), report.to_text())?;
    outcome.final_model = Some(final_model);
    outcome.report = Some(report);
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// structural predicates
// ---------------------------------------------------------------------------

/// True when the extractor is a single feature block of sequential
/// conv/bn/relu/pool nodes (no concat or add, every node single-input).
pub fn has_sequential_extractor(m: &ModelGraph) -> bool {
    let features: Vec<_> = m.feature_blocks().collect();
    if features.len() != 1 {
        return false;
    }
    features[0].nodes.iter().all(|n| {
        n.inputs.len() == 1
            && matches!(
                n.kind,
                LayerKind::Conv { .. }
                    | LayerKind::BatchNorm { .. }
                    | LayerKind::Relu
                    | LayerKind::MaxPool { .. }
                    | LayerKind::AvgPool { .. }
            )
    })
}

/// Number of conv layers in the feature extractor.
pub fn extractor_conv_depth(m: &ModelGraph) -> usize {
    m.feature_blocks()
        .flat_map(|b| b.nodes.iter())
        .filter(|n| matches!(n.kind, LayerKind::Conv { .. }))
        .count()
}
