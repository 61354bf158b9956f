//! Joint training of a simulator against two ground truths: the teacher's
//! hidden-layer output (hint) and the data labels (task). The two losses are
//! reduced separately and either combined in one step or alternated batch by
//! batch; alternating absorbs scale differences between the terms, so it is
//! the default.

use crate::analyzer::SimulatorPlan;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::eval::accuracy_on_split;
use crate::graph::{BlockSpec, Mode, ModelGraph, NodeParams, NodeShape};
use crate::loss;
use crate::optim::{Sgd, SgdConfig};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Odd batches step on the hint loss, even batches on the alpha-scaled
    /// task loss.
    Alternating,
    /// One step per batch on `hint + alpha * task`.
    Combined,
    /// Hint loss only (equivalent to combined with alpha = 0).
    HintOnly,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alternating" => Ok(TrainMode::Alternating),
            "combined" => Ok(TrainMode::Combined),
            "hint_only" => Ok(TrainMode::HintOnly),
            other => Err(Error::config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskLossKind {
    CrossEntropy,
    /// Paper-literal variant: L1 between softmax output and the one-hot
    /// label.
    L1OneHot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTrainConfig {
    pub alpha: f32,
    pub mode: TrainMode,
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub task_loss: TaskLossKind,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        JointTrainConfig {
            alpha: 1.0,
            mode: TrainMode::Alternating,
            epochs: 20,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            seed: 0,
            task_loss: TaskLossKind::CrossEntropy,
        }
    }
}

impl JointTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::InvalidArg("alpha must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArg("batch size must be >= 1".into()));
        }
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
        .validate()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Plain label training settings (teacher training, fine-tuning, attacks).
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 20,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub hint_loss: f64,
    pub task_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn best_test_acc(&self) -> Option<f64> {
        self.records
            .iter()
            .map(|r| r.test_acc)
            .fold(None, |best, v| match best {
                None => Some(v),
                Some(b) => Some(if v > b { v } else { b }),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,hint_loss,task_loss,train_acc,test_acc,seconds\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                r.epoch, r.hint_loss, r.task_loss, r.train_acc, r.test_acc, r.seconds
            ));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// loss measurement (spec-level operations over whole graphs)
// ---------------------------------------------------------------------------

/// Mean L1 distance between the teacher's tap and the mixed network's
/// simulator tap. The teacher side carries no gradient.
pub fn hint_loss(
    teacher: &ModelGraph,
    student_mixed: &ModelGraph,
    block: &str,
    sim_block: &str,
    x: &Tensor,
) -> Result<f32> {
    let t = teacher.forward_to_block(x, block)?;
    let s = student_mixed.forward_to_block(x, sim_block)?;
    if t.shape() != s.shape() {
        return Err(Error::Interface {
            context: "hint loss".into(),
            expected: format!("teacher tap extent {:?}", t.shape()),
            actual: format!(
                "simulator tap extent {:?} (hint training requires the same dimension of output)",
                s.shape()
            ),
        });
    }
    Ok(loss::l1_loss(&s, &t)?.0)
}

/// Classification loss of the mixed network on `x`.
pub fn task_loss(
    student_mixed: &ModelGraph,
    x: &Tensor,
    labels: &[usize],
    kind: TaskLossKind,
) -> Result<f32> {
    let logits = student_mixed.forward(x, Mode::Infer)?;
    let (l, _) = match kind {
        TaskLossKind::CrossEntropy => loss::softmax_cross_entropy(&logits, labels)?,
        TaskLossKind::L1OneHot => loss::l1_onehot_loss(&logits, labels)?,
    };
    Ok(l)
}

// ---------------------------------------------------------------------------
// simulator training
// ---------------------------------------------------------------------------

pub struct SimTrainSpec<'a> {
    /// Model whose tap provides the hint ground truth (the original frozen
    /// teacher in round 1, the fine-tuned intermediate model in round 2).
    pub hint_model: &'a ModelGraph,
    /// Block of `hint_model` whose exit is the hint target.
    pub hint_block: &'a str,
    /// Current working model the simulator is spliced into.
    pub working: &'a ModelGraph,
    /// Contiguous feature-block span of `working` to replace.
    pub span: (&'a str, &'a str),
    pub plan: &'a SimulatorPlan,
    pub sim_block_name: &'a str,
    /// Initial simulator parameters; `None` uses the plan's seeded
    /// initialization.
    pub init: Option<BTreeMap<String, NodeParams>>,
}

pub struct SimTrainResult {
    /// Mixed network with the trained simulator spliced in, all parameters
    /// unfrozen again.
    pub mixed: ModelGraph,
    pub sim_block: BlockSpec,
    pub sim_params: BTreeMap<String, NodeParams>,
    pub log: TrainLog,
}

fn scaled(mut t: Tensor, a: f32) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= a);
    t
}

fn unfrozen_update(model: &mut ModelGraph, sgd: &mut Sgd) -> Result<()> {
    let frozen = model.frozen().clone();
    for (id, p) in model.params_mut().iter_mut() {
        if frozen.contains(id) {
            continue;
        }
        for (field, t) in p.fields_mut() {
            sgd.update(&format!("{id}#{field}"), t)?;
        }
    }
    Ok(())
}

/// Build the mixed network, freeze everything outside the simulator, and
/// optimize the joint objective. The hint model is never mutated.
pub fn train_simulator(
    spec: SimTrainSpec<'_>,
    data: &Dataset,
    cfg: &JointTrainConfig,
    stage: &str,
) -> Result<SimTrainResult> {
    cfg.validate()?;
    let (first, last) = spec.span;
    let sim_block = spec.plan.build_block(spec.sim_block_name);
    let in_channels = match spec.working.block_input_shape(first)? {
        NodeShape::Image { c, .. } => c,
        NodeShape::Flat { .. } => {
            return Err(Error::Interface {
                context: format!("simulator for {first:?}"),
                expected: "image input".into(),
                actual: "flat input".into(),
            })
        }
    };
    let init = spec.init.unwrap_or_else(|| {
        spec.plan
            .init_params(spec.sim_block_name, in_channels, cfg.seed)
    });
    let mut mixed = spec
        .working
        .replace_block_span(first, last, sim_block.clone(), init)?;
    mixed.freeze_all_except_block(spec.sim_block_name)?;

    // the hint dimension requirement: tap extents must agree
    let hint_shape = spec.hint_model.block_output_shape(spec.hint_block)?;
    let sim_shape = mixed.block_output_shape(spec.sim_block_name)?;
    if hint_shape != sim_shape {
        return Err(Error::Interface {
            context: "hint training".into(),
            expected: format!("tap extent {}", hint_shape.describe()),
            actual: format!(
                "simulator produces {} (teacher and student should have the same dimension of output)",
                sim_shape.describe()
            ),
        });
    }

    let mut sgd = Sgd::new(cfg.sgd())?;
    let mut log = TrainLog::default();
    let sim_sink = mixed.sink_index(spec.sim_block_name)?;
    let last_block = mixed.blocks().len() - 1;
    let mut batch_no: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut hint_sum = 0.0f64;
        let mut hint_n = 0usize;
        let mut task_sum = 0.0f64;
        let mut task_n = 0usize;
        let shuffle_seed = crate::rng::derive(cfg.seed, &format!("shuffle/{stage}"), epoch as u64);
        for batch in batches(&data.train, cfg.batch_size, shuffle_seed, true)? {
            batch_no += 1;
            let step_kind = match cfg.mode {
                TrainMode::HintOnly => StepKind::Hint,
                TrainMode::Combined => StepKind::Combined,
                TrainMode::Alternating => {
                    if batch_no % 2 == 1 {
                        StepKind::Hint
                    } else if cfg.alpha == 0.0 {
                        continue; // alpha-scaled task step degenerates to a no-op
                    } else {
                        StepKind::Task
                    }
                }
            };
            let (h, t) = train_step(
                &mut mixed,
                spec.hint_model,
                spec.hint_block,
                sim_sink,
                last_block,
                &batch.images,
                &batch.labels,
                cfg,
                step_kind,
                &mut sgd,
            )
            .map_err(|e| match e {
                Error::Divergence { .. } => Error::Divergence {
                    stage: stage.to_string(),
                    epoch,
                    batch: batch_no as usize,
                },
                other => other,
            })?;
            if let Some(h) = h {
                hint_sum += h as f64;
                hint_n += 1;
            }
            if let Some(t) = t {
                task_sum += t as f64;
                task_n += 1;
            }
        }
        let train_acc = accuracy_on_split(&mixed, &data.train, cfg.batch_size)?;
        let test_acc = accuracy_on_split(&mixed, &data.test, cfg.batch_size)?;
        log.records.push(EpochRecord {
            epoch,
            hint_loss: if hint_n > 0 { hint_sum / hint_n as f64 } else { f64::NAN },
            task_loss: if task_n > 0 { task_sum / task_n as f64 } else { f64::NAN },
            train_acc,
            test_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    let prefix = format!("{}/", spec.sim_block_name);
    let sim_params: BTreeMap<String, NodeParams> = mixed
        .params()
        .iter()
        .filter(|(id, _)| id.starts_with(&prefix))
        .map(|(id, p)| (id.clone(), p.clone()))
        .collect();
    mixed.unfreeze_all();
    mixed.clear_grads();
    Ok(SimTrainResult {
        mixed,
        sim_block,
        sim_params,
        log,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum StepKind {
    Hint,
    Task,
    Combined,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    mixed: &mut ModelGraph,
    hint_model: &ModelGraph,
    hint_block: &str,
    sim_sink: usize,
    last_block: usize,
    images: &Tensor,
    labels: &[usize],
    cfg: &JointTrainConfig,
    kind: StepKind,
    sgd: &mut Sgd,
) -> Result<(Option<f32>, Option<f32>)> {
    let sim_block_idx = mixed.compiled().nodes[sim_sink].block;
    // combined at alpha = 0 is exactly hint-based training; run the cheaper path
    let kind = if kind == StepKind::Combined && cfg.alpha == 0.0 {
        StepKind::Hint
    } else {
        kind
    };
    let upto = match kind {
        StepKind::Hint => sim_block_idx,
        _ => last_block,
    };
    let run = mixed.run(images, Mode::Train, upto)?;

    let mut hint_val = None;
    let mut task_val = None;
    let mut seeds: Vec<(usize, Tensor)> = Vec::new();

    if matches!(kind, StepKind::Hint | StepKind::Combined) {
        let target = hint_model.forward_to_block(images, hint_block)?;
        let tap = run.outputs[sim_sink].as_ref().expect("sim block executed");
        let (l, d) = loss::l1_loss(tap, &target)?;
        if !l.is_finite() {
            return Err(Error::Divergence {
                stage: String::new(),
                epoch: 0,
                batch: 0,
            });
        }
        hint_val = Some(l);
        seeds.push((sim_sink, d));
    }
    if matches!(kind, StepKind::Task | StepKind::Combined) {
        let logits = run.sink_output(mixed);
        let (l, d) = match cfg.task_loss {
            TaskLossKind::CrossEntropy => loss::softmax_cross_entropy(logits, labels)?,
            TaskLossKind::L1OneHot => loss::l1_onehot_loss(logits, labels)?,
        };
        if !l.is_finite() {
            return Err(Error::Divergence {
                stage: String::new(),
                epoch: 0,
                batch: 0,
            });
        }
        task_val = Some(l);
        let sink = mixed.compiled().block_sink[last_block];
        seeds.push((sink, scaled(d, cfg.alpha)));
    }

    mixed.zero_grads();
    mixed.backward(&run, seeds)?;
    mixed.apply_bn_updates(run);
    unfrozen_update(mixed, sgd)?;
    mixed.zero_grads();
    Ok((hint_val, task_val))
}

// ---------------------------------------------------------------------------
// plain label training (teacher, fine-tune, attacks)
// ---------------------------------------------------------------------------

/// Train on labels with cross-entropy, honoring the model's frozen set, and
/// return the best-test-accuracy checkpoint with the full log. Zero epochs
/// returns the model unchanged.
pub fn train_on_labels(
    model: &ModelGraph,
    data: &Dataset,
    cfg: &FitConfig,
    stage: &str,
) -> Result<(ModelGraph, TrainLog)> {
    let sgd_cfg = SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    if cfg.epochs > 0 {
        sgd_cfg.validate()?;
    }
    let mut model = model.clone();
    let mut sgd = Sgd::new(if cfg.epochs > 0 {
        sgd_cfg
    } else {
        SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    })?;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelGraph)> = None;
    let last_block = model.blocks().len() - 1;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut task_sum = 0.0f64;
        let mut task_n = 0usize;
        let shuffle_seed = crate::rng::derive(cfg.seed, &format!("shuffle/{stage}"), epoch as u64);
        let mut batch_no = 0usize;
        for batch in batches(&data.train, cfg.batch_size, shuffle_seed, true)? {
            batch_no += 1;
            let run = model.run(&batch.images, Mode::Train, last_block)?;
            let (l, d) = loss::softmax_cross_entropy(run.sink_output(&model), &batch.labels)?;
            if !l.is_finite() {
                return Err(Error::Divergence {
                    stage: stage.to_string(),
                    epoch,
                    batch: batch_no,
                });
            }
            task_sum += l as f64;
            task_n += 1;
            let sink = model.compiled().block_sink[last_block];
            model.zero_grads();
            model.backward(&run, vec![(sink, d)])?;
            model.apply_bn_updates(run);
            unfrozen_update(&mut model, &mut sgd)?;
            model.zero_grads();
        }
        let train_acc = accuracy_on_split(&model, &data.train, cfg.batch_size)?;
        let test_acc = accuracy_on_split(&model, &data.test, cfg.batch_size)?;
        log.records.push(EpochRecord {
            epoch,
            hint_loss: f64::NAN,
            task_loss: if task_n > 0 { task_sum / task_n as f64 } else { f64::NAN },
            train_acc,
            test_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().map(|(b, _)| test_acc > *b).unwrap_or(true) {
            let mut snap = model.clone();
            snap.clear_grads();
            best = Some((test_acc, snap));
        }
    }
    let final_model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((final_model, log))
}
