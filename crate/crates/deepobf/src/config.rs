//! Run configuration: flat INI-style text, `[section]` headers, `key =
//! value` lines, `#` comments. Unknown sections and keys are rejected with
//! the offending line number so experiment files stay honest.

use crate::analyzer;
use crate::data::DatasetSpec;
use crate::distill::{FitConfig, JointTrainConfig, TaskLossKind, TrainMode};
use crate::error::{Error, Result};
use crate::eval::AttackKind;
use crate::graph::{ModelGraph, ParamInit};
use crate::pipeline::{GroupPlan, ObfuscationPlan};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default)]
struct RawSection {
    entries: BTreeMap<String, (usize, String)>, // key -> (line, value)
}

impl RawSection {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    fn reject_leftovers(&self, section: &str) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.iter().next() {
            return Err(Error::config_at(
                *line,
                format!("unknown key {key:?} in section [{section}]"),
            ));
        }
        Ok(())
    }
}

fn parse_sections(text: &str) -> Result<BTreeMap<String, RawSection>> {
    let mut sections: BTreeMap<String, RawSection> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find(" #") {
            Some(p) => &raw[..p],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            if sections.contains_key(&name) {
                return Err(Error::config_at(
                    line_no,
                    format!("duplicate section [{name}]"),
                ));
            }
            sections.insert(name.clone(), RawSection::default());
            current = Some(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config_at(
                line_no,
                format!("expected key = value, got {line:?}"),
            ));
        };
        let Some(section) = &current else {
            return Err(Error::config_at(line_no, "entry outside any [section]"));
        };
        let key = key.trim().to_string();
        let section_map = sections.get_mut(section).unwrap();
        if section_map
            .entries
            .insert(key.clone(), (line_no, value.trim().to_string()))
            .is_some()
        {
            return Err(Error::config_at(
                line_no,
                format!("duplicate key {key:?} in section [{section}]"),
            ));
        }
    }
    Ok(sections)
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| {
        Error::config(format!("[{section}] {key} = {v:?} is not a valid number"))
    })
}

// ---------------------------------------------------------------------------
// typed sections
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ModelSection {
    Preset { name: String, classes: usize },
    GraphFile(PathBuf),
}

#[derive(Debug, Clone)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let f = FitConfig::default();
        TrainSection {
            epochs: f.epochs,
            lr: f.lr,
            momentum: f.momentum,
            weight_decay: f.weight_decay,
            batch_size: f.batch_size,
        }
    }
}

impl TrainSection {
    pub fn fit_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObfuscateSection {
    pub groups: Vec<Vec<String>>,
    pub round1_depths: Vec<usize>,
    pub round2_depth: usize,
    pub round2_channels: Option<Vec<usize>>,
    pub alpha: f32,
    pub mode: TrainMode,
    pub task_loss: TaskLossKind,
    pub sim_epochs: usize,
    pub finetune_epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub dataset: DatasetSpec,
    pub new_classes: usize,
    pub train: TrainSection,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: Option<ModelSection>,
    pub dataset: Option<DatasetSpec>,
    pub train: TrainSection,
    pub obfuscate: Option<ObfuscateSection>,
    pub attack: Option<AttackSection>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut sections = parse_sections(text)?;
        let known = [
            "model",
            "dataset",
            "train",
            "obfuscate",
            "attack",
            "output",
        ];
        if let Some(name) = sections.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::config(format!("unknown section [{name}]")));
        }

        let model = match sections.remove("model") {
            Some(mut s) => {
                let preset = s.take("preset");
                let graph = s.take("graph");
                let classes = match s.take("classes") {
                    Some(v) => parse_num("model", "classes", &v)?,
                    None => 4usize,
                };
                s.reject_leftovers("model")?;
                match (preset, graph) {
                    (Some(p), None) => Some(ModelSection::Preset { name: p, classes }),
                    (None, Some(g)) => Some(ModelSection::GraphFile(PathBuf::from(g))),
                    (None, None) => None,
                    (Some(_), Some(_)) => {
                        return Err(Error::config(
                            "[model] cannot set both preset and graph".to_string(),
                        ))
                    }
                }
            }
            None => None,
        };

        let dataset = match sections.remove("dataset") {
            Some(mut s) => {
                let spec = s
                    .take("spec")
                    .ok_or_else(|| Error::config("[dataset] needs spec ="))?;
                s.reject_leftovers("dataset")?;
                Some(DatasetSpec::parse(&spec)?)
            }
            None => None,
        };

        let train = match sections.remove("train") {
            Some(mut s) => {
                let mut t = TrainSection::default();
                if let Some(v) = s.take("epochs") {
                    t.epochs = parse_num("train", "epochs", &v)?;
                }
                if let Some(v) = s.take("lr") {
                    t.lr = parse_num("train", "lr", &v)?;
                }
                if let Some(v) = s.take("momentum") {
                    t.momentum = parse_num("train", "momentum", &v)?;
                }
                if let Some(v) = s.take("weight_decay") {
                    t.weight_decay = parse_num("train", "weight_decay", &v)?;
                }
                if let Some(v) = s.take("batch_size") {
                    t.batch_size = parse_num("train", "batch_size", &v)?;
                }
                s.reject_leftovers("train")?;
                t
            }
            None => TrainSection::default(),
        };

        let obfuscate = match sections.remove("obfuscate") {
            Some(mut s) => {
                let groups_raw = s
                    .take("groups")
                    .ok_or_else(|| Error::config("[obfuscate] needs groups ="))?;
                let groups: Vec<Vec<String>> = groups_raw
                    .split('|')
                    .map(|g| {
                        g.split(',')
                            .map(|b| b.trim().to_string())
                            .filter(|b| !b.is_empty())
                            .collect::<Vec<_>>()
                    })
                    .collect();
                if groups.iter().any(|g| g.is_empty()) {
                    return Err(Error::config("[obfuscate] groups has an empty group"));
                }
                let round1_depths = match s.take("round1_depths") {
                    Some(v) => {
                        let ds: Result<Vec<usize>> = v
                            .split(',')
                            .map(|d| parse_num("obfuscate", "round1_depths", d.trim()))
                            .collect();
                        let ds = ds?;
                        if ds.len() != groups.len() {
                            return Err(Error::config(format!(
                                "[obfuscate] round1_depths has {} entries for {} groups",
                                ds.len(),
                                groups.len()
                            )));
                        }
                        ds
                    }
                    None => vec![2; groups.len()],
                };
                let round2_depth = match s.take("round2_depth") {
                    Some(v) => parse_num("obfuscate", "round2_depth", &v)?,
                    None => 3,
                };
                let round2_channels = match s.take("round2_channels") {
                    Some(v) => Some(
                        v.split(',')
                            .map(|c| parse_num("obfuscate", "round2_channels", c.trim()))
                            .collect::<Result<Vec<usize>>>()?,
                    ),
                    None => None,
                };
                let alpha = match s.take("alpha") {
                    Some(v) => parse_num("obfuscate", "alpha", &v)?,
                    None => 1.0,
                };
                let mode = match s.take("mode") {
                    Some(v) => TrainMode::parse(&v)?,
                    None => TrainMode::Alternating,
                };
                let task_loss = match s.take("task_loss").as_deref() {
                    None | Some("cross_entropy") => TaskLossKind::CrossEntropy,
                    Some("l1_onehot") => TaskLossKind::L1OneHot,
                    Some(other) => {
                        return Err(Error::config(format!("unknown task_loss {other:?}")))
                    }
                };
                let defaults = JointTrainConfig::default();
                let sim_epochs = match s.take("sim_epochs") {
                    Some(v) => parse_num("obfuscate", "sim_epochs", &v)?,
                    None => defaults.epochs,
                };
                let finetune_epochs = match s.take("finetune_epochs") {
                    Some(v) => parse_num("obfuscate", "finetune_epochs", &v)?,
                    None => 10,
                };
                let lr = match s.take("lr") {
                    Some(v) => parse_num("obfuscate", "lr", &v)?,
                    None => defaults.lr,
                };
                let momentum = match s.take("momentum") {
                    Some(v) => parse_num("obfuscate", "momentum", &v)?,
                    None => defaults.momentum,
                };
                let weight_decay = match s.take("weight_decay") {
                    Some(v) => parse_num("obfuscate", "weight_decay", &v)?,
                    None => defaults.weight_decay,
                };
                let batch_size = match s.take("batch_size") {
                    Some(v) => parse_num("obfuscate", "batch_size", &v)?,
                    None => defaults.batch_size,
                };
                s.reject_leftovers("obfuscate")?;
                Some(ObfuscateSection {
                    groups,
                    round1_depths,
                    round2_depth,
                    round2_channels,
                    alpha,
                    mode,
                    task_loss,
                    sim_epochs,
                    finetune_epochs,
                    lr,
                    momentum,
                    weight_decay,
                    batch_size,
                })
            }
            None => None,
        };

        let attack = match sections.remove("attack") {
            Some(mut s) => {
                let kind = AttackKind::parse(
                    &s.take("kind")
                        .ok_or_else(|| Error::config("[attack] needs kind ="))?,
                )?;
                let dataset = DatasetSpec::parse(
                    &s.take("dataset")
                        .ok_or_else(|| Error::config("[attack] needs dataset ="))?,
                )?;
                let new_classes = match s.take("new_classes") {
                    Some(v) => parse_num("attack", "new_classes", &v)?,
                    None => 0,
                };
                let mut t = TrainSection::default();
                t.epochs = 10;
                if let Some(v) = s.take("epochs") {
                    t.epochs = parse_num("attack", "epochs", &v)?;
                }
                if let Some(v) = s.take("lr") {
                    t.lr = parse_num("attack", "lr", &v)?;
                }
                if let Some(v) = s.take("momentum") {
                    t.momentum = parse_num("attack", "momentum", &v)?;
                }
                if let Some(v) = s.take("weight_decay") {
                    t.weight_decay = parse_num("attack", "weight_decay", &v)?;
                }
                if let Some(v) = s.take("batch_size") {
                    t.batch_size = parse_num("attack", "batch_size", &v)?;
                }
                s.reject_leftovers("attack")?;
                Some(AttackSection {
                    kind,
                    dataset,
                    new_classes,
                    train: t,
                })
            }
            None => None,
        };

        let (out_dir, seed) = match sections.remove("output") {
            Some(mut s) => {
                let dir = s.take("dir").map(PathBuf::from).unwrap_or_else(|| "out".into());
                let seed = match s.take("seed") {
                    Some(v) => parse_num("output", "seed", &v)?,
                    None => 0,
                };
                s.reject_leftovers("output")?;
                (dir, seed)
            }
            None => (PathBuf::from("out"), 0),
        };

        Ok(RunConfig {
            model,
            dataset,
            train,
            obfuscate,
            attack,
            out_dir,
            seed,
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    /// Build the configured teacher model (fresh parameters from the global
    /// seed).
    pub fn build_model(&self, seed: u64) -> Result<ModelGraph> {
        match &self.model {
            Some(ModelSection::Preset { name, classes }) => match name.as_str() {
                "toy_inception" => crate::data::toy_inception_teacher(*classes, seed),
                other => Err(Error::config(format!("unknown model preset {other:?}"))),
            },
            Some(ModelSection::GraphFile(path)) => {
                let text = std::fs::read_to_string(path)?;
                let (meta, blocks) = crate::graph::parse_structure(&text)?;
                ModelGraph::build(meta, blocks, ParamInit::Seed(seed))
            }
            None => Err(Error::config("config has no [model] section")),
        }
    }

    /// Assemble the obfuscation plan against a concrete teacher.
    pub fn build_plan(&self, teacher: &ModelGraph, seed: u64) -> Result<ObfuscationPlan> {
        let Some(ob) = &self.obfuscate else {
            return Err(Error::config("config has no [obfuscate] section"));
        };
        let mut round1 = Vec::new();
        for (gi, group) in ob.groups.iter().enumerate() {
            let first = group.first().unwrap().clone();
            let last = group.last().unwrap().clone();
            let plan = analyzer::plan_simulator_span(
                teacher,
                &first,
                &last,
                Some(ob.round1_depths[gi]),
                None,
            )?;
            round1.push(GroupPlan { first, last, plan });
        }
        let feature_names: Vec<String> = teacher
            .feature_blocks()
            .map(|b| b.name.clone())
            .collect();
        let (ex_first, ex_last) = match (feature_names.first(), feature_names.last()) {
            (Some(f), Some(l)) => (f.clone(), l.clone()),
            _ => return Err(Error::Graph("teacher has no feature extractor".into())),
        };
        let round2 = analyzer::plan_simulator_span(
            teacher,
            &ex_first,
            &ex_last,
            Some(ob.round2_depth),
            ob.round2_channels.as_deref(),
        )?;
        let joint = JointTrainConfig {
            alpha: ob.alpha,
            mode: ob.mode,
            epochs: ob.sim_epochs,
            lr: ob.lr,
            momentum: ob.momentum,
            weight_decay: ob.weight_decay,
            batch_size: ob.batch_size,
            seed, // re-derived per stage by the pipeline
            task_loss: ob.task_loss,
        };
        let finetune = FitConfig {
            epochs: ob.finetune_epochs,
            lr: ob.lr,
            momentum: ob.momentum,
            weight_decay: ob.weight_decay,
            batch_size: ob.batch_size,
            seed,
        };
        Ok(ObfuscationPlan {
            round1,
            round1_train: joint.clone(),
            finetune,
            round2,
            round2_train: joint,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "\
# toy experiment
[model]
preset = toy_inception
classes = 4

[dataset]
spec = synth:4:3x16x16:20:10:7

[train]
epochs = 2
lr = 0.05

[output]
dir = out
seed = 7
";

    #[test]
    fn parses_minimal_config() {
        let cfg = RunConfig::parse(TOY).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 2);
        assert!(matches!(cfg.model, Some(ModelSection::Preset { .. })));
    }

    #[test]
    fn rejects_unknown_key_with_line() {
        let text = format!("{TOY}\n[train2]\nx = 1\n");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("unknown section"), "{err}");

        let text = TOY.replace("epochs = 2", "epochz = 2");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("unknown key") && err.contains("line"), "{err}");
    }

    #[test]
    fn rejects_duplicate_keys() {
        let text = format!("{TOY}\n[obfuscate]\ngroups = b1\ngroups = b2\n");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn obfuscate_section_round_trips_groups() {
        let text = format!(
            "{TOY}\n[obfuscate]\ngroups = b1 | b2 | b3\nround1_depths = 2, 2, 2\nround2_depth = 3\nround2_channels = 10, 16, 64\n"
        );
        let cfg = RunConfig::parse(&text).unwrap();
        let ob = cfg.obfuscate.unwrap();
        assert_eq!(ob.groups.len(), 3);
        assert_eq!(ob.round2_channels, Some(vec![10, 16, 64]));
    }
}
