//! Model file format. A file is: magic "DOBF", a u32 format version, a
//! human-readable structure section, a binary parameter blob (per array: id,
//! extent list, little-endian f32 data), and a trailing CRC32 of all
//! preceding bytes. The structure section alone describes the graph, so a
//! released model's exposed information can be audited by reading the file.

use super::{
    BlockRole, BlockSpec, LayerKind, LayerSpec, ModelGraph, ModelMeta, NodeParams, ParamInit,
};
use crate::error::{Error, ModelFileError, Result};
use crate::ops::{BatchNormParams, ConvParams, LinearParams};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DOBF";

// ---------------------------------------------------------------------------
// structure text
// ---------------------------------------------------------------------------

/// Render the model's structure section.
pub fn structure_text(graph: &ModelGraph) -> String {
    let mut s = String::new();
    let (c, h, w) = graph.meta().input;
    writeln!(s, "deepobf v{FORMAT_VERSION}").unwrap();
    writeln!(s, "input {c}x{h}x{w}").unwrap();
    writeln!(s, "classes {}", graph.meta().classes).unwrap();
    for block in graph.blocks() {
        let role = match block.role {
            BlockRole::Feature => "feature",
            BlockRole::Classifier => "classifier",
        };
        writeln!(s, "block {} {role}", block.name).unwrap();
        for node in &block.nodes {
            let mut line = format!("  node {} {} in={}", node.name, node.kind.keyword(),
                node.inputs.join(","));
            match &node.kind {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    write!(line, " out={out_channels} k={kernel} s={stride} p={padding}").unwrap()
                }
                LayerKind::BatchNorm { eps, momentum } => {
                    write!(line, " eps={eps} momentum={momentum}").unwrap()
                }
                LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                    write!(line, " k={kernel} s={stride}").unwrap()
                }
                LayerKind::Linear { out_features } => write!(line, " out={out_features}").unwrap(),
                LayerKind::Relu
                | LayerKind::GlobalAvgPool
                | LayerKind::Flatten
                | LayerKind::Concat
                | LayerKind::Add => {}
            }
            writeln!(s, "{line}").unwrap();
        }
    }
    s.push_str("end\n");
    s
}

fn bad(section: &'static str, msg: impl Into<String>) -> Error {
    Error::ModelFile(ModelFileError::Malformed {
        section,
        msg: msg.into(),
    })
}

fn parse_extent3(s: &str) -> Option<(usize, usize, usize)> {
    let mut it = s.split('x');
    let a = it.next()?.parse().ok()?;
    let b = it.next()?.parse().ok()?;
    let c = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some((a, b, c))
}

/// Parse a structure section into metadata and block specs. The same grammar
/// serves standalone architecture files.
pub fn parse_structure(text: &str) -> Result<(ModelMeta, Vec<BlockSpec>)> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let sect = "structure";

    let header = lines.next().ok_or_else(|| bad(sect, "empty structure"))?;
    if header.1 != format!("deepobf v{FORMAT_VERSION}") {
        return Err(bad(sect, format!("unexpected header {:?}", header.1)));
    }

    let mut input = None;
    let mut classes = None;
    let mut blocks: Vec<BlockSpec> = Vec::new();
    let mut saw_end = false;

    for (ln, line) in lines {
        let ln = ln + 1; // 1-based for messages
        let mut words = line.split_whitespace();
        let keyword = words.next().unwrap();
        match keyword {
            "input" => {
                let v = words
                    .next()
                    .and_then(parse_extent3)
                    .ok_or_else(|| bad(sect, format!("line {ln}: bad input extent")))?;
                input = Some(v);
            }
            "classes" => {
                let v = words
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(sect, format!("line {ln}: bad class count")))?;
                classes = Some(v);
            }
            "block" => {
                let name = words
                    .next()
                    .ok_or_else(|| bad(sect, format!("line {ln}: block needs a name")))?;
                let role = match words.next() {
                    Some("feature") => BlockRole::Feature,
                    Some("classifier") => BlockRole::Classifier,
                    other => {
                        return Err(bad(sect, format!("line {ln}: bad block role {other:?}")))
                    }
                };
                blocks.push(BlockSpec {
                    name: name.to_string(),
                    role,
                    nodes: Vec::new(),
                });
            }
            "node" => {
                let block = blocks
                    .last_mut()
                    .ok_or_else(|| bad(sect, format!("line {ln}: node outside a block")))?;
                let name = words
                    .next()
                    .ok_or_else(|| bad(sect, format!("line {ln}: node needs a name")))?;
                let kind_word = words
                    .next()
                    .ok_or_else(|| bad(sect, format!("line {ln}: node needs a kind")))?;
                let mut attrs: BTreeMap<&str, &str> = BTreeMap::new();
                for w in words {
                    let (k, v) = w
                        .split_once('=')
                        .ok_or_else(|| bad(sect, format!("line {ln}: bad attribute {w:?}")))?;
                    if attrs.insert(k, v).is_some() {
                        return Err(bad(sect, format!("line {ln}: duplicate attribute {k:?}")));
                    }
                }
                let inputs: Vec<String> = attrs
                    .remove("in")
                    .ok_or_else(|| bad(sect, format!("line {ln}: node needs in=")))?
                    .split(',')
                    .map(str::to_string)
                    .collect();
                let mut take_usize = |key: &str| -> Result<usize> {
                    attrs
                        .remove(key)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad(sect, format!("line {ln}: missing/bad {key}=")))
                };
                let kind = match kind_word {
                    "conv" => LayerKind::Conv {
                        out_channels: take_usize("out")?,
                        kernel: take_usize("k")?,
                        stride: take_usize("s")?,
                        padding: take_usize("p")?,
                    },
                    "batchnorm" => {
                        let eps = attrs
                            .remove("eps")
                            .map(|v| v.parse::<f32>())
                            .transpose()
                            .map_err(|_| bad(sect, format!("line {ln}: bad eps=")))?
                            .unwrap_or(1e-5);
                        let momentum = attrs
                            .remove("momentum")
                            .map(|v| v.parse::<f32>())
                            .transpose()
                            .map_err(|_| bad(sect, format!("line {ln}: bad momentum=")))?
                            .unwrap_or(0.1);
                        LayerKind::BatchNorm { eps, momentum }
                    }
                    "relu" => LayerKind::Relu,
                    "maxpool" => LayerKind::MaxPool {
                        kernel: take_usize("k")?,
                        stride: take_usize("s")?,
                    },
                    "avgpool" => LayerKind::AvgPool {
                        kernel: take_usize("k")?,
                        stride: take_usize("s")?,
                    },
                    "global_avgpool" => LayerKind::GlobalAvgPool,
                    "flatten" => LayerKind::Flatten,
                    "linear" => LayerKind::Linear {
                        out_features: take_usize("out")?,
                    },
                    "concat" => LayerKind::Concat,
                    "add" => LayerKind::Add,
                    other => {
                        return Err(bad(sect, format!("line {ln}: unknown layer kind {other:?}")))
                    }
                };
                if let Some(k) = attrs.keys().next() {
                    return Err(bad(sect, format!("line {ln}: unknown attribute {k:?}")));
                }
                block.nodes.push(LayerSpec {
                    name: name.to_string(),
                    kind,
                    inputs,
                });
            }
            "end" => {
                saw_end = true;
                break;
            }
            other => return Err(bad(sect, format!("line {ln}: unknown keyword {other:?}"))),
        }
    }
    if !saw_end {
        return Err(bad(sect, "missing end marker"));
    }
    let input = input.ok_or_else(|| bad(sect, "missing input extent"))?;
    let classes = classes.ok_or_else(|| bad(sect, "missing class count"))?;
    Ok((ModelMeta { input, classes }, blocks))
}

// ---------------------------------------------------------------------------
// binary encoding
// ---------------------------------------------------------------------------

fn push_tensor(out: &mut Vec<u8>, id: &str, t: &Tensor) {
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize to the full file byte layout (including trailing checksum).
pub fn serialize(graph: &ModelGraph) -> Vec<u8> {
    let structure = structure_text(graph);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(structure.len() as u64).to_le_bytes());
    out.extend_from_slice(structure.as_bytes());

    // entries in block/node declaration order, fields in fixed order
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for block in graph.blocks() {
        for node in &block.nodes {
            let id = super::node_id(&block.name, &node.name);
            if let Some(p) = graph.params().get(&id) {
                for (field, t) in p.fields() {
                    entries.push((format!("{id}#{field}"), t));
                }
            }
        }
    }
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (id, t) in entries {
        push_tensor(&mut out, &id, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::ModelFile(ModelFileError::Truncated {
                offset: self.pos,
                needed: self.pos + n - self.bytes.len(),
            }));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::ModelFile(ModelFileError::BadMagic(
            magic.try_into().unwrap(),
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelFile(ModelFileError::Version {
            found: version,
            supported: FORMAT_VERSION,
        }));
    }
    let structure_len = r.u64()? as usize;
    let structure = std::str::from_utf8(r.take(structure_len)?)
        .map_err(|e| bad("structure", format!("not UTF-8: {e}")))?
        .to_string();

    let entry_count = r.u64()? as usize;
    let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..entry_count {
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| bad("parameters", format!("entry id not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(bad("parameters", format!("entry {id:?}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if arrays.insert(id.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(bad("parameters", format!("duplicate entry {id:?}")));
        }
    }

    // trailing CRC32 over everything before it
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(bad(
            "trailer",
            format!("{} trailing bytes after checksum", bytes.len() - r.pos),
        ));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::ModelFile(ModelFileError::Checksum {
            stored,
            computed,
        }));
    }

    let (meta, blocks) = parse_structure(&structure)?;
    let params = assemble_params(&blocks, arrays)?;
    ModelGraph::build(meta, blocks, ParamInit::Provided(params))
}

fn assemble_params(
    blocks: &[BlockSpec],
    mut arrays: BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, NodeParams>> {
    let mut params = BTreeMap::new();
    for block in blocks {
        for node in &block.nodes {
            let id = super::node_id(&block.name, &node.name);
            let mut take = |field: &str| -> Result<Tensor> {
                arrays
                    .remove(&format!("{id}#{field}"))
                    .ok_or_else(|| bad("parameters", format!("missing array {id}#{field}")))
            };
            let p = match &node.kind {
                LayerKind::Conv {
                    stride, padding, ..
                } => NodeParams::Conv(ConvParams {
                    weight: take("w")?,
                    bias: take("b")?,
                    stride: *stride,
                    padding: *padding,
                }),
                LayerKind::BatchNorm { eps, momentum } => NodeParams::BatchNorm(BatchNormParams {
                    gamma: take("g")?,
                    beta: take("beta")?,
                    running_mean: take("rm")?,
                    running_var: take("rv")?,
                    eps: *eps,
                    momentum: *momentum,
                }),
                LayerKind::Linear { .. } => NodeParams::Linear(LinearParams {
                    weight: take("w")?,
                    bias: take("b")?,
                }),
                _ => continue,
            };
            params.insert(id, p);
        }
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(bad(
            "parameters",
            format!("array {extra:?} does not match any structure node"),
        ));
    }
    Ok(params)
}

pub fn save(graph: &ModelGraph, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, serialize(graph))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelGraph> {
    let bytes = std::fs::read(path)?;
    deserialize(&bytes)
}
