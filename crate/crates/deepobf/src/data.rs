//! Deterministic synthetic image classification data for hermetic tests,
//! plus a bit-exact loader for CIFAR-10-style binary files (3073-byte
//! records: one label byte, then 3072 channel-planar pixel bytes).
//!
//! Synthetic images are Gaussian blobs at class-specific grid positions plus
//! a class-specific sinusoidal texture plus seeded noise; every pixel is
//! fully determined by (spec, split, class, index). The shift parameter
//! translates blob centers to create transfer-attack target domains with the
//! same class semantics but different marginals.

use crate::error::{Error, Result};
use crate::graph::{BlockRole, BlockSpec, LayerKind, LayerSpec, ModelGraph, ModelMeta, ParamInit};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use std::path::{Path, PathBuf};

pub const NOISE_SIGMA_DEFAULT: f32 = 0.1;

/// Blob positions live on this fixed grid so that class k keeps its position
/// regardless of how many classes a spec asks for (the incremental-attack
/// superset must agree with the base set on shared classes).
const GRID: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub shift: (i32, i32),
    pub noise_sigma: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    CifarBinary { train: PathBuf, test: PathBuf },
}

impl DatasetSpec {
    /// Parse the addressable form:
    /// `synth:<classes>:<c>x<h>x<w>:<n_train>:<n_test>:<seed>[:shift=<dx,dy>]`
    /// or `cifar:<train_path>:<test_path>`.
    pub fn parse(s: &str) -> Result<DatasetSpec> {
        let err = |msg: &str| Error::Data(format!("bad dataset spec {s:?}: {msg}"));
        let mut parts = s.split(':');
        match parts.next() {
            Some("synth") => {
                let classes = parts
                    .next()
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| err("missing class count"))?;
                let extent = parts.next().ok_or_else(|| err("missing extent"))?;
                let mut dims = extent.split('x');
                let (c, h, w) = (
                    dims.next().and_then(|v| v.parse().ok()),
                    dims.next().and_then(|v| v.parse().ok()),
                    dims.next().and_then(|v| v.parse().ok()),
                );
                let (Some(channels), Some(height), Some(width)) = (c, h, w) else {
                    return Err(err("extent must be CxHxW"));
                };
                let n_train = parts
                    .next()
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| err("missing train count"))?;
                let n_test = parts
                    .next()
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| err("missing test count"))?;
                let seed = parts
                    .next()
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| err("missing seed"))?;
                let mut shift = (0, 0);
                for extra in parts {
                    if let Some(v) = extra.strip_prefix("shift=") {
                        let (dx, dy) = v.split_once(',').ok_or_else(|| err("shift=<dx,dy>"))?;
                        shift = (
                            dx.parse().map_err(|_| err("bad shift dx"))?,
                            dy.parse().map_err(|_| err("bad shift dy"))?,
                        );
                    } else {
                        return Err(err(&format!("unknown field {extra:?}")));
                    }
                }
                Ok(DatasetSpec::Synthetic(SyntheticSpec {
                    classes,
                    channels,
                    height,
                    width,
                    n_train,
                    n_test,
                    seed,
                    shift,
                    noise_sigma: NOISE_SIGMA_DEFAULT,
                }))
            }
            Some("cifar") => {
                let train = parts.next().ok_or_else(|| err("missing train path"))?;
                let test = parts.next().ok_or_else(|| err("missing test path"))?;
                Ok(DatasetSpec::CifarBinary {
                    train: PathBuf::from(train),
                    test: PathBuf::from(test),
                })
            }
            _ => Err(err("must start with synth: or cifar:")),
        }
    }

    pub fn to_spec_string(&self) -> String {
        match self {
            DatasetSpec::Synthetic(s) => {
                let mut out = format!(
                    "synth:{}:{}x{}x{}:{}:{}:{}",
                    s.classes, s.channels, s.height, s.width, s.n_train, s.n_test, s.seed
                );
                if s.shift != (0, 0) {
                    out.push_str(&format!(":shift={},{}", s.shift.0, s.shift.1));
                }
                out
            }
            DatasetSpec::CifarBinary { train, test } => {
                format!("cifar:{}:{}", train.display(), test.display())
            }
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(s) => synth_generate(s),
            DatasetSpec::CifarBinary { train, test } => {
                let train = load_cifar_path(train)?;
                let test = load_cifar_path(test)?;
                Ok(Dataset {
                    classes: 10,
                    shape: (3, 32, 32),
                    train,
                    test,
                    spec_string: self.to_spec_string(),
                })
            }
        }
    }
}

/// One split: images stored contiguously as `[n, c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub shape: (usize, usize, usize),
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let (c, h, w) = self.shape;
        let n = c * h * w;
        &self.images[i * n..(i + 1) * n]
    }

    /// All images as one `[n, c, h, w]` tensor.
    pub fn as_tensor(&self) -> Tensor {
        let (c, h, w) = self.shape;
        Tensor::new(vec![self.len(), c, h, w], self.images.clone()).expect("consistent split")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub shape: (usize, usize, usize),
    pub train: Split,
    pub test: Split,
    pub spec_string: String,
}

#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

fn class_center(spec: &SyntheticSpec, class: usize) -> (f32, f32) {
    let gi = class / GRID;
    let gj = class % GRID;
    let cy = spec.height as f32 * (gi + 1) as f32 / (GRID + 1) as f32;
    let cx = spec.width as f32 * (gj + 1) as f32 / (GRID + 1) as f32;
    (cy + spec.shift.1 as f32, cx + spec.shift.0 as f32)
}

fn gaussian(rng: &mut impl Rng) -> f32 {
    // Box-Muller
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

fn render_image(spec: &SyntheticSpec, class: usize, rng: &mut impl Rng, out: &mut [f32]) {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let (cy, cx) = class_center(spec, class);
    // per-sample jitter keeps the task from collapsing to template matching
    let jy: f32 = rng.gen_range(-1.0..=1.0);
    let jx: f32 = rng.gen_range(-1.0..=1.0);
    let (cy, cx) = (cy + jy, cx + jx);
    let sigma_b = spec.height.min(spec.width) as f32 / 8.0;
    let inv_2s2 = 1.0 / (2.0 * sigma_b * sigma_b);
    let golden = 2.399_963_2_f32;
    let freq = 1.0 + (class % 3) as f32;
    let orient = class as f32 * golden;
    let (sin_o, cos_o) = orient.sin_cos();
    let phase0 = class as f32 * 1.7;
    let scale = std::f32::consts::TAU * freq / spec.height.min(spec.width) as f32;

    for ci in 0..c {
        let phase = phase0 + ci as f32 * std::f32::consts::FRAC_PI_3;
        for yi in 0..h {
            for xi in 0..w {
                let dy = yi as f32 - cy;
                let dx = xi as f32 - cx;
                let blob = 0.85 * (-(dy * dy + dx * dx) * inv_2s2).exp();
                let tex =
                    0.15 * ((yi as f32 * cos_o + xi as f32 * sin_o) * scale + phase).sin() + 0.15;
                let noise = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * gaussian(rng)
                } else {
                    0.0
                };
                out[(ci * h + yi) * w + xi] = (blob + tex + noise).clamp(0.0, 1.0);
            }
        }
    }
}

fn synth_split(spec: &SyntheticSpec, split_name: &str, per_class: usize) -> Split {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let img_len = c * h * w;
    let n = spec.classes * per_class;
    let mut images = vec![0.0f32; n * img_len];
    let mut labels = vec![0usize; n];
    let domain = format!("synth/{split_name}");
    for class in 0..spec.classes {
        for i in 0..per_class {
            let sample = class * per_class + i;
            let mut rng = rng::stream(spec.seed, &domain, ((class as u64) << 32) | i as u64);
            render_image(
                spec,
                class,
                &mut rng,
                &mut images[sample * img_len..(sample + 1) * img_len],
            );
            labels[sample] = class;
        }
    }
    Split {
        shape: (c, h, w),
        images,
        labels,
    }
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.channels != 1 && spec.channels != 3 {
        return Err(Error::Data(format!(
            "synthetic channels must be 1 or 3, got {}",
            spec.channels
        )));
    }
    if spec.classes == 0 || spec.classes > GRID * GRID {
        return Err(Error::Data(format!(
            "classes {} exceeds the {} representable blob positions",
            spec.classes,
            GRID * GRID
        )));
    }
    let spacing = spec.height.min(spec.width) as f32 / (GRID + 1) as f32;
    if spacing < 2.0 {
        return Err(Error::Data(format!(
            "image extent {}x{} too small to separate blob positions",
            spec.height, spec.width
        )));
    }
    Ok(Dataset {
        classes: spec.classes,
        shape: (spec.channels, spec.height, spec.width),
        train: synth_split(spec, "train", spec.n_train),
        test: synth_split(spec, "test", spec.n_test),
        spec_string: DatasetSpec::Synthetic(spec.clone()).to_spec_string(),
    })
}

// ---------------------------------------------------------------------------
// CIFAR binary loader
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Parse one CIFAR binary file: each 3073-byte record is a label byte
/// followed by 3072 pixel bytes (R plane, G plane, B plane; each 32x32
/// row-major). Pixels are scaled to [0,1] by /255.
pub fn load_cifar_binary(bytes: &[u8]) -> Result<Split> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = (bytes.len() / CIFAR_RECORD) * CIFAR_RECORD;
        return Err(Error::Data(format!(
            "cifar file length {} is not a multiple of {CIFAR_RECORD}: partial record at offset {offset}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = vec![0.0f32; n * CIFAR_PIXELS];
    let mut labels = vec![0usize; n];
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(Error::Data(format!(
                "cifar record {i}: label byte {label} > 9"
            )));
        }
        labels[i] = label as usize;
        for (j, &px) in record[1..].iter().enumerate() {
            images[i * CIFAR_PIXELS + j] = px as f32 / 255.0;
        }
    }
    Ok(Split {
        shape: (3, 32, 32),
        images,
        labels,
    })
}

fn load_cifar_path(path: &Path) -> Result<Split> {
    let mut files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|x| x == "bin").unwrap_or(false))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no .bin files under {}",
            path.display()
        )));
    }
    let mut merged: Option<Split> = None;
    for f in files.drain(..) {
        let split = load_cifar_binary(&std::fs::read(&f)?)?;
        merged = Some(match merged {
            None => split,
            Some(mut acc) => {
                acc.images.extend_from_slice(&split.images);
                acc.labels.extend_from_slice(&split.labels);
                acc
            }
        });
    }
    Ok(merged.unwrap())
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

/// Iterator over seeded-shuffled batches. The last partial batch is emitted.
pub struct Batches<'a> {
    split: &'a Split,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(split: &Split, batch_size: usize, seed: u64, shuffle: bool) -> Result<Batches<'_>> {
    if batch_size < 1 {
        return Err(Error::Data("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    if shuffle {
        let mut rng = rng::stream(seed, "batches", 0);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    Ok(Batches {
        split,
        order,
        batch_size,
        pos: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idxs = &self.order[self.pos..end];
        self.pos = end;
        let (c, h, w) = self.split.shape;
        let img_len = c * h * w;
        let mut data = Vec::with_capacity(idxs.len() * img_len);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            data.extend_from_slice(self.split.image(i));
            labels.push(self.split.labels[i]);
        }
        Some(ImageBatch {
            images: Tensor::new(vec![idxs.len(), c, h, w], data).expect("consistent extents"),
            labels,
        })
    }
}

// ---------------------------------------------------------------------------
// reference toy teacher
// ---------------------------------------------------------------------------

/// The reference mini-inception teacher used by the pinned-seed experiments:
/// 3x16x16 input, three two-branch blocks (1x1 conv and 3x3 conv,
/// concatenated, then BN+ReLU) widening 3 -> 16 -> 32 -> 64, a 2x2 max-pool
/// between blocks 2 and 3, then global average pooling and a linear
/// classifier over 4 classes.
pub fn toy_inception_blocks(classes: usize) -> (ModelMeta, Vec<BlockSpec>) {
    let inception = |name: &str, out: usize| -> BlockSpec {
        let half = out / 2;
        BlockSpec {
            name: name.to_string(),
            role: BlockRole::Feature,
            nodes: vec![
                LayerSpec {
                    name: "br1".into(),
                    kind: LayerKind::Conv {
                        out_channels: half,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                    },
                    inputs: vec!["@in".into()],
                },
                LayerSpec {
                    name: "br3".into(),
                    kind: LayerKind::Conv {
                        out_channels: out - half,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                    inputs: vec!["@in".into()],
                },
                LayerSpec {
                    name: "cat".into(),
                    kind: LayerKind::Concat,
                    inputs: vec!["br1".into(), "br3".into()],
                },
                LayerSpec {
                    name: "bn".into(),
                    kind: LayerKind::BatchNorm {
                        eps: 1e-5,
                        momentum: 0.1,
                    },
                    inputs: vec!["cat".into()],
                },
                LayerSpec {
                    name: "act".into(),
                    kind: LayerKind::Relu,
                    inputs: vec!["bn".into()],
                },
            ],
        }
    };
    let pool = BlockSpec {
        name: "pool2".into(),
        role: BlockRole::Feature,
        nodes: vec![LayerSpec {
            name: "mp".into(),
            kind: LayerKind::MaxPool {
                kernel: 2,
                stride: 2,
            },
            inputs: vec!["@in".into()],
        }],
    };
    let head = BlockSpec {
        name: "head".into(),
        role: BlockRole::Classifier,
        nodes: vec![
            LayerSpec {
                name: "gap".into(),
                kind: LayerKind::GlobalAvgPool,
                inputs: vec!["@in".into()],
            },
            LayerSpec {
                name: "fl".into(),
                kind: LayerKind::Flatten,
                inputs: vec!["gap".into()],
            },
            LayerSpec {
                name: "fc".into(),
                kind: LayerKind::Linear {
                    out_features: classes,
                },
                inputs: vec!["fl".into()],
            },
        ],
    };
    (
        ModelMeta {
            input: (3, 16, 16),
            classes,
        },
        vec![
            inception("b1", 16),
            inception("b2", 32),
            pool,
            inception("b3", 64),
            head,
        ],
    )
}

pub fn toy_inception_teacher(classes: usize, seed: u64) -> Result<ModelGraph> {
    let (meta, blocks) = toy_inception_blocks(classes);
    ModelGraph::build(meta, blocks, ParamInit::Seed(seed))
}

/// The reference dataset of the pinned-seed experiments: 4 classes, 3x16x16,
/// 200 train and 50 test images per class, seed 7.
pub fn reference_spec() -> SyntheticSpec {
    SyntheticSpec {
        classes: 4,
        channels: 3,
        height: 16,
        width: 16,
        n_train: 200,
        n_test: 50,
        seed: 7,
        shift: (0, 0),
        noise_sigma: NOISE_SIGMA_DEFAULT,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_string_round_trips() {
        for s in [
            "synth:4:3x16x16:200:50:7",
            "synth:8:1x12x12:10:5:9:shift=3,-2",
        ] {
            let spec = DatasetSpec::parse(s).unwrap();
            assert_eq!(spec.to_spec_string(), s);
        }
        assert!(DatasetSpec::parse("synth:4:3x16:1:1:0").is_err());
        assert!(DatasetSpec::parse("blah:1").is_err());
        assert!(DatasetSpec::parse("synth:4:3x16x16:200:50:7:bogus=1").is_err());
    }

    #[test]
    fn same_spec_generates_identical_data() {
        let spec = SyntheticSpec {
            n_train: 3,
            n_test: 2,
            ..reference_spec()
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_is_template_separable() {
        // With sigma = 0 (and the jitter still on), a nearest-class-template
        // classifier built from train means must classify every test image.
        let spec = SyntheticSpec {
            classes: 4,
            n_train: 20,
            n_test: 10,
            noise_sigma: 0.0,
            ..reference_spec()
        };
        let ds = synth_generate(&spec).unwrap();
        let img_len = ds.shape.0 * ds.shape.1 * ds.shape.2;
        let mut templates = vec![vec![0.0f64; img_len]; spec.classes];
        let mut counts = vec![0usize; spec.classes];
        for i in 0..ds.train.len() {
            let k = ds.train.labels[i];
            counts[k] += 1;
            for (t, v) in templates[k].iter_mut().zip(ds.train.image(i)) {
                *t += *v as f64;
            }
        }
        for (t, n) in templates.iter_mut().zip(&counts) {
            t.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let mut correct = 0;
        for i in 0..ds.test.len() {
            let img = ds.test.image(i);
            let best = (0..spec.classes)
                .min_by(|&a, &b| {
                    let da: f64 = templates[a]
                        .iter()
                        .zip(img)
                        .map(|(t, v)| (t - *v as f64).powi(2))
                        .sum();
                    let db: f64 = templates[b]
                        .iter()
                        .zip(img)
                        .map(|(t, v)| (t - *v as f64).powi(2))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == ds.test.labels[i] {
                correct += 1;
            }
        }
        assert_eq!(correct, ds.test.len());
    }

    #[test]
    fn superset_shares_base_classes() {
        let base = SyntheticSpec {
            n_train: 4,
            n_test: 2,
            ..reference_spec()
        };
        let superset = SyntheticSpec {
            classes: 8,
            ..base.clone()
        };
        let a = synth_generate(&base).unwrap();
        let b = synth_generate(&superset).unwrap();
        // first 4 classes coincide image-for-image
        for i in 0..a.train.len() {
            assert_eq!(a.train.image(i), b.train.image(i));
        }
    }

    #[test]
    fn rejects_unrepresentable_classes() {
        let spec = SyntheticSpec {
            classes: 17,
            ..reference_spec()
        };
        assert!(synth_generate(&spec).is_err());
    }

    #[test]
    fn cifar_parses_single_record() {
        let mut record = vec![0u8; 3073];
        record[0] = 3;
        let split = load_cifar_binary(&record).unwrap();
        assert_eq!(split.len(), 1);
        assert_eq!(split.labels, vec![3]);
        assert!(split.images.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cifar_maps_pixel_bytes() {
        let mut record = vec![0u8; 3073];
        record[1] = 255; // R-plane offset 0
        let split = load_cifar_binary(&record).unwrap();
        assert_eq!(split.images[0], 1.0);
        assert!(split.images[1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cifar_rejects_partial_record() {
        let bytes = vec![0u8; 3073 + 100];
        let err = load_cifar_binary(&bytes).unwrap_err().to_string();
        assert!(err.contains("offset 3073"), "{err}");
    }

    #[test]
    fn cifar_rejects_bad_label() {
        let mut record = vec![0u8; 3073];
        record[0] = 10;
        assert!(load_cifar_binary(&record).is_err());
    }

    #[test]
    fn cifar_two_record_fixture_round_trips() {
        let mut bytes = vec![0u8; 2 * 3073];
        bytes[0] = 1;
        bytes[1] = 128; // R plane, first pixel of record 0
        bytes[3073] = 9;
        bytes[3073 + 1 + 1024] = 64; // G plane, first pixel of record 1
        let split = load_cifar_binary(&bytes).unwrap();
        assert_eq!(split.labels, vec![1, 9]);
        assert_eq!(split.image(0)[0], 128.0 / 255.0);
        assert_eq!(split.image(1)[1024], 64.0 / 255.0);
        assert_eq!(split.image(1)[0], 0.0);
    }

    #[test]
    fn batches_without_shuffle_follow_storage_order() {
        let spec = SyntheticSpec {
            n_train: 3,
            n_test: 1,
            ..reference_spec()
        };
        let ds = synth_generate(&spec).unwrap();
        let got: Vec<usize> = batches(&ds.train, 5, 0, false)
            .unwrap()
            .flat_map(|b| b.labels)
            .collect();
        assert_eq!(got, ds.train.labels);
    }

    #[test]
    fn batches_emit_every_label_once() {
        let spec = SyntheticSpec {
            n_train: 5,
            n_test: 1,
            ..reference_spec()
        };
        let ds = synth_generate(&spec).unwrap();
        let mut got: Vec<usize> = batches(&ds.train, 3, 42, true)
            .unwrap()
            .flat_map(|b| b.labels)
            .collect();
        let mut want = ds.train.labels.clone();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn batches_same_seed_same_sequence() {
        let spec = SyntheticSpec {
            n_train: 4,
            n_test: 1,
            ..reference_spec()
        };
        let ds = synth_generate(&spec).unwrap();
        let a: Vec<usize> = batches(&ds.train, 3, 9, true)
            .unwrap()
            .flat_map(|b| b.labels)
            .collect();
        let b: Vec<usize> = batches(&ds.train, 3, 9, true)
            .unwrap()
            .flat_map(|b| b.labels)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_zero_batch_size() {
        let spec = SyntheticSpec {
            n_train: 2,
            n_test: 1,
            ..reference_spec()
        };
        let ds = synth_generate(&spec).unwrap();
        assert!(batches(&ds.train, 0, 0, false).is_err());
    }
}
