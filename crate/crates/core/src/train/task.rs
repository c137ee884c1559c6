//! Synthetic training tasks and small-dataset ingestion.
//!
//! Every task is deterministic given its seed: prototypes and the fixed eval
//! pool come from labeled RNG streams, train batches from the loop's stream.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::idx::{self, IdxError};
use crate::rng::{stream, ChaCha8Rng};
use crate::tensor::Tensor;

const TOY_IMG: usize = 16;
const EVAL_POOL: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("invalid task: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// Causal LM task: predict the previous token (position 0 predicts
    /// itself), so the optimal loss is zero.
    SeqCopy {
        #[serde(default = "default_seq_len")]
        len: usize,
        #[serde(default = "default_vocab")]
        vocab: usize,
    },
    /// Two one-hot tokens a, b; label (a + b) mod p.
    ModularAdd {
        #[serde(default = "default_modulus")]
        modulus: usize,
    },
    /// Gaussian class prototypes rendered as small images plus pixel noise.
    ToyClassify {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// IDX-format u8 image + label files (the MNIST container).
    Idx { images: PathBuf, labels: PathBuf },
}

fn default_seq_len() -> usize {
    16
}
fn default_vocab() -> usize {
    32
}
fn default_modulus() -> usize {
    23
}
fn default_classes() -> usize {
    10
}
fn default_noise() -> f64 {
    4.0
}

/// How image-like inputs are presented to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputLayout {
    /// Square patches, `(B, T, P)`.
    Patches,
    /// Whole sample as one token, `(B, 1, In)`.
    Flat,
    /// Token ids (LM tasks).
    Tokens,
}

/// Dimensions the model config needs to consume this task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskMeta {
    pub seq_len: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub vocab: usize,
}

pub enum BatchData {
    Continuous { x: Tensor, labels: Vec<usize> },
    Tokens { ids: Vec<usize>, b: usize, t: usize, targets: Vec<usize> },
}

enum Pool {
    /// Images as flat pixel rows plus labels; train/eval split fixed.
    Images { pixels: Vec<f64>, labels: Vec<usize>, dim: usize, rows: usize, cols: usize, train: usize },
    /// Class prototypes; samples are drawn on the fly.
    Protos { protos: Vec<f64>, dim: usize, eval: Vec<(Vec<f64>, usize)> },
    /// Token tasks need no pool.
    None,
}

pub struct Task {
    pub kind: TaskKind,
    pub layout: InputLayout,
    meta: TaskMeta,
    patch: usize,
    pool: Pool,
}

/// Largest patch edge from a fixed preference list that tiles the image.
fn patch_edge(rows: usize, cols: usize) -> usize {
    [8usize, 7, 4, 2, 1]
        .into_iter()
        .find(|p| rows % p == 0 && cols % p == 0)
        .unwrap_or(1)
}

/// Re-lay a `rows x cols` image into `(grid, patch*patch)` patch vectors.
fn patchify(img: &[f64], rows: usize, cols: usize, p: usize, out: &mut Vec<f64>) {
    for gr in 0..rows / p {
        for gc in 0..cols / p {
            for r in 0..p {
                for c in 0..p {
                    out.push(img[(gr * p + r) * cols + gc * p + c]);
                }
            }
        }
    }
}

pub fn make_task(kind: TaskKind, layout: InputLayout, seed: u64) -> Result<Task, TaskError> {
    match &kind {
        TaskKind::SeqCopy { len, vocab } => {
            if *len == 0 || *vocab < 2 {
                return Err(TaskError::Invalid("seq_copy needs len > 0 and vocab >= 2".into()));
            }
            if layout != InputLayout::Tokens {
                return Err(TaskError::Invalid("seq_copy is a token task".into()));
            }
            let meta = TaskMeta { seq_len: *len, input_dim: 0, num_classes: 0, vocab: *vocab };
            Ok(Task { kind, layout, meta, patch: 1, pool: Pool::None })
        }
        TaskKind::ModularAdd { modulus } => {
            let p = *modulus;
            if p < 2 {
                return Err(TaskError::Invalid("modulus must be >= 2".into()));
            }
            if layout == InputLayout::Tokens {
                return Err(TaskError::Invalid("modular_add is a continuous task".into()));
            }
            let (seq_len, input_dim) = match layout {
                InputLayout::Patches => (2, p),
                _ => (1, 2 * p),
            };
            let meta = TaskMeta { seq_len, input_dim, num_classes: p, vocab: 0 };
            Ok(Task { kind, layout, meta, patch: 1, pool: Pool::None })
        }
        TaskKind::ToyClassify { classes, noise } => {
            if *classes < 2 || *noise < 0.0 {
                return Err(TaskError::Invalid("need classes >= 2 and noise >= 0".into()));
            }
            let dim = TOY_IMG * TOY_IMG;
            let mut proto_rng = stream(seed, "task.protos");
            let protos: Vec<f64> =
                (0..classes * dim).map(|_| proto_rng.sample(rand_distr::StandardNormal)).collect();
            let mut eval_rng = stream(seed, "task.eval");
            let eval = (0..EVAL_POOL)
                .map(|_| sample_proto(&protos, *classes, dim, *noise, &mut eval_rng))
                .collect();
            let patch = patch_edge(TOY_IMG, TOY_IMG);
            let meta = match layout {
                InputLayout::Patches => TaskMeta {
                    seq_len: dim / (patch * patch),
                    input_dim: patch * patch,
                    num_classes: *classes,
                    vocab: 0,
                },
                InputLayout::Flat => {
                    TaskMeta { seq_len: 1, input_dim: dim, num_classes: *classes, vocab: 0 }
                }
                InputLayout::Tokens => {
                    return Err(TaskError::Invalid("toy_classify is a continuous task".into()))
                }
            };
            Ok(Task { kind, layout, meta, patch, pool: Pool::Protos { protos, dim, eval } })
        }
        TaskKind::Idx { images, labels } => {
            let (imgs, lbls) = idx::load_pair(images, labels)?;
            if imgs.count == 0 {
                return Err(TaskError::Invalid("empty idx dataset".into()));
            }
            let dim = imgs.rows * imgs.cols;
            let pixels: Vec<f64> = imgs.pixels.iter().map(|&b| b as f64 / 255.0).collect();
            let labels_us: Vec<usize> = lbls.iter().map(|&b| b as usize).collect();
            let num_classes = labels_us.iter().copied().max().unwrap_or(0) + 1;
            // fixed split: last 10% (capped) is the eval set
            let eval_n = (imgs.count / 10).clamp(1, 1024);
            let train = imgs.count - eval_n;
            if train == 0 {
                return Err(TaskError::Invalid("idx dataset too small to split".into()));
            }
            let patch = patch_edge(imgs.rows, imgs.cols);
            let meta = match layout {
                InputLayout::Patches => TaskMeta {
                    seq_len: dim / (patch * patch),
                    input_dim: patch * patch,
                    num_classes,
                    vocab: 0,
                },
                InputLayout::Flat => TaskMeta { seq_len: 1, input_dim: dim, num_classes, vocab: 0 },
                InputLayout::Tokens => {
                    return Err(TaskError::Invalid("idx is a continuous task".into()))
                }
            };
            let pool = Pool::Images {
                pixels,
                labels: labels_us,
                dim,
                rows: imgs.rows,
                cols: imgs.cols,
                train,
            };
            Ok(Task { kind, layout, meta, patch, pool })
        }
    }
}

fn sample_proto(
    protos: &[f64],
    classes: usize,
    dim: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, usize) {
    let label = rng.gen_range(0..classes);
    let base = &protos[label * dim..(label + 1) * dim];
    let img = base
        .iter()
        .map(|&v| v + noise * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    (img, label)
}

impl Task {
    pub fn meta(&self) -> TaskMeta {
        self.meta
    }

    pub fn eval_len(&self) -> usize {
        match &self.pool {
            Pool::Images { pixels, dim, train, .. } => pixels.len() / dim - train,
            Pool::Protos { eval, .. } => eval.len(),
            Pool::None => EVAL_POOL,
        }
    }

    /// Draw one training batch from the caller's RNG stream.
    pub fn train_batch(&self, rng: &mut ChaCha8Rng, batch: usize) -> BatchData {
        match (&self.kind, &self.pool) {
            (TaskKind::SeqCopy { len, vocab }, _) => {
                let mut ids = Vec::with_capacity(batch * len);
                for _ in 0..batch * len {
                    ids.push(rng.gen_range(0..*vocab));
                }
                let targets = seq_copy_targets(&ids, *len);
                BatchData::Tokens { ids, b: batch, t: *len, targets }
            }
            (TaskKind::ModularAdd { modulus }, _) => {
                let p = *modulus;
                let mut x = Vec::with_capacity(batch * 2 * p);
                let mut labels = Vec::with_capacity(batch);
                for _ in 0..batch {
                    let a = rng.gen_range(0..p);
                    let b = rng.gen_range(0..p);
                    labels.push((a + b) % p);
                    let mut onehot = vec![0.0; 2 * p];
                    onehot[a] = 1.0;
                    onehot[p + b] = 1.0;
                    x.extend_from_slice(&onehot);
                }
                let shape = match self.layout {
                    InputLayout::Patches => vec![batch, 2, p],
                    _ => vec![batch, 1, 2 * p],
                };
                BatchData::Continuous { x: Tensor::new(shape, x).expect("batch shape"), labels }
            }
            (TaskKind::ToyClassify { classes, noise }, Pool::Protos { protos, dim, .. }) => {
                let mut rows = Vec::with_capacity(batch);
                for _ in 0..batch {
                    rows.push(sample_proto(protos, *classes, *dim, *noise, rng));
                }
                self.images_to_batch(&rows)
            }
            (TaskKind::Idx { .. }, Pool::Images { pixels, labels, dim, train, .. }) => {
                let mut rows = Vec::with_capacity(batch);
                for _ in 0..batch {
                    let i = rng.gen_range(0..*train);
                    rows.push((pixels[i * dim..(i + 1) * dim].to_vec(), labels[i]));
                }
                self.images_to_batch(&rows)
            }
            _ => unreachable!("pool matches kind by construction"),
        }
    }

    /// The fixed eval set in deterministic batches.
    pub fn eval_batches(&self, batch: usize) -> Vec<BatchData> {
        match (&self.kind, &self.pool) {
            (TaskKind::SeqCopy { len, vocab }, _) => {
                // fixed eval stream, independent of training draws
                let mut rng = stream(0xeva1, "task.seq_eval");
                let n = EVAL_POOL / batch.max(1);
                (0..n.max(1))
                    .map(|_| {
                        let mut ids = Vec::with_capacity(batch * len);
                        for _ in 0..batch * len {
                            ids.push(rng.gen_range(0..*vocab));
                        }
                        let targets = seq_copy_targets(&ids, *len);
                        BatchData::Tokens { ids, b: batch, t: *len, targets }
                    })
                    .collect()
            }
            (TaskKind::ModularAdd { .. }, _) => {
                let mut rng = stream(0xeva1, "task.mod_eval");
                let n = (EVAL_POOL / batch.max(1)).max(1);
                (0..n).map(|_| self.train_batch(&mut rng, batch)).collect()
            }
            (TaskKind::ToyClassify { .. }, Pool::Protos { eval, .. }) => eval
                .chunks(batch.max(1))
                .map(|chunk| self.images_to_batch(chunk))
                .collect(),
            (TaskKind::Idx { .. }, Pool::Images { pixels, labels, dim, train, .. }) => {
                let total = pixels.len() / dim;
                let rows: Vec<(Vec<f64>, usize)> = (*train..total)
                    .map(|i| (pixels[i * dim..(i + 1) * dim].to_vec(), labels[i]))
                    .collect();
                rows.chunks(batch.max(1)).map(|chunk| self.images_to_batch(chunk)).collect()
            }
            _ => unreachable!(),
        }
    }

    fn images_to_batch(&self, rows: &[(Vec<f64>, usize)]) -> BatchData {
        let b = rows.len();
        let labels: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
        match self.layout {
            InputLayout::Flat => {
                let dim = rows[0].0.len();
                let mut x = Vec::with_capacity(b * dim);
                for (img, _) in rows {
                    x.extend_from_slice(img);
                }
                BatchData::Continuous { x: Tensor::new(vec![b, 1, dim], x).expect("shape"), labels }
            }
            InputLayout::Patches => {
                let dim = rows[0].0.len();
                let (r, c) = self.image_geometry(dim);
                let p = self.patch;
                let mut x = Vec::with_capacity(b * dim);
                for (img, _) in rows {
                    patchify(img, r, c, p, &mut x);
                }
                let t = dim / (p * p);
                BatchData::Continuous {
                    x: Tensor::new(vec![b, t, p * p], x).expect("shape"),
                    labels,
                }
            }
            InputLayout::Tokens => unreachable!("continuous task"),
        }
    }

    fn image_geometry(&self, dim: usize) -> (usize, usize) {
        match &self.pool {
            Pool::Images { rows, cols, .. } => (*rows, *cols),
            Pool::Protos { .. } => (TOY_IMG, TOY_IMG),
            Pool::None => (dim, 1),
        }
    }
}

/// target[t] = ids[t-1] within each row, target[0] = ids[0].
fn seq_copy_targets(ids: &[usize], len: usize) -> Vec<usize> {
    let mut targets = Vec::with_capacity(ids.len());
    for row in ids.chunks(len) {
        targets.push(row[0]);
        for t in 1..len {
            targets.push(row[t - 1]);
        }
    }
    targets
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seq_copy_targets_are_shifted_input() {
        let task =
            make_task(TaskKind::SeqCopy { len: 16, vocab: 32 }, InputLayout::Tokens, 0).unwrap();
        let mut rng = stream(1, "t");
        let BatchData::Tokens { ids, t, targets, .. } = task.train_batch(&mut rng, 4) else {
            panic!("token batch expected")
        };
        assert_eq!(t, 16);
        for (row, trow) in ids.chunks(16).zip(targets.chunks(16)) {
            assert_eq!(trow[0], row[0]);
            for i in 1..16 {
                assert_eq!(trow[i], row[i - 1], "shift-by-one target");
            }
        }
    }

    #[test]
    fn modular_add_labels_are_balanced() {
        let p = 23;
        let task = make_task(TaskKind::ModularAdd { modulus: p }, InputLayout::Patches, 0).unwrap();
        let mut rng = stream(2, "t");
        let mut hist = vec![0usize; p];
        let n = 10_000;
        let BatchData::Continuous { labels, x } = task.train_batch(&mut rng, n) else {
            panic!("continuous batch expected")
        };
        assert_eq!(x.shape(), &[n, 2, p]);
        for l in labels {
            hist[l] += 1;
        }
        let expect = n as f64 / p as f64;
        for (l, &count) in hist.iter().enumerate() {
            let dev = (count as f64 - expect).abs() / expect;
            assert!(dev < 0.25, "label {l} count {count} deviates {dev:.3} from uniform");
        }
        // aggregate balance: max-min spread within 5% of n
        let spread = (hist.iter().max().unwrap() - hist.iter().min().unwrap()) as f64;
        assert!(spread / n as f64 <= 0.05, "spread {spread}");
    }

    #[test]
    fn toy_classify_shapes_and_determinism() {
        let kind = TaskKind::ToyClassify { classes: 10, noise: 1.0 };
        let task = make_task(kind.clone(), InputLayout::Patches, 7).unwrap();
        assert_eq!(task.meta().seq_len, 4); // 16x16 with 8x8 patches
        assert_eq!(task.meta().input_dim, 64);
        let b1 = task.train_batch(&mut stream(3, "b"), 8);
        let b2 = task.train_batch(&mut stream(3, "b"), 8);
        let (BatchData::Continuous { x: x1, labels: l1 }, BatchData::Continuous { x: x2, labels: l2 }) =
            (b1, b2)
        else {
            panic!()
        };
        assert_eq!(x1, x2);
        assert_eq!(l1, l2);

        let flat = make_task(kind, InputLayout::Flat, 7).unwrap();
        assert_eq!(flat.meta().input_dim, 256);
        let evals = flat.eval_batches(64);
        assert_eq!(evals.len(), 8);
    }

    #[test]
    fn patchify_keeps_pixels_grouped_by_patch() {
        // 4x4 image with 2x2 patches: first patch is the top-left block
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut out = Vec::new();
        patchify(&img, 4, 4, 2, &mut out);
        assert_eq!(&out[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&out[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }
}
