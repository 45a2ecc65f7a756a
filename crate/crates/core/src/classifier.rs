//! Classification head on top of the language-model encoder.
//!
//! The top-layer hidden sequence is summarised by concat pooling
//! (`[last; max; mean]` over the valid positions of each example) and passed
//! through `linear → ReLU → linear`. Binary tasks produce two softmax logits;
//! multi-label tasks produce one independent logit per label.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::awd_lstm::{keep_mask, AwdLstm, HiddenState, LMConfig, Mode, ModelError};
use crate::corpus::TaskKind;
use crate::metrics::rank_labels;
use crate::tokenizer::{UnigramVocab, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    /// Applied before each linear layer in train mode.
    pub dropout: f64,
    /// Sequences are cut to this many tokens from the start.
    pub max_len: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 50,
            dropout: 0.1,
            max_len: 400,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadParams {
    /// `[3·emb, hidden]`
    pub w1: ParamId,
    pub b1: ParamId,
    /// `[hidden, n_out]`
    pub w2: ParamId,
    pub b2: ParamId,
}

/// `[last; max; mean]` over the first `lengths[b]` steps of `seq`
/// (`[time, batch, d]`), giving `[batch, 3·d]`.
pub fn concat_pool<T: Float>(g: &mut Graph<T>, seq: Var, lengths: &[usize]) -> Result<Var, AutodiffError> {
    let last = g.last_step(seq, lengths)?;
    let max = g.max_over_time(seq, lengths)?;
    let mean = g.mean_over_time(seq, lengths)?;
    g.concat(&[last, max, mean], 1)
}

/// A language-model encoder with a classification head. Head parameters live
/// in the same store as the encoder's.
#[derive(Clone, Debug)]
pub struct TextClassifier<T> {
    lm: AwdLstm<T>,
    head_config: HeadConfig,
    head: HeadParams,
    task_kind: TaskKind,
    labels: Vec<String>,
}

fn output_width(task_kind: TaskKind, labels: &[String]) -> Result<usize, ModelError> {
    match task_kind {
        TaskKind::Binary if labels.len() != 2 => Err(ModelError::Config(format!(
            "binary head needs exactly 2 labels, got {}",
            labels.len()
        ))),
        TaskKind::Multilabel if labels.is_empty() => {
            Err(ModelError::Config("multi-label head needs at least one label".into()))
        }
        _ => Ok(labels.len()),
    }
}

impl<T: Float> TextClassifier<T> {
    /// Adds a freshly initialised head (`U(±1/√fan_in)` weights, zero biases)
    /// to `lm`.
    pub fn new<R: Rng + ?Sized>(
        mut lm: AwdLstm<T>,
        head_config: HeadConfig,
        task_kind: TaskKind,
        labels: Vec<String>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        validate_head(&head_config)?;
        let n_out = output_width(task_kind, &labels)?;
        let input = 3 * lm.config().embedding_dim;
        let mut uniform = |shape: [usize; 2]| {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            let data = (0..shape[0] * shape[1])
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        let w1 = uniform([input, head_config.hidden]);
        let w2 = uniform([head_config.hidden, n_out]);
        let store = lm.store_mut();
        let head = HeadParams {
            w1: store.add("head.w1", w1),
            b1: store.add("head.b1", Tensor::zeros(&[head_config.hidden])),
            w2: store.add("head.w2", w2),
            b2: store.add("head.b2", Tensor::zeros(&[n_out])),
        };
        Ok(Self {
            lm,
            head_config,
            head,
            task_kind,
            labels,
        })
    }

    /// Rebinds to a store holding both encoder and head parameters.
    pub fn from_store(
        config: LMConfig,
        store: ParamStore<T>,
        head_config: HeadConfig,
        task_kind: TaskKind,
        labels: Vec<String>,
    ) -> Result<Self, ModelError> {
        validate_head(&head_config)?;
        let n_out = output_width(task_kind, &labels)?;
        let input = 3 * config.embedding_dim;
        let find = |name: &str, shape: &[usize]| -> Result<ParamId, ModelError> {
            let id = store
                .find(name)
                .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))?;
            if store.value(id).shape() != shape {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        let head = HeadParams {
            w1: find("head.w1", &[input, head_config.hidden])?,
            b1: find("head.b1", &[head_config.hidden])?,
            w2: find("head.w2", &[head_config.hidden, n_out])?,
            b2: find("head.b2", &[n_out])?,
        };
        let lm = AwdLstm::from_store(config, store)?;
        Ok(Self {
            lm,
            head_config,
            head,
            task_kind,
            labels,
        })
    }

    pub fn lm(&self) -> &AwdLstm<T> {
        &self.lm
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.lm.store()
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.lm.store_mut()
    }

    pub fn head_config(&self) -> &HeadConfig {
        &self.head_config
    }

    pub fn head(&self) -> HeadParams {
        self.head
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_out(&self) -> usize {
        self.labels.len()
    }

    /// Groups from the bottom up: embedding, lstm1..3, head.
    pub fn layer_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = self.lm.layer_groups();
        let h = self.head;
        groups.push(("head".to_string(), vec![h.w1, h.b1, h.w2, h.b2]));
        groups
    }

    /// Encodes a text with BOS/EOS and truncates it to `max_len` tokens.
    pub fn tokenize(&self, vocab: &UnigramVocab, text: &str) -> Vec<u32> {
        let mut ids = vocab.encode(text, true);
        ids.truncate(self.head_config.max_len.max(1));
        ids
    }

    /// Logits `[batch, n_out]` for a batch of token sequences. Sequences are
    /// right-padded with PAD; padded positions never reach the pooled features.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        batch: &[&[u32]],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Usage("empty batch".into()));
        }
        let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        if lengths.contains(&0) {
            return Err(ModelError::Usage("sequence of length 0".into()));
        }
        let time = *lengths.iter().max().unwrap();
        let b = batch.len();
        let mut tokens = vec![PAD_ID; time * b];
        for (j, seq) in batch.iter().enumerate() {
            for (t, &id) in seq.iter().enumerate() {
                tokens[t * b + j] = id;
            }
        }
        let state = HiddenState::zeros(self.lm.config(), b);
        let enc = self.lm.encode(g, &tokens, time, &state, mode, rng)?;
        let d = self.lm.config().embedding_dim;
        let seq = g.reshape(enc.hidden, &[time, b, d])?;
        let pooled = concat_pool(g, seq, &lengths)?;
        let p = self.head_config.dropout;
        let store = self.lm.store();
        let h = self.head;
        let x = self.head_dropout(g, pooled, p, mode, rng)?;
        let w1 = g.param(store, h.w1);
        let b1 = g.param(store, h.b1);
        let x = g.matmul(x, w1)?;
        let x = g.add(x, b1)?;
        let x = g.relu(x);
        let x = self.head_dropout(g, x, p, mode, rng)?;
        let w2 = g.param(store, h.w2);
        let b2 = g.param(store, h.b2);
        let x = g.matmul(x, w2)?;
        Ok(g.add(x, b2)?)
    }

    fn head_dropout<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, AutodiffError> {
        if mode == Mode::Eval || p <= 0.0 {
            return Ok(x);
        }
        let mask = keep_mask(g.shape(x), p, rng);
        g.dropout(x, &mask, T::from_f64(1.0 - p))
    }

    /// Eval-mode logits, one row per sequence, in input order. Sequences are
    /// processed in length-sorted batches of `batch_size`.
    pub fn logits(&self, seqs: &[Vec<u32>], batch_size: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(seqs[i].len()));
        let mut out = vec![Vec::new(); seqs.len()];
        // eval mode draws no masks
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        for chunk in order.chunks(batch_size.max(1)) {
            let batch: Vec<&[u32]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            let mut g = Graph::new();
            let logits = self.forward(&mut g, &batch, Mode::Eval, &mut rng)?;
            let n = self.n_out();
            for (row, &i) in g.value(logits).data().chunks(n).zip(chunk) {
                out[i] = row.iter().map(|v| v.as_f64()).collect();
            }
        }
        Ok(out)
    }

    /// Probabilities: softmax over the two classes (binary) or independent
    /// sigmoids (multi-label).
    pub fn scores(&self, seqs: &[Vec<u32>], batch_size: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let logits = self.logits(seqs, batch_size)?;
        Ok(logits
            .into_iter()
            .map(|row| match self.task_kind {
                TaskKind::Binary => softmax(&row),
                TaskKind::Multilabel => row.iter().map(|&z| sigmoid(z)).collect(),
            })
            .collect())
    }

    pub fn predict(
        &self,
        vocab: &UnigramVocab,
        texts: &[String],
        batch_size: usize,
    ) -> Result<Vec<Prediction>, ModelError> {
        let seqs: Vec<Vec<u32>> = texts.iter().map(|t| self.tokenize(vocab, t)).collect();
        let scores = self.scores(&seqs, batch_size)?;
        Ok(scores
            .into_iter()
            .map(|s| Prediction::from_scores(self.task_kind, &self.labels, s))
            .collect())
    }
}

fn validate_head(c: &HeadConfig) -> Result<(), ModelError> {
    if c.hidden == 0 || c.max_len == 0 {
        return Err(ModelError::Config("head hidden width and max_len must be positive".into()));
    }
    if !(0.0..1.0).contains(&c.dropout) {
        return Err(ModelError::Config(format!("head dropout {} outside [0, 1)", c.dropout)));
    }
    Ok(())
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Binary {
        /// Index into the label vocabulary.
        class: usize,
        label: String,
        scores: Vec<f64>,
    },
    Multilabel {
        /// Labels by descending score, ties by label id.
        ranking: Vec<String>,
        scores: Vec<f64>,
        /// Labels scoring at least 0.5.
        predicted: Vec<String>,
    },
}

impl Prediction {
    pub fn from_scores(task_kind: TaskKind, labels: &[String], scores: Vec<f64>) -> Self {
        match task_kind {
            TaskKind::Binary => {
                let class = argmax(&scores);
                Prediction::Binary {
                    class,
                    label: labels[class].clone(),
                    scores,
                }
            }
            TaskKind::Multilabel => {
                let order = rank_labels(&scores);
                Prediction::Multilabel {
                    ranking: order.iter().map(|&i| labels[i].clone()).collect(),
                    predicted: order
                        .iter()
                        .filter(|&&i| scores[i] >= 0.5)
                        .map(|&i| labels[i].clone())
                        .collect(),
                    scores,
                }
            }
        }
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Length-bucketed minibatches: a seeded shuffle, then sorting inside windows
/// of 50 batches so each batch holds similar lengths, then a shuffle of the
/// batch order.
pub fn bucket_batches<R: Rng + ?Sized>(lengths: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for window in order.chunks(batch_size * 50) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| std::cmp::Reverse(lengths[i]));
        batches.extend(w.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}
