//! Python bindings: tokenizer, language model, classifier and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyFloatingPointError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lmft::awd_lstm::{AwdLstm, DropoutRates, LMConfig};
use lmft::classifier::{HeadConfig, TextClassifier};
use lmft::corpus::{normalize_text, RawCorpus, TaskKind};
use lmft::persistence::Checkpoint;
use lmft::tokenizer::{train_unigram, TrainerConfig, UnigramVocab};
use lmft::training::{
    clf_train, lm_finetune, lm_pretrain, tokenize_stream, EncodedDataset, RunLog, Stage, TrainError, TrainRunConfig,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::Numerical { .. } => PyFloatingPointError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn json<'py>(py: Python<'py>, text: String) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn run_log<'py>(py: Python<'py>, log: &RunLog) -> PyResult<Bound<'py, PyAny>> {
    json(py, serde_json::to_string(log).map_err(value_err)?)
}

fn normalized(texts: &[String]) -> Vec<String> {
    texts.iter().map(|t| normalize_text(t)).collect()
}

/// Unigram subword vocabulary.
#[pyclass(name = "Vocab", module = "lmft_py", from_py_object)]
#[derive(Clone)]
struct Vocab {
    inner: UnigramVocab,
}

#[pymethods]
impl Vocab {
    /// Trains a vocabulary of `target_size` pieces (specials included).
    #[staticmethod]
    #[pyo3(signature = (texts, target_size = 32000))]
    fn train(texts: Vec<String>, target_size: usize) -> PyResult<Self> {
        let corpus = RawCorpus::from_documents(&texts);
        let outcome = train_unigram(&corpus, &TrainerConfig::with_target(target_size)).map_err(value_err)?;
        Ok(Self { inner: outcome.vocab })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: UnigramVocab::load(&path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(value_err)
    }

    #[pyo3(signature = (text, markers = false))]
    fn encode(&self, text: &str, markers: bool) -> Vec<u32> {
        self.inner.encode(&normalize_text(text), markers)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(value_err)
    }

    /// Viterbi segmentation of a single chunk: `(ids, log_prob)`.
    fn segment(&self, text: &str) -> (Vec<u32>, f64) {
        let s = self.inner.segment(text);
        (s.ids, s.log_prob)
    }

    fn pieces(&self) -> Vec<(String, f64)> {
        self.inner.pieces().to_vec()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Vocab(pieces={})", self.inner.len())
    }
}

/// Three-layer AWD-LSTM language model with tied embeddings.
#[pyclass(name = "LanguageModel", module = "lmft_py", from_py_object)]
#[derive(Clone)]
struct LanguageModel {
    inner: AwdLstm<f32>,
}

#[allow(clippy::too_many_arguments)]
fn lm_run(stage: Stage, epochs: usize, lr: f64, batch_size: usize, bptt_len: usize, seed: u64) -> TrainRunConfig {
    TrainRunConfig {
        stage,
        epochs,
        lr,
        batch_size,
        bptt_len,
        seed,
        ..TrainRunConfig::pretrain()
    }
}

#[pymethods]
impl LanguageModel {
    #[new]
    #[pyo3(signature = (vocab_size, embedding_dim = 400, hidden_dim = 1152, dropout = 0.3, seed = 0))]
    fn new(vocab_size: usize, embedding_dim: usize, hidden_dim: usize, dropout: f64, seed: u64) -> PyResult<Self> {
        let config = LMConfig {
            vocab_size,
            embedding_dim,
            hidden_dim,
            dropout: DropoutRates::from_master(dropout),
            ..LMConfig::default()
        };
        let inner = AwdLstm::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Trains on `texts`, scoring `valid_texts` after every epoch. Returns the
    /// run log as a dict.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (vocab, texts, valid_texts, epochs = 10, lr = 0.001, batch_size = 128, bptt_len = 70, seed = 0))]
    fn pretrain<'py>(
        &mut self,
        py: Python<'py>,
        vocab: &Vocab,
        texts: Vec<String>,
        valid_texts: Vec<String>,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        bptt_len: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let train = normalized(&texts);
        let valid = normalized(&valid_texts);
        let train = tokenize_stream(&vocab.inner, train.iter().map(String::as_str));
        let valid = tokenize_stream(&vocab.inner, valid.iter().map(String::as_str));
        let cfg = lm_run(Stage::Pretrain, epochs, lr, batch_size, bptt_len, seed);
        let log = lm_pretrain(&mut self.inner, &train, &valid, &cfg, &mut |_, _| {}).map_err(train_err)?;
        run_log(py, &log)
    }

    /// Fine-tunes on target-task text with discriminative learning rates.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (vocab, texts, valid_texts, epochs = 10, lr = 0.001, batch_size = 128, bptt_len = 70, seed = 0, factor = 2.6))]
    fn finetune<'py>(
        &mut self,
        py: Python<'py>,
        vocab: &Vocab,
        texts: Vec<String>,
        valid_texts: Vec<String>,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        bptt_len: usize,
        seed: u64,
        factor: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = TrainRunConfig {
            discriminative_factor: factor,
            ..lm_run(Stage::LmFinetune, epochs, lr, batch_size, bptt_len, seed)
        };
        let log = lm_finetune(&mut self.inner, &vocab.inner, &normalized(&texts), &normalized(&valid_texts), &cfg, &mut |_, _| {})
            .map_err(train_err)?;
        run_log(py, &log)
    }

    fn perplexity(&self, vocab: &Vocab, texts: Vec<String>) -> PyResult<f64> {
        let texts = normalized(&texts);
        let stream = tokenize_stream(&vocab.inner, texts.iter().map(String::as_str));
        self.inner.perplexity(&stream).map_err(value_err)
    }

    fn save(&self, path: PathBuf, vocab: &Vocab) -> PyResult<()> {
        Checkpoint::from_lm(&self.inner, &vocab.inner, Stage::Pretrain)
            .save(&path)
            .map_err(value_err)
    }

    /// Returns `(model, vocab)`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, Vocab)> {
        let ckpt = Checkpoint::load(&path).map_err(value_err)?;
        Ok((
            Self {
                inner: ckpt.to_lm().map_err(value_err)?,
            },
            Vocab {
                inner: ckpt.vocab().map_err(value_err)?,
            },
        ))
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, serde_json::to_string(self.inner.config()).map_err(value_err)?)
    }
}

/// Language-model encoder with a concat-pooling classification head.
#[pyclass(name = "Classifier", module = "lmft_py", from_py_object)]
#[derive(Clone)]
struct Classifier {
    inner: TextClassifier<f32>,
}

impl Classifier {
    fn encode(&self, vocab: &Vocab, texts: &[String], labels: &[Vec<String>]) -> PyResult<EncodedDataset> {
        if texts.len() != labels.len() {
            return Err(value_err(format!("{} texts but {} label lists", texts.len(), labels.len())));
        }
        let known = self.inner.labels();
        let mut ids = Vec::with_capacity(labels.len());
        for set in labels {
            let mut row = Vec::with_capacity(set.len());
            for l in set {
                let id = known.iter().position(|k| k == l).ok_or_else(|| value_err(format!("unknown label `{l}`")))?;
                row.push(id);
            }
            row.sort_unstable();
            row.dedup();
            ids.push(row);
        }
        Ok(EncodedDataset {
            seqs: texts.iter().map(|t| self.inner.tokenize(&vocab.inner, &normalize_text(t))).collect(),
            labels: ids,
        })
    }
}

#[pymethods]
impl Classifier {
    /// `task` is `"binary"` or `"multilabel"`. Binary label lists must hold
    /// two labels; id 1 (the larger after sorting) is the positive class.
    #[new]
    #[pyo3(signature = (lm, task, labels, hidden = 50, dropout = 0.1, max_len = 400, seed = 0))]
    fn new(lm: &LanguageModel, task: &str, mut labels: Vec<String>, hidden: usize, dropout: f64, max_len: usize, seed: u64) -> PyResult<Self> {
        let kind: TaskKind = task.parse().map_err(value_err)?;
        labels.sort();
        labels.dedup();
        let head = HeadConfig { hidden, dropout, max_len };
        let inner = TextClassifier::new(lm.inner.clone(), head, kind, labels, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Gradual unfreezing with discriminative learning rates. Returns the run
    /// log; the parameters of the best validation epoch are kept.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (vocab, texts, labels, valid_texts, valid_labels, epochs = 5, lr = 0.05, batch_size = 128, seed = 0, factor = 2.6))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        vocab: &Vocab,
        texts: Vec<String>,
        labels: Vec<Vec<String>>,
        valid_texts: Vec<String>,
        valid_labels: Vec<Vec<String>>,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
        factor: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let train = self.encode(vocab, &texts, &labels)?;
        let valid = self.encode(vocab, &valid_texts, &valid_labels)?;
        let cfg = TrainRunConfig {
            epochs,
            lr,
            batch_size,
            seed,
            discriminative_factor: factor,
            ..TrainRunConfig::clf_finetune()
        };
        let log = clf_train(&mut self.inner, &train, &valid, &cfg, &mut |_, _| {}).map_err(train_err)?;
        run_log(py, &log)
    }

    /// Class probabilities (binary) or per-label sigmoids (multi-label).
    #[pyo3(signature = (vocab, texts, batch_size = 64))]
    fn scores(&self, vocab: &Vocab, texts: Vec<String>, batch_size: usize) -> PyResult<Vec<Vec<f64>>> {
        let seqs: Vec<Vec<u32>> = texts.iter().map(|t| self.inner.tokenize(&vocab.inner, &normalize_text(t))).collect();
        self.inner.scores(&seqs, batch_size).map_err(value_err)
    }

    /// One dict per text with the predicted label(s) and scores.
    #[pyo3(signature = (vocab, texts, batch_size = 64))]
    fn predict<'py>(&self, py: Python<'py>, vocab: &Vocab, texts: Vec<String>, batch_size: usize) -> PyResult<Bound<'py, PyAny>> {
        let preds = self.inner.predict(&vocab.inner, &normalized(&texts), batch_size).map_err(value_err)?;
        json(py, serde_json::to_string(&preds).map_err(value_err)?)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.task_kind().to_string()
    }

    fn save(&self, path: PathBuf, vocab: &Vocab) -> PyResult<()> {
        Checkpoint::from_classifier(&self.inner, &vocab.inner).save(&path).map_err(value_err)
    }

    /// Returns `(classifier, vocab)`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, Vocab)> {
        let ckpt = Checkpoint::load(&path).map_err(value_err)?;
        Ok((
            Self {
                inner: ckpt.to_classifier().map_err(value_err)?,
            },
            Vocab {
                inner: ckpt.vocab().map_err(value_err)?,
            },
        ))
    }
}

#[pyfunction]
#[pyo3(signature = (preds, gold, positive = 1))]
fn binary_f1(preds: Vec<usize>, gold: Vec<usize>, positive: usize) -> PyResult<f64> {
    lmft::metrics::binary_f1(&preds, &gold, positive).map_err(value_err)
}

#[pyfunction]
fn mean_f1(preds: Vec<usize>, gold: Vec<usize>) -> PyResult<f64> {
    lmft::metrics::mean_f1(&preds, &gold).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (scores, gold, k = 5))]
fn ndcg_at_k(scores: Vec<Vec<f64>>, gold: Vec<Vec<usize>>, k: usize) -> PyResult<f64> {
    lmft::metrics::ndcg_at_k(&scores, &gold, k).map_err(value_err)
}

#[pymodule]
fn lmft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocab>()?;
    m.add_class::<LanguageModel>()?;
    m.add_class::<Classifier>()?;
    m.add_function(wrap_pyfunction!(binary_f1, m)?)?;
    m.add_function(wrap_pyfunction!(mean_f1, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    Ok(())
}
