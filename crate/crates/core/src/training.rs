//! Optimizer and training loops.
//!
//! The optimizer is RAdam wrapped in Lookahead. Three loops share it:
//! language-model pretraining, language-model fine-tuning with per-group
//! (discriminative) learning rates, and classifier fine-tuning with gradual
//! unfreezing from the top group down.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Float, Graph, ParamId, ParamStore, Tensor};
use crate::awd_lstm::{AwdLstm, HiddenState, Mode, ModelError};
use crate::classifier::{argmax, bucket_batches, TextClassifier};
use crate::corpus::{LabeledDataset, TaskKind};
use crate::metrics::{binary_f1, ndcg_at_k};
use crate::tokenizer::UnigramVocab;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("numerical fault in epoch {epoch}: {detail}")]
    Numerical { epoch: usize, detail: String },
    #[error("incompatible inputs: {0}")]
    Compatibility(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(ModelError::Autodiff(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Lookahead sync period.
    pub k: u64,
    /// Lookahead interpolation.
    pub alpha: f64,
}

impl Default for RangerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-5,
            k: 6,
            alpha: 0.5,
        }
    }
}

/// Moments, slow weights and step count of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub slow: Tensor<T>,
    pub step: u64,
}

/// RAdam with Lookahead. State is created lazily on a parameter's first step,
/// so parameters that are never stepped carry none.
#[derive(Clone, Debug)]
pub struct Ranger<T> {
    config: RangerConfig,
    states: Vec<Option<ParamState<T>>>,
}

impl<T: Float> Ranger<T> {
    pub fn new(config: RangerConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
        }
    }

    pub fn config(&self) -> &RangerConfig {
        &self.config
    }

    pub fn state(&self, id: ParamId) -> Option<&ParamState<T>> {
        self.states.get(id.0).and_then(|s| s.as_ref())
    }

    /// Applies one update to each `(param, lr)` pair using the gradients held
    /// in `store`. Non-finite gradients refuse the whole step.
    pub fn step(&mut self, store: &mut ParamStore<T>, updates: &[(ParamId, f64)]) -> Result<(), String> {
        for &(id, _) in updates {
            if !store.grad(id).is_finite() {
                return Err(format!("non-finite gradient for {}", store.name(id)));
            }
        }
        if self.states.len() < store.len() {
            self.states.resize(store.len(), None);
        }
        let c = self.config;
        for &(id, lr) in updates {
            let state = self.states[id.0].get_or_insert_with(|| {
                let value = store.value(id);
                ParamState {
                    m: Tensor::zeros(value.shape()),
                    v: Tensor::zeros(value.shape()),
                    slow: value.clone(),
                    step: 0,
                }
            });
            state.step += 1;
            let (value, grad) = store.value_and_grad_mut(id);
            radam_update(&c, lr, state, value, grad);
            if state.step.is_multiple_of(c.k) {
                lookahead_sync(c.alpha, &mut state.slow, value);
            }
        }
        Ok(())
    }
}

/// One RAdam update with step count `state.step` (already incremented).
pub fn radam_update<T: Float>(c: &RangerConfig, lr: f64, state: &mut ParamState<T>, value: &mut Tensor<T>, grad: &Tensor<T>) {
    let t = state.step as f64;
    let (b1, b2) = (c.beta1, c.beta2);
    let bias1 = 1.0 - b1.powf(t);
    let bias2 = 1.0 - b2.powf(t);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bias2;
    let rect = if rho_t > 4.0 {
        Some(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
    } else {
        None
    };
    let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
    let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = tb1 * *m + ob1 * g;
        *v = tb2 * *v + ob2 * g * g;
        let m_hat = m.as_f64() / bias1;
        let delta = match rect {
            Some(r) => lr * r * m_hat / ((v.as_f64() / bias2).sqrt() + c.eps),
            None => lr * m_hat,
        };
        *p -= T::from_f64(delta);
    }
}

/// `slow ← slow + α(fast − slow)`, then `fast ← slow`.
pub fn lookahead_sync<T: Float>(alpha: f64, slow: &mut Tensor<T>, fast: &mut Tensor<T>) {
    let a = T::from_f64(alpha);
    for (s, f) in slow.data_mut().iter_mut().zip(fast.data_mut()) {
        *s += a * (*f - *s);
        *f = *s;
    }
}

/// Ordered parameter groups, bottom first.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGroups {
    pub groups: Vec<LayerGroup>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGroup {
    pub name: String,
    pub params: Vec<ParamId>,
    pub frozen: bool,
}

impl LayerGroups {
    pub fn new(groups: Vec<(String, Vec<ParamId>)>) -> Self {
        Self {
            groups: groups
                .into_iter()
                .map(|(name, params)| LayerGroup {
                    name,
                    params,
                    frozen: false,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// `base / factor^d` where `d` counts groups below the top one.
    pub fn discriminative_lrs(&self, base: f64, factor: f64) -> Vec<f64> {
        let n = self.groups.len();
        (0..n).map(|i| base / factor.powi((n - 1 - i) as i32)).collect()
    }

    /// Freezes everything except the top `n` groups and mirrors the flags
    /// into `requires_grad`.
    pub fn unfreeze_top<T: Float>(&mut self, n: usize, store: &mut ParamStore<T>) {
        let total = self.groups.len();
        for (i, g) in self.groups.iter_mut().enumerate() {
            g.frozen = i + n.min(total) < total;
            for &id in &g.params {
                store.set_requires_grad(id, !g.frozen);
            }
        }
    }

    pub fn trainable(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.frozen).map(|g| g.name.as_str()).collect()
    }

    /// `(param, lr)` pairs for every unfrozen parameter.
    pub fn updates(&self, lrs: &[f64]) -> Vec<(ParamId, f64)> {
        self.groups
            .iter()
            .zip(lrs)
            .filter(|(g, _)| !g.frozen)
            .flat_map(|(g, &lr)| g.params.iter().map(move |&id| (id, lr)))
            .collect()
    }
}

/// Number of groups trained at (1-based) `epoch` under gradual unfreezing.
pub fn unfrozen_groups(epoch: usize, n_groups: usize) -> usize {
    epoch.min(n_groups)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    LmFinetune,
    ClfFinetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub bptt_len: usize,
    pub seed: u64,
    pub discriminative_factor: f64,
    pub clip_norm: f64,
    pub ranger: RangerConfig,
    /// Classifier stage: also score the training set after each epoch.
    pub eval_train: bool,
}

impl TrainRunConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            epochs: 10,
            lr: 0.001,
            batch_size: 128,
            bptt_len: 70,
            seed: 0,
            discriminative_factor: 2.6,
            clip_norm: 0.25,
            ranger: RangerConfig::default(),
            eval_train: false,
        }
    }

    pub fn lm_finetune() -> Self {
        Self {
            stage: Stage::LmFinetune,
            ..Self::pretrain()
        }
    }

    pub fn clf_finetune() -> Self {
        Self {
            stage: Stage::ClfFinetune,
            epochs: 5,
            lr: 0.05,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.bptt_len == 0 {
            return Err(TrainError::Config("epochs, batch_size and bptt_len must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.discriminative_factor > 0.0) {
            return Err(TrainError::Config("lr, clip_norm and discriminative_factor must be positive".into()));
        }
        let r = &self.ranger;
        if !(0.0..1.0).contains(&r.beta1) || !(0.0..1.0).contains(&r.beta2) || r.k == 0 || !(0.0..=1.0).contains(&r.alpha) {
            return Err(TrainError::Config("optimizer constants out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Perplexity for LM stages, the task metric for the classifier stage.
    pub valid_metric: f64,
    pub valid_loss: f64,
    pub train_accuracy: Option<f64>,
    pub trainable_groups: Vec<String>,
    pub group_lrs: Vec<(String, f64)>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub stage: Stage,
    pub metric: String,
    /// Validation metric before the first update.
    pub baseline: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl RunLog {
    pub fn best(&self) -> Option<&EpochLog> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

/// One BPTT segment, both `[time, batch]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub time: usize,
    pub batch: usize,
}

/// Splits a token stream column-wise into `batch_size` parallel streams
/// (dropping the remainder) and cuts them into consecutive segments of at most
/// `bptt_len` steps, targets shifted by one.
pub fn bptt_batches(stream: &[u32], batch_size: usize, bptt_len: usize) -> Result<Vec<Segment>, TrainError> {
    if batch_size == 0 || bptt_len == 0 {
        return Err(TrainError::Usage("batch_size and bptt_len must be positive".into()));
    }
    if stream.len() < batch_size * 2 {
        return Err(TrainError::Usage(format!(
            "stream of {} tokens is too short for batch size {batch_size}",
            stream.len()
        )));
    }
    let cols = stream.len() / batch_size;
    let at = |b: usize, t: usize| stream[b * cols + t];
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < cols {
        let time = bptt_len.min(cols - 1 - start);
        let mut inputs = Vec::with_capacity(time * batch_size);
        let mut targets = Vec::with_capacity(time * batch_size);
        for t in start..start + time {
            for b in 0..batch_size {
                inputs.push(at(b, t));
                targets.push(at(b, t + 1));
            }
        }
        out.push(Segment {
            inputs,
            targets,
            time,
            batch: batch_size,
        });
        start += time;
    }
    Ok(out)
}

/// Rescales gradients of `ids` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(store: &mut ParamStore<T>, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = store.grad_norm(ids);
    if norm.is_finite() && norm > max_norm {
        let s = T::from_f64(max_norm / (norm + 1e-6));
        for &id in ids {
            store.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Concatenates the marker-wrapped encodings of `texts`.
pub fn tokenize_stream<'a>(vocab: &UnigramVocab, texts: impl IntoIterator<Item = &'a str>) -> Vec<u32> {
    texts.into_iter().flat_map(|t| vocab.encode(t, true)).collect()
}

fn snapshot<T: Float>(store: &ParamStore<T>) -> Vec<Tensor<T>> {
    store.ids().map(|id| store.value(id).clone()).collect()
}

fn restore<T: Float>(store: &mut ParamStore<T>, values: &[Tensor<T>]) {
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        *store.value_mut(id) = v.clone();
    }
}

/// Language-model pretraining: every group at the base learning rate.
pub fn lm_pretrain<T: Float>(
    model: &mut AwdLstm<T>,
    train: &[u32],
    valid: &[u32],
    cfg: &TrainRunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &RunLog),
) -> Result<RunLog, TrainError> {
    lm_loop(model, train, valid, cfg, 1.0, on_epoch)
}

/// Language-model fine-tuning on target texts with discriminative learning
/// rates. The vocabulary must be the one the model was trained with.
pub fn lm_finetune<T: Float>(
    model: &mut AwdLstm<T>,
    vocab: &UnigramVocab,
    train_texts: &[String],
    valid_texts: &[String],
    cfg: &TrainRunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &RunLog),
) -> Result<RunLog, TrainError> {
    if vocab.len() != model.config().vocab_size {
        return Err(TrainError::Compatibility(format!(
            "vocabulary has {} pieces, model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let train = tokenize_stream(vocab, train_texts.iter().map(String::as_str));
    let valid = tokenize_stream(vocab, valid_texts.iter().map(String::as_str));
    lm_loop(model, &train, &valid, cfg, cfg.discriminative_factor, on_epoch)
}

fn lm_loop<T: Float>(
    model: &mut AwdLstm<T>,
    train: &[u32],
    valid: &[u32],
    cfg: &TrainRunConfig,
    factor: f64,
    on_epoch: &mut dyn FnMut(&EpochLog, &RunLog),
) -> Result<RunLog, TrainError> {
    cfg.validate()?;
    let segments = bptt_batches(train, cfg.batch_size, cfg.bptt_len)?;
    let mut groups = LayerGroups::new(model.layer_groups());
    groups.unfreeze_top(groups.len(), model.store_mut());
    let lrs = groups.discriminative_lrs(cfg.lr, factor);
    let updates = groups.updates(&lrs);
    let ids: Vec<ParamId> = updates.iter().map(|u| u.0).collect();
    let mut opt = Ranger::new(cfg.ranger);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let baseline = model.evaluate_stream(valid, cfg.batch_size)?.perplexity;
    let mut log = RunLog {
        stage: cfg.stage,
        metric: "perplexity".into(),
        baseline,
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, Vec<Tensor<T>>)> = None;
    let initial = snapshot(model.store());

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut state = HiddenState::zeros(model.config(), cfg.batch_size);
        let mut total = 0.0;
        let mut count = 0usize;
        for seg in &segments {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &seg.inputs, seg.time, &state, Mode::Train, &mut rng)?;
            let targets: Vec<usize> = seg.targets.iter().map(|&t| t as usize).collect();
            let loss = g.cross_entropy(out.logits, &targets)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return abort(model, &best, &initial, epoch, format!("training loss is {lv}"));
            }
            let grads = g.backward(loss)?;
            let store = model.store_mut();
            store.zero_grad();
            grads.accumulate_into(store);
            let norm = clip_grad_norm(store, &ids, cfg.clip_norm);
            if !norm.is_finite() {
                return abort(model, &best, &initial, epoch, format!("gradient norm is {norm}"));
            }
            if let Err(detail) = opt.step(store, &updates) {
                return abort(model, &best, &initial, epoch, detail);
            }
            total += lv * targets.len() as f64;
            count += targets.len();
            state = out.state;
        }
        let eval = model.evaluate_stream(valid, cfg.batch_size)?;
        if !eval.perplexity.is_finite() {
            return abort(model, &best, &initial, epoch, "validation perplexity is not finite".into());
        }
        let entry = EpochLog {
            epoch,
            train_loss: total / count as f64,
            valid_metric: eval.perplexity,
            valid_loss: eval.cross_entropy,
            train_accuracy: None,
            trainable_groups: groups.trainable().iter().map(|s| s.to_string()).collect(),
            group_lrs: groups.groups.iter().map(|g| g.name.clone()).zip(lrs.iter().cloned()).collect(),
            seconds: started.elapsed().as_secs_f64(),
        };
        if best.as_ref().is_none_or(|(b, _)| eval.perplexity < *b) {
            best = Some((eval.perplexity, snapshot(model.store())));
            log.best_epoch = epoch;
        }
        log.epochs.push(entry);
        on_epoch(log.epochs.last().unwrap(), &log);
    }
    if let Some((_, values)) = &best {
        restore(model.store_mut(), values);
    }
    model.store_mut().zero_grad();
    Ok(log)
}

fn abort<T: Float, M: HasStore<T>>(
    model: &mut M,
    best: &Option<(f64, Vec<Tensor<T>>)>,
    initial: &[Tensor<T>],
    epoch: usize,
    detail: String,
) -> Result<RunLog, TrainError> {
    let values = best.as_ref().map(|(_, v)| v.as_slice()).unwrap_or(initial);
    restore(model.store_mut(), values);
    model.store_mut().zero_grad();
    Err(TrainError::Numerical { epoch, detail })
}

trait HasStore<T> {
    fn store_mut(&mut self) -> &mut ParamStore<T>;
}

impl<T: Float> HasStore<T> for AwdLstm<T> {
    fn store_mut(&mut self) -> &mut ParamStore<T> {
        AwdLstm::store_mut(self)
    }
}

impl<T: Float> HasStore<T> for TextClassifier<T> {
    fn store_mut(&mut self) -> &mut ParamStore<T> {
        TextClassifier::store_mut(self)
    }
}

/// Tokenized classification data.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub seqs: Vec<Vec<u32>>,
    pub labels: Vec<Vec<usize>>,
}

impl EncodedDataset {
    pub fn new<T: Float>(clf: &TextClassifier<T>, vocab: &UnigramVocab, ds: &LabeledDataset) -> Self {
        Self {
            seqs: ds.examples.iter().map(|e| clf.tokenize(vocab, &e.text)).collect(),
            labels: ds.examples.iter().map(|e| e.labels.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

/// Task metric and mean loss of a classifier on a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClfEval {
    pub metric: f64,
    pub loss: f64,
    /// Binary: fraction of correct argmax classes. Multi-label: fraction of
    /// exact label-set matches at threshold 0.5.
    pub accuracy: f64,
}

/// Positive-class F1 (class id 1) for binary tasks, nDCG@5 for multi-label.
pub fn evaluate_classifier<T: Float>(clf: &TextClassifier<T>, data: &EncodedDataset, batch_size: usize) -> Result<ClfEval, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Usage("empty evaluation set".into()));
    }
    let logits = clf.logits(&data.seqs, batch_size)?;
    let n = data.len() as f64;
    match clf.task_kind() {
        TaskKind::Binary => {
            let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
            let gold: Vec<usize> = data.labels.iter().map(|l| l[0]).collect();
            let loss = logits
                .iter()
                .zip(&gold)
                .map(|(l, &y)| -crate::classifier::softmax(l)[y].max(f64::MIN_POSITIVE).ln())
                .sum::<f64>()
                / n;
            let correct = preds.iter().zip(&gold).filter(|(p, g)| p == g).count() as f64;
            let metric = binary_f1(&preds, &gold, 1).map_err(|e| TrainError::Usage(e.to_string()))?;
            Ok(ClfEval {
                metric,
                loss,
                accuracy: correct / n,
            })
        }
        TaskKind::Multilabel => {
            let mut loss = 0.0;
            let mut exact = 0usize;
            let mut scores = Vec::with_capacity(logits.len());
            for (l, gold) in logits.iter().zip(&data.labels) {
                let s: Vec<f64> = l.iter().map(|&z| crate::classifier::sigmoid(z)).collect();
                for (j, &z) in l.iter().enumerate() {
                    let y = if gold.contains(&j) { 1.0 } else { 0.0 };
                    loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                }
                let predicted: Vec<usize> = (0..s.len()).filter(|&j| s[j] >= 0.5).collect();
                if &predicted == gold {
                    exact += 1;
                }
                scores.push(s);
            }
            let metric = ndcg_at_k(&scores, &data.labels, 5).map_err(|e| TrainError::Usage(e.to_string()))?;
            Ok(ClfEval {
                metric,
                loss: loss / (n * clf.n_out() as f64),
                accuracy: exact as f64 / n,
            })
        }
    }
}

/// Classifier fine-tuning with gradual unfreezing: epoch `e` trains the top
/// `min(e, groups)` groups, each at its discriminative learning rate.
pub fn clf_train<T: Float>(
    clf: &mut TextClassifier<T>,
    train: &EncodedDataset,
    valid: &EncodedDataset,
    cfg: &TrainRunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &RunLog),
) -> Result<RunLog, TrainError> {
    clf_train_observed(clf, train, valid, cfg, &mut |e, run, _| on_epoch(e, run))
}

/// [`clf_train`] whose callback also sees the parameters as they stand at the
/// end of each epoch.
pub fn clf_train_observed<T: Float>(
    clf: &mut TextClassifier<T>,
    train: &EncodedDataset,
    valid: &EncodedDataset,
    cfg: &TrainRunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &RunLog, &ParamStore<T>),
) -> Result<RunLog, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Usage("empty training set".into()));
    }
    for labels in train.labels.iter().chain(&valid.labels) {
        let bad = match clf.task_kind() {
            TaskKind::Binary => labels.len() != 1 || labels[0] >= 2,
            TaskKind::Multilabel => labels.iter().any(|&l| l >= clf.n_out()),
        };
        if bad {
            return Err(TrainError::Config(format!(
                "label set {labels:?} does not fit a {} head with {} outputs",
                clf.task_kind(),
                clf.n_out()
            )));
        }
    }
    let mut groups = LayerGroups::new(clf.layer_groups());
    let lrs = groups.discriminative_lrs(cfg.lr, cfg.discriminative_factor);
    let mut opt = Ranger::new(cfg.ranger);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lengths: Vec<usize> = train.seqs.iter().map(Vec::len).collect();
    let metric_name = match clf.task_kind() {
        TaskKind::Binary => "pos_f1",
        TaskKind::Multilabel => "ndcg@5",
    };
    let baseline = evaluate_classifier(clf, valid, cfg.batch_size)?.metric;
    let mut log = RunLog {
        stage: cfg.stage,
        metric: metric_name.into(),
        baseline,
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, Vec<Tensor<T>>)> = None;
    let initial = snapshot(clf.store());

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        groups.unfreeze_top(unfrozen_groups(epoch, groups.len()), clf.store_mut());
        let updates = groups.updates(&lrs);
        let ids: Vec<ParamId> = updates.iter().map(|u| u.0).collect();
        let mut total = 0.0;
        for batch in bucket_batches(&lengths, cfg.batch_size, &mut rng) {
            let seqs: Vec<&[u32]> = batch.iter().map(|&i| train.seqs[i].as_slice()).collect();
            let mut g = Graph::new();
            let logits = clf.forward(&mut g, &seqs, Mode::Train, &mut rng)?;
            let loss = match clf.task_kind() {
                TaskKind::Binary => {
                    let y: Vec<usize> = batch.iter().map(|&i| train.labels[i][0]).collect();
                    g.cross_entropy(logits, &y)?
                }
                TaskKind::Multilabel => {
                    let n = clf.n_out();
                    let mut y = Tensor::zeros(&[batch.len(), n]);
                    for (row, &i) in batch.iter().enumerate() {
                        for &l in &train.labels[i] {
                            y.data_mut()[row * n + l] = T::one();
                        }
                    }
                    g.bce_with_logits(logits, &y)?
                }
            };
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return abort(clf, &best, &initial, epoch, format!("training loss is {lv}"));
            }
            let grads = g.backward(loss)?;
            let store = clf.store_mut();
            store.zero_grad();
            grads.accumulate_into(store);
            let norm = clip_grad_norm(store, &ids, cfg.clip_norm);
            if !norm.is_finite() {
                return abort(clf, &best, &initial, epoch, format!("gradient norm is {norm}"));
            }
            if let Err(detail) = opt.step(store, &updates) {
                return abort(clf, &best, &initial, epoch, detail);
            }
            total += lv * batch.len() as f64;
        }
        let eval = evaluate_classifier(clf, valid, cfg.batch_size)?;
        let train_accuracy = if cfg.eval_train {
            Some(evaluate_classifier(clf, train, cfg.batch_size)?.accuracy)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            valid_metric: eval.metric,
            valid_loss: eval.loss,
            train_accuracy,
            trainable_groups: groups.trainable().iter().map(|s| s.to_string()).collect(),
            group_lrs: groups
                .groups
                .iter()
                .zip(&lrs)
                .filter(|(g, _)| !g.frozen)
                .map(|(g, &lr)| (g.name.clone(), lr))
                .collect(),
            seconds: started.elapsed().as_secs_f64(),
        };
        if best.as_ref().is_none_or(|(b, _)| eval.metric > *b) {
            best = Some((eval.metric, snapshot(clf.store())));
            log.best_epoch = epoch;
        }
        log.epochs.push(entry);
        on_epoch(log.epochs.last().unwrap(), &log, clf.store());
    }
    if let Some((_, values)) = &best {
        restore(clf.store_mut(), values);
    }
    let store = clf.store_mut();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.set_requires_grad(id, true);
    }
    store.zero_grad();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::awd_lstm::{DropoutRates, LMConfig};
    use crate::classifier::HeadConfig;

    #[test]
    fn bptt_small_example() {
        let stream: Vec<u32> = (0..10).collect();
        let segs = bptt_batches(&stream, 2, 2).unwrap();
        // streams [0..5) and [5..10)
        assert_eq!(segs.iter().map(|s| s.time).collect::<Vec<_>>(), [2, 2]);
        assert_eq!(segs[0].inputs, [0, 5, 1, 6]);
        assert_eq!(segs[0].targets, [1, 6, 2, 7]);
        assert_eq!(segs[1].inputs, [2, 7, 3, 8]);
        assert_eq!(segs[1].targets, [3, 8, 4, 9]);
        assert!(bptt_batches(&stream, 6, 2).is_err());
    }

    #[test]
    fn bptt_counting_identity() {
        for (len, batch, bptt) in [(10, 2, 2), (11, 3, 4), (1000, 7, 13), (64, 32, 5)] {
            let stream: Vec<u32> = (0..len).collect();
            let segs = bptt_batches(&stream, batch, bptt).unwrap();
            let targets: usize = segs.iter().map(|s| s.targets.len()).sum();
            assert_eq!(targets, batch * (len as usize / batch - 1));
            assert!(segs.iter().all(|s| s.time <= bptt));
            assert_eq!(segs, bptt_batches(&stream, batch, bptt).unwrap());
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[3], &[0.3, -1.0, 2.5]).unwrap());
        let before = store.value(id).clone();
        let mut opt = Ranger::new(RangerConfig::default());
        for _ in 0..20 {
            opt.step(&mut store, &[(id, 0.1)]).unwrap();
        }
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn first_step_is_plain_momentum() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(1.0));
        store.grad_mut(id).fill(1.0);
        let mut opt = Ranger::new(RangerConfig::default());
        opt.step(&mut store, &[(id, 0.01)]).unwrap();
        assert!((store.value(id).item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_refuses_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(1.0));
        store.grad_mut(id).fill(f64::NAN);
        let mut opt = Ranger::new(RangerConfig::default());
        assert!(opt.step(&mut store, &[(id, 0.01)]).is_err());
        assert_eq!(store.value(id).item(), 1.0);
        assert!(opt.state(id).is_none());
    }

    #[test]
    fn lookahead_degenerate_alphas() {
        let mut slow = Tensor::<f64>::scalar(1.0);
        let mut fast = Tensor::<f64>::scalar(3.0);
        lookahead_sync(1.0, &mut slow, &mut fast);
        assert_eq!((slow.item(), fast.item()), (3.0, 3.0));
        let mut slow = Tensor::<f64>::scalar(1.0);
        let mut fast = Tensor::<f64>::scalar(3.0);
        lookahead_sync(0.0, &mut slow, &mut fast);
        assert_eq!((slow.item(), fast.item()), (1.0, 1.0));
    }

    #[test]
    fn discriminative_rates() {
        let groups = LayerGroups::new(
            ["emb", "lstm1", "lstm2", "lstm3"]
                .iter()
                .map(|n| (n.to_string(), vec![]))
                .collect(),
        );
        let lrs = groups.discriminative_lrs(0.001, 2.6);
        assert_eq!(lrs[3], 0.001);
        assert!((lrs[2] - 0.000385).abs() < 1e-6);
        assert!((lrs[1] - 0.000148).abs() < 1e-6);
        assert!((lrs[0] - 0.0000569).abs() < 1e-7);
        assert!(groups.discriminative_lrs(0.001, 1.0).iter().all(|&l| l == 0.001));
    }

    #[test]
    fn unfreeze_schedule() {
        for e in 1..=8 {
            assert_eq!(unfrozen_groups(e, 5), e.min(5));
        }
        let mut store = ParamStore::<f64>::new();
        let ids: Vec<ParamId> = (0..5).map(|i| store.add(format!("p{i}"), Tensor::scalar(0.0))).collect();
        let mut groups = LayerGroups::new(
            ids.iter().enumerate().map(|(i, &id)| (format!("g{i}"), vec![id])).collect(),
        );
        groups.unfreeze_top(2, &mut store);
        assert_eq!(groups.trainable(), ["g3", "g4"]);
        assert_eq!(
            ids.iter().map(|&id| store.requires_grad(id)).collect::<Vec<_>>(),
            [false, false, false, true, true]
        );
    }

    fn tiny_config() -> LMConfig {
        LMConfig {
            vocab_size: 12,
            embedding_dim: 6,
            hidden_dim: 8,
            n_layers: 3,
            dropout: DropoutRates::from_master(0.1),
            bptt_len: 4,
            batch_size: 2,
        }
    }

    #[test]
    fn pretrain_learns_a_cycle_and_is_deterministic() {
        let stream: Vec<u32> = (0..600).map(|i| 4 + (i % 5) as u32).collect();
        let cfg = TrainRunConfig {
            epochs: 3,
            lr: 0.01,
            batch_size: 4,
            bptt_len: 8,
            seed: 3,
            ..TrainRunConfig::pretrain()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut model = AwdLstm::<f32>::new(tiny_config(), &mut rng).unwrap();
            let mut seen = 0;
            let log = lm_pretrain(&mut model, &stream, &stream[..200], &cfg, &mut |_, _| seen += 1).unwrap();
            assert_eq!(seen, 3);
            log
        };
        let a = run();
        let b = run();
        assert_eq!(a.epochs[0].train_loss, b.epochs[0].train_loss);
        assert!(a.best().unwrap().valid_metric < a.baseline);
        assert_eq!(a.epochs[0].group_lrs.len(), 4);
    }

    #[test]
    fn finetune_rejects_foreign_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = AwdLstm::<f32>::new(tiny_config(), &mut rng).unwrap();
        let vocab = UnigramVocab::from_pieces(vec![("a".into(), -1.0)]).unwrap();
        let err = lm_finetune(&mut model, &vocab, &[], &[], &TrainRunConfig::lm_finetune(), &mut |_, _| {});
        assert!(matches!(err, Err(TrainError::Compatibility(_))));
    }

    #[test]
    fn clf_epoch_one_freezes_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lm = AwdLstm::<f32>::new(tiny_config(), &mut rng).unwrap();
        let mut clf = TextClassifier::new(lm, HeadConfig::default(), TaskKind::Binary, vec!["0".into(), "1".into()], &mut rng).unwrap();
        let data = EncodedDataset {
            seqs: (0..16).map(|i| vec![2, 4 + (i % 2) as u32, 3]).collect(),
            labels: (0..16).map(|i| vec![i % 2]).collect(),
        };
        let encoder: Vec<ParamId> = clf.lm().layer_groups().into_iter().flat_map(|g| g.1).collect();
        let before: Vec<Tensor<f32>> = encoder.iter().map(|&id| clf.store().value(id).clone()).collect();
        let head_before = clf.store().value(clf.head().w1).clone();
        let cfg = TrainRunConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainRunConfig::clf_finetune()
        };
        let log = clf_train(&mut clf, &data, &data, &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(log.epochs[0].trainable_groups, ["head"]);
        for (id, b) in encoder.iter().zip(&before) {
            assert_eq!(clf.store().value(*id), b);
        }
        assert_ne!(clf.store().value(clf.head().w1), &head_before);
    }

    #[test]
    fn clf_rejects_mismatched_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lm = AwdLstm::<f32>::new(tiny_config(), &mut rng).unwrap();
        let mut clf = TextClassifier::new(lm, HeadConfig::default(), TaskKind::Binary, vec!["0".into(), "1".into()], &mut rng).unwrap();
        let data = EncodedDataset {
            seqs: vec![vec![2, 3]],
            labels: vec![vec![0, 1]],
        };
        let cfg = TrainRunConfig::clf_finetune();
        assert!(matches!(clf_train(&mut clf, &data, &data, &cfg, &mut |_, _| {}), Err(TrainError::Config(_))));
    }
}
