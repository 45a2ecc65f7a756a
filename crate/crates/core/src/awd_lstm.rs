//! Three-layer AWD-LSTM language model.
//!
//! Regularization follows the weight-dropped LSTM recipe: whole embedding rows
//! are dropped per batch, the recurrent matrices get a DropConnect mask that is
//! fixed for a whole BPTT segment, and activations between layers use locked
//! (variational) masks shared across time steps. The decoder reuses the
//! embedding matrix, so there is no separate output weight.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Float, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("{0}")]
    Usage(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-site dropout probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    /// Locked dropout on the top layer output, before the decoder.
    pub output: f64,
    /// Locked dropout between LSTM layers.
    pub hidden: f64,
    /// Whole-row dropout on the embedding matrix.
    pub embedding: f64,
    /// Locked dropout on the looked-up embeddings.
    pub input: f64,
    /// DropConnect on recurrent weights.
    pub weight: f64,
}

impl DropoutRates {
    /// Relative site ratios; `from_master` scales them so `hidden` equals the
    /// master rate.
    pub const RATIOS: DropoutRates = DropoutRates {
        output: 0.4,
        hidden: 0.3,
        embedding: 0.1,
        input: 0.6,
        weight: 0.5,
    };

    pub fn from_master(p: f64) -> Self {
        let s = p / Self::RATIOS.hidden;
        Self {
            output: Self::RATIOS.output * s,
            hidden: Self::RATIOS.hidden * s,
            embedding: Self::RATIOS.embedding * s,
            input: Self::RATIOS.input * s,
            weight: Self::RATIOS.weight * s,
        }
    }

    pub fn none() -> Self {
        Self::from_master(0.0)
    }

    fn all(&self) -> [(&'static str, f64); 5] {
        [
            ("output", self.output),
            ("hidden", self.hidden),
            ("embedding", self.embedding),
            ("input", self.input),
            ("weight", self.weight),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub dropout: DropoutRates,
    pub bptt_len: usize,
    pub batch_size: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32_000,
            embedding_dim: 400,
            hidden_dim: 1152,
            n_layers: 3,
            dropout: DropoutRates::from_master(0.3),
            bptt_len: 70,
            batch_size: 128,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers != 3 {
            return Err(ModelError::Config(format!("n_layers must be 3, got {}", self.n_layers)));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("bptt_len", self.bptt_len),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        for (name, p) in self.dropout.all() {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::Config(format!("{name} dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// `(input, output)` width of layer `l`; the top layer emits
    /// `embedding_dim` so the decoder can share the embedding matrix.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let input = if l == 0 { self.embedding_dim } else { self.hidden_dim };
        let output = if l + 1 == self.n_layers {
            self.embedding_dim
        } else {
            self.hidden_dim
        };
        (input, output)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmLayer {
    /// `[input, 4·hidden]`, gate blocks ordered input, forget, cell, output.
    pub w: ParamId,
    /// `[hidden, 4·hidden]`
    pub u: ParamId,
    /// `[4·hidden]`
    pub b: ParamId,
}

/// Per-layer `(h, c)` carried between BPTT segments. Plain tensors, so any
/// graph built from them starts fresh.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Float> HiddenState<T> {
    pub fn zeros(config: &LMConfig, batch: usize) -> Self {
        Self {
            layers: (0..config.n_layers)
                .map(|l| {
                    let h = config.layer_dims(l).1;
                    (Tensor::zeros(&[batch, h]), Tensor::zeros(&[batch, h]))
                })
                .collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.layers[0].0.shape()[0]
    }
}

/// Samples a keep mask: each entry is 1 with probability `1 - p`, else 0.
pub fn keep_mask<T: Float, R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { T::one() })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("mask length matches shape")
}

fn active(p: f64, mode: Mode) -> bool {
    mode == Mode::Train && p > 0.0
}

fn apply_mask<T: Float>(x: &Tensor<T>, mask: &Tensor<T>, p: f64) -> Tensor<T> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g
        .dropout(v, mask, T::from_f64(1.0 - p))
        .expect("mask shape is a suffix of the input shape");
    g.value(out).clone()
}

/// DropConnect on a recurrent matrix: every entry is zeroed with probability
/// `p`, survivors scaled by `1 / (1 - p)`.
pub fn weight_drop<T: Float, R: Rng + ?Sized>(u: &Tensor<T>, p: f64, mode: Mode, rng: &mut R) -> Tensor<T> {
    if !active(p, mode) {
        return u.clone();
    }
    apply_mask(u, &keep_mask(u.shape(), p, rng), p)
}

/// Variational dropout on `[time, batch, features]`: one `[batch, features]`
/// mask reused at every time step.
pub fn locked_dropout<T: Float, R: Rng + ?Sized>(x_seq: &Tensor<T>, p: f64, mode: Mode, rng: &mut R) -> Tensor<T> {
    if !active(p, mode) {
        return x_seq.clone();
    }
    let s = x_seq.shape();
    apply_mask(x_seq, &keep_mask(&s[1..], p, rng), p)
}

/// Drops whole rows of an embedding table.
pub fn embedding_dropout<T: Float, R: Rng + ?Sized>(table: &Tensor<T>, p: f64, mode: Mode, rng: &mut R) -> Tensor<T> {
    if !active(p, mode) {
        return table.clone();
    }
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let keep: Tensor<T> = keep_mask(&[rows], p, rng);
    let mut mask = Tensor::zeros(&[rows, d]);
    for (r, &k) in keep.data().iter().enumerate() {
        mask.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|m| *m = k);
    }
    apply_mask(table, &mask, p)
}

/// Expands a per-vocabulary-row keep vector to the rows looked up by `ids`.
pub(crate) fn row_mask<T: Float>(keep: &Tensor<T>, ids: &[usize], width: usize) -> Tensor<T> {
    let mut mask = Tensor::zeros(&[ids.len(), width]);
    for (row, &id) in ids.iter().enumerate() {
        let k = keep.data()[id];
        mask.data_mut()[row * width..(row + 1) * width]
            .iter_mut()
            .for_each(|m| *m = k);
    }
    mask
}

/// One LSTM step from precomputed gate pre-activations `[batch, 4·hidden]`.
pub fn lstm_gates_step<T: Float>(g: &mut Graph<T>, gates: Var, c: Var) -> Result<(Var, Var), AutodiffError> {
    let width = g.shape(gates)[1] / 4;
    let i_pre = g.slice(gates, 1, 0, width)?;
    let f_pre = g.slice(gates, 1, width, 2 * width)?;
    let g_pre = g.slice(gates, 1, 2 * width, 3 * width)?;
    let o_pre = g.slice(gates, 1, 3 * width, 4 * width)?;
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let cand = g.tanh(g_pre);
    let o = g.sigmoid(o_pre);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// `i, f, o = σ(·)`, `g = tanh(·)` of `x·W + h·U + b`;
/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_cell<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    h: Var,
    c: Var,
    w: Var,
    u_dropped: Var,
    b: Var,
) -> Result<(Var, Var), AutodiffError> {
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u_dropped)?;
    let pre = g.add(xw, hu)?;
    let gates = g.add(pre, b)?;
    lstm_gates_step(g, gates, c)
}

/// Output of a forward pass recorded on a graph.
#[derive(Debug)]
pub struct LmOutput<T> {
    /// `[time·batch, vocab]`, row `t·batch + b`.
    pub logits: Var,
    pub state: HiddenState<T>,
}

#[derive(Debug)]
pub struct EncoderOutput<T> {
    /// Top-layer outputs, `[time·batch, embedding_dim]`.
    pub hidden: Var,
    pub state: HiddenState<T>,
}

/// The language model: configuration plus its parameters.
#[derive(Clone, Debug)]
pub struct AwdLstm<T> {
    config: LMConfig,
    store: ParamStore<T>,
    embedding: ParamId,
    layers: Vec<LstmLayer>,
    decoder_bias: ParamId,
}

impl<T: Float> AwdLstm<T> {
    /// Random initialization: embeddings `U(-0.1, 0.1)`, LSTM weights
    /// `U(±1/√hidden)`, forget-gate bias 1, other biases 0.
    pub fn new<R: Rng + ?Sized>(config: LMConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let uniform = |shape: &[usize], bound: f64, rng: &mut R| -> Tensor<T> {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        let embedding = store.add(
            "embedding",
            uniform(&[config.vocab_size, config.embedding_dim], 0.1, rng),
        );
        let mut layers = Vec::new();
        for l in 0..config.n_layers {
            let (input, hidden) = config.layer_dims(l);
            let bound = 1.0 / (hidden as f64).sqrt();
            let w = store.add(format!("lstm{}.w", l + 1), uniform(&[input, 4 * hidden], bound, rng));
            let u = store.add(format!("lstm{}.u", l + 1), uniform(&[hidden, 4 * hidden], bound, rng));
            let mut bias = Tensor::zeros(&[4 * hidden]);
            bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
            let b = store.add(format!("lstm{}.b", l + 1), bias);
            layers.push(LstmLayer { w, u, b });
        }
        let decoder_bias = store.add("decoder.bias", Tensor::zeros(&[config.vocab_size]));
        Ok(Self {
            config,
            store,
            embedding,
            layers,
            decoder_bias,
        })
    }

    /// Rebinds a model to an existing parameter store (e.g. one read from a
    /// checkpoint). Names and shapes must match the configuration.
    pub fn from_store(config: LMConfig, store: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
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
        let embedding = find("embedding", &[config.vocab_size, config.embedding_dim])?;
        let mut layers = Vec::new();
        for l in 0..config.n_layers {
            let (input, hidden) = config.layer_dims(l);
            layers.push(LstmLayer {
                w: find(&format!("lstm{}.w", l + 1), &[input, 4 * hidden])?,
                u: find(&format!("lstm{}.u", l + 1), &[hidden, 4 * hidden])?,
                b: find(&format!("lstm{}.b", l + 1), &[4 * hidden])?,
            });
        }
        let decoder_bias = find("decoder.bias", &[config.vocab_size])?;
        Ok(Self {
            config,
            store,
            embedding,
            layers,
            decoder_bias,
        })
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn set_dropout(&mut self, dropout: DropoutRates) -> Result<(), ModelError> {
        let mut c = self.config.clone();
        c.dropout = dropout;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn layers(&self) -> &[LstmLayer] {
        &self.layers
    }

    pub fn decoder_bias(&self) -> ParamId {
        self.decoder_bias
    }

    /// Parameter groups from the bottom up: embedding, one per LSTM layer.
    /// The decoder bias travels with the top layer.
    pub fn layer_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = vec![("embedding".to_string(), vec![self.embedding])];
        for (l, layer) in self.layers.iter().enumerate() {
            let mut ids = vec![layer.w, layer.u, layer.b];
            if l + 1 == self.layers.len() {
                ids.push(self.decoder_bias);
            }
            groups.push((format!("lstm{}", l + 1), ids));
        }
        groups
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Runs the embedding and the three LSTM layers over `tokens`
    /// (`[time, batch]`, row-major) and returns the top-layer outputs.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        tokens: &[u32],
        time: usize,
        state: &HiddenState<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<EncoderOutput<T>, ModelError> {
        let batch = state.batch();
        if tokens.len() != time * batch || time == 0 {
            return Err(ModelError::Usage(format!(
                "{} tokens do not form a [{time}, {batch}] batch",
                tokens.len()
            )));
        }
        if state.layers.len() != self.layers.len() {
            return Err(ModelError::Usage("hidden state has the wrong number of layers".into()));
        }
        self.check_tokens(tokens)?;
        let d = self.config.dropout;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();

        let table = g.param(&self.store, self.embedding);
        let mut x = g.embedding(table, &ids)?;
        if active(d.embedding, mode) {
            // row dropout on the table, realised on the looked-up rows
            let keep: Tensor<T> = keep_mask(&[self.config.vocab_size], d.embedding, rng);
            let mask = row_mask(&keep, &ids, self.config.embedding_dim);
            x = g.dropout(x, &mask, T::from_f64(1.0 - d.embedding))?;
        }
        x = self.locked(g, x, time, batch, d.input, mode, rng)?;

        let mut next_state = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (_, hidden) = self.config.layer_dims(l);
            let w = g.param(&self.store, layer.w);
            let u = g.param(&self.store, layer.u);
            let b = g.param(&self.store, layer.b);
            let u = if active(d.weight, mode) {
                let mask = keep_mask(&[hidden, 4 * hidden], d.weight, rng);
                g.dropout(u, &mask, T::from_f64(1.0 - d.weight))?
            } else {
                u
            };
            let xw = g.matmul(x, w)?;
            let xw = g.add(xw, b)?;
            let (h0, c0) = &state.layers[l];
            let mut h = g.constant(h0.clone());
            let mut c = g.constant(c0.clone());
            let mut outputs = Vec::with_capacity(time);
            for t in 0..time {
                let xt = g.slice(xw, 0, t * batch, (t + 1) * batch)?;
                let hu = g.matmul(h, u)?;
                let gates = g.add(xt, hu)?;
                let (h_next, c_next) = lstm_gates_step(g, gates, c)?;
                h = h_next;
                c = c_next;
                outputs.push(h);
            }
            next_state.push((g.value(h).clone(), g.value(c).clone()));
            x = if outputs.len() == 1 {
                outputs[0]
            } else {
                g.concat(&outputs, 0)?
            };
            if l + 1 < self.layers.len() {
                x = self.locked(g, x, time, batch, d.hidden, mode, rng)?;
            }
        }
        Ok(EncoderOutput {
            hidden: x,
            state: HiddenState { layers: next_state },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn locked<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        time: usize,
        batch: usize,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, AutodiffError> {
        if !active(p, mode) {
            return Ok(x);
        }
        let width = g.shape(x)[1];
        let mask = keep_mask(&[batch, width], p, rng);
        let seq = g.reshape(x, &[time, batch, width])?;
        let dropped = g.dropout(seq, &mask, T::from_f64(1.0 - p))?;
        g.reshape(dropped, &[time * batch, width])
    }

    /// Full language-model pass: encoder, output locked dropout, tied decoder.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        tokens: &[u32],
        time: usize,
        state: &HiddenState<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<LmOutput<T>, ModelError> {
        let batch = state.batch();
        let enc = self.encode(g, tokens, time, state, mode, rng)?;
        let out = self.locked(g, enc.hidden, time, batch, self.config.dropout.output, mode, rng)?;
        let table = g.param(&self.store, self.embedding);
        let bias = g.param(&self.store, self.decoder_bias);
        let logits = g.matmul_bt(out, table)?;
        let logits = g.add(logits, bias)?;
        Ok(LmOutput {
            logits,
            state: enc.state,
        })
    }

    /// Mean next-token cross-entropy over a token stream in eval mode, and its
    /// exponential.
    pub fn evaluate_stream(&self, stream: &[u32], batch_size: usize) -> Result<LmEval, ModelError> {
        if stream.len() < 2 {
            return Err(ModelError::Usage("perplexity needs at least two tokens".into()));
        }
        let batch = batch_size.min(stream.len() / 2).max(1);
        let segments = crate::training::bptt_batches(stream, batch, self.config.bptt_len)
            .map_err(|e| ModelError::Usage(e.to_string()))?;
        let mut state = HiddenState::zeros(&self.config, batch);
        // eval mode draws no masks
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for seg in &segments {
            let mut g = Graph::new();
            let out = self.forward(&mut g, &seg.inputs, seg.time, &state, Mode::Eval, &mut rng)?;
            let targets: Vec<usize> = seg.targets.iter().map(|&t| t as usize).collect();
            let loss = g.cross_entropy(out.logits, &targets)?;
            total += g.value(loss).item().as_f64() * targets.len() as f64;
            count += targets.len();
            state = out.state;
        }
        let cross_entropy = total / count as f64;
        Ok(LmEval {
            cross_entropy,
            perplexity: cross_entropy.exp(),
            tokens: count,
        })
    }

    /// `exp` of the mean next-token cross-entropy over `stream`.
    pub fn perplexity(&self, stream: &[u32]) -> Result<f64, ModelError> {
        Ok(self.evaluate_stream(stream, self.config.batch_size)?.perplexity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmEval {
    pub cross_entropy: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(vocab: usize) -> LMConfig {
        LMConfig {
            vocab_size: vocab,
            embedding_dim: 8,
            hidden_dim: 12,
            n_layers: 3,
            dropout: DropoutRates::from_master(0.3),
            bptt_len: 5,
            batch_size: 2,
        }
    }

    #[test]
    fn master_rate_scaling() {
        let d = DropoutRates::from_master(0.3);
        assert!((d.hidden - 0.3).abs() < 1e-15);
        assert!((d.output - 0.4).abs() < 1e-15);
        assert!((d.input - 0.6).abs() < 1e-15);
        assert!((d.weight - 0.5).abs() < 1e-15);
        assert!((d.embedding - 0.1).abs() < 1e-15);
        let mut c = tiny(10);
        c.dropout = DropoutRates::from_master(0.6);
        assert!(c.validate().is_err());
        c = tiny(10);
        c.n_layers = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn lstm_cell_zero_weights() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1]));
        let h = g.constant(Tensor::zeros(&[1, 1]));
        let w = g.constant(Tensor::zeros(&[1, 4]));
        let u = g.constant(Tensor::zeros(&[1, 4]));
        let b = g.constant(Tensor::zeros(&[4]));
        let c0 = g.constant(Tensor::zeros(&[1, 1]));
        let (h1, c1) = lstm_cell(&mut g, x, h, c0, w, u, b).unwrap();
        assert_eq!(g.value(h1).item(), 0.0);
        assert_eq!(g.value(c1).item(), 0.0);

        let c0 = g.constant(Tensor::full(&[1, 1], 1.0));
        let (h1, c1) = lstm_cell(&mut g, x, h, c0, w, u, b).unwrap();
        assert!((g.value(c1).item() - 0.5).abs() < 1e-15);
        assert!((g.value(h1).item() - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
        assert!((g.value(h1).item() - 0.23106).abs() < 1e-5);
    }

    #[test]
    fn lstm_cell_shape_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let h = g.constant(Tensor::zeros(&[1, 1]));
        let w = g.constant(Tensor::zeros(&[3, 4]));
        let u = g.constant(Tensor::zeros(&[1, 4]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(lstm_cell(&mut g, x, h, h, w, u, b).is_err());
    }

    #[test]
    fn dropout_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(weight_drop(&u, 0.0, Mode::Train, &mut rng), u);
        assert_eq!(weight_drop(&u, 0.9, Mode::Eval, &mut rng), u);
        let seq = Tensor::<f64>::full(&[3, 2, 2], 1.0);
        assert_eq!(locked_dropout(&seq, 0.0, Mode::Train, &mut rng), seq);
        assert_eq!(embedding_dropout(&u, 0.0, Mode::Train, &mut rng), u);
    }

    #[test]
    fn weight_drop_zero_fraction_within_binomial_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let u = Tensor::<f64>::full(&[100, 100], 1.0);
        let dropped = weight_drop(&u, 0.5, Mode::Train, &mut rng);
        let zeros = dropped.data().iter().filter(|&&v| v == 0.0).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((zeros - 5000.0).abs() <= 3.0 * sigma, "{zeros}");
        assert!(dropped.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn locked_dropout_reuses_mask_over_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = Tensor::<f64>::full(&[6, 4, 5], 1.0);
        let out = locked_dropout(&seq, 0.5, Mode::Train, &mut rng);
        let step = 4 * 5;
        for t in 1..6 {
            assert_eq!(&out.data()[..step], &out.data()[t * step..(t + 1) * step]);
        }
    }

    #[test]
    fn locked_dropout_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seq = Tensor::<f64>::from_f64(&[1, 1, 2], &[0.7, -1.3]).unwrap();
        let n = 10_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let out = locked_dropout(&seq, 0.3, Mode::Train, &mut rng);
            sum[0] += out.data()[0];
            sum[1] += out.data()[1];
        }
        for (s, x) in sum.iter().zip([0.7, -1.3]) {
            let mean = s / n as f64;
            assert!(((mean - x) / x).abs() < 0.02, "{mean} vs {x}");
        }
    }

    #[test]
    fn embedding_dropout_drops_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = Tensor::<f64>::full(&[50, 3], 1.0);
        let out = embedding_dropout(&table, 0.5, Mode::Train, &mut rng);
        for row in out.data().chunks(3) {
            assert!(row.iter().all(|&v| v == 0.0) || row.iter().all(|&v| v == 2.0));
        }
        let keep = Tensor::<f64>::from_f64(&[3], &[1.0, 0.0, 1.0]).unwrap();
        let mask = row_mask(&keep, &[1, 0, 1, 2], 2);
        assert_eq!(mask.data(), &[0., 0., 1., 1., 0., 0., 1., 1.]);
    }

    #[test]
    fn eval_is_deterministic_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = tiny(20);
        let model = AwdLstm::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let state = HiddenState::zeros(&cfg, 2);
        let tokens: Vec<u32> = (0..10).map(|i| (i * 7 % 20) as u32).collect();
        let run = |rng: &mut ChaCha8Rng| {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &tokens, 5, &state, Mode::Eval, rng).unwrap();
            let sm = g.softmax(out.logits);
            (g.value(out.logits).clone(), g.value(sm).clone())
        };
        let (a, sm) = run(&mut rng);
        let (b, _) = run(&mut rng);
        assert_eq!(a, b);
        for row in sm.data().chunks(20) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = tiny(20);
        cfg.dropout = DropoutRates::none();
        let model = AwdLstm::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let state = HiddenState::zeros(&cfg, 2);
        let tokens: Vec<u32> = (0..10).map(|i| (i * 3 % 20) as u32).collect();
        let mut g1 = Graph::new();
        let a = model.forward(&mut g1, &tokens, 5, &state, Mode::Train, &mut rng).unwrap();
        let mut g2 = Graph::new();
        let b = model.forward(&mut g2, &tokens, 5, &state, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g1.value(a.logits), g2.value(b.logits));
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn decoder_is_tied_to_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = tiny(6);
        cfg.dropout = DropoutRates::none();
        let mut model = AwdLstm::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let state = HiddenState::zeros(&cfg, 1);
        let logits = |m: &AwdLstm<f64>| {
            let mut g = Graph::new();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let out = m.forward(&mut g, &[1], 1, &state, Mode::Eval, &mut r).unwrap();
            g.value(out.logits).clone()
        };
        let before = logits(&model);
        let e = model.embedding();
        // only row 5 changes; token 1 is fed, so any change to logit 5 comes
        // through the decoder
        model.store_mut().value_mut(e).data_mut()[5 * 8] += 1.0;
        let after = logits(&model);
        assert_eq!(before.data()[..5], after.data()[..5]);
        assert_ne!(before.data()[5], after.data()[5]);
    }

    #[test]
    fn untrained_cross_entropy_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = LMConfig {
            vocab_size: 2000,
            embedding_dim: 32,
            hidden_dim: 48,
            batch_size: 4,
            bptt_len: 10,
            ..LMConfig::default()
        };
        let model = AwdLstm::<f32>::new(cfg, &mut rng).unwrap();
        let stream: Vec<u32> = (0..400).map(|_| rng.random_range(0..2000)).collect();
        let eval = model.evaluate_stream(&stream, 4).unwrap();
        let uniform = (2000f64).ln();
        assert!((eval.cross_entropy - uniform).abs() / uniform < 0.05);
        assert!((eval.perplexity - eval.cross_entropy.exp()).abs() < 1e-9);
        assert!(model.perplexity(&[1]).is_err());
    }

    #[test]
    fn token_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny(5);
        let model = AwdLstm::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let state = HiddenState::zeros(&cfg, 1);
        let mut g = Graph::new();
        assert_eq!(
            model.forward(&mut g, &[7], 1, &state, Mode::Eval, &mut rng).unwrap_err(),
            ModelError::TokenOutOfRange { id: 7, vocab_size: 5 }
        );
    }
}
