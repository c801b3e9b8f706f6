//! Loss functions, Adam with global-norm clipping, the teacher-forced
//! training loop with per-epoch greedy validation, and the binary
//! checkpoint format ("KIUT" magic, named f64 tensors, trailing JSON).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, split, tokenize, ReportSample, Vocab};
use crate::distiller::greedy_decode;
use crate::error::{Error, Result};
use crate::knowledge::{Lexicon, SymptomGraph};
use crate::metrics::bleu;
use crate::model::{KiutModel, ModelConfig, BOS_ID, EOS_ID, PAD_ID};
use crate::tensor::{uniform01, ParamStore, Tape, Tensor};

/// Training hyperparameters. The paper side of this system leaves the
/// optimizer unspecified; these defaults are the artifact's own.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the auxiliary symptom-probe loss.
    pub lambda_probe: f64,
    pub seed: u64,
    /// Global gradient-norm clip; None disables clipping.
    pub clip_norm: Option<f64>,
    /// Vocabulary frequency threshold.
    pub min_freq: usize,
    /// Co-occurrence rate above which two symptoms share a graph edge.
    pub graph_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 16,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_probe: 0.5,
            seed: 1,
            clip_norm: Some(5.0),
            min_freq: 3,
            graph_threshold: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.min_freq == 0 {
            return Err(Error::InvalidArg(
                "learning_rate, batch_size and min_freq must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArg("betas must lie in [0,1)".into()));
        }
        if self.eps <= 0.0 || self.lambda_probe < 0.0 {
            return Err(Error::InvalidArg(
                "eps must be positive and lambda_probe nonnegative".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::InvalidArg("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Mean negative log-probability of the target tokens over non-PAD
/// positions.
pub fn cross_entropy_loss(
    tape: &mut Tape,
    probabilities: &Tensor,
    targets: &[usize],
    pad_id: usize,
) -> Result<Tensor> {
    let active: Vec<bool> = targets.iter().map(|&t| t != pad_id).collect();
    tape.nll_mean(probabilities, targets, &active)
}

/// Mean binary cross-entropy of the probe probabilities against the
/// ground-truth symptom labels.
pub fn probe_loss(tape: &mut Tape, sp: &Tensor, labels: &[bool]) -> Result<Tensor> {
    tape.bce_mean(sp, labels)
}

// ── Adam ───────────────────────────────────────────────────────────────

/// First/second moment state, one slot per parameter in store order.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.values(id).len()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.values(id).len()]).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction, after optional global-norm
/// clipping of the gradients. Non-finite gradients abort with a diagnostic
/// naming the parameter.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &mut [Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    if grads.len() != ids.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), ids.len()),
        ));
    }
    for (id, grad) in ids.iter().zip(grads.iter()) {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NanGradient(store.name(*id).to_string()));
        }
    }
    if let Some(max_norm) = cfg.clip_norm {
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let scale = max_norm / norm;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (slot, (id, grad)) in ids.iter().zip(grads.iter()).enumerate() {
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        let values = store.values_mut(*id);
        for i in 0..grad.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ── Training loop ──────────────────────────────────────────────────────

/// Per-epoch log line.
#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bleu4: f64,
}

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
    /// Mean training loss of the freshly initialized model.
    pub initial_loss: f64,
    /// Validation BLEU-4 of the retained (best) checkpoint.
    pub best_val_bleu4: f64,
}

/// Teacher-forcing input/target pair for one sample, truncated to max_len.
fn teacher_pair(report: &str, vocab: &Vocab, max_len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut tokens = tokenize(report, vocab);
    tokens.truncate(max_len - 1);
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(BOS_ID);
    input.extend_from_slice(&tokens);
    let mut target = tokens;
    target.push(EOS_ID);
    (input, target)
}

/// Loss of one sample under the current parameters: CE plus, when the
/// clinical path is on, λ × probe BCE.
fn sample_loss(
    tape: &mut Tape,
    model: &KiutModel,
    features: &Tensor,
    input: &[usize],
    target: &[usize],
    labels: &[bool],
    lambda: f64,
) -> Result<Tensor> {
    let out = model.forward(tape, features, input)?;
    let ce = cross_entropy_loss(tape, &out.probs, target, PAD_ID)?;
    match out.sp {
        Some(sp) if lambda > 0.0 => {
            let aux = probe_loss(tape, &sp, labels)?;
            let scaled = tape.scale(&aux, lambda)?;
            tape.add(&ce, &scaled)
        }
        _ => Ok(ce),
    }
}

fn features_tensor(sample: &ReportSample) -> Result<Tensor> {
    let rows = sample.features.len();
    let cols = sample.features.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = sample.features.iter().flatten().copied().collect();
    Tensor::from_vec(vec![rows, cols], flat)
}

/// Greedy-decode a split and score BLEU-4 against the references.
fn validation_bleu4(model: &KiutModel, vocab: &Vocab, samples: &[&ReportSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut cands = Vec::with_capacity(samples.len());
    let mut refs = Vec::with_capacity(samples.len());
    for sample in samples {
        let features = features_tensor(sample)?;
        cands.push(greedy_decode(model, &features, model.config.max_len)?);
        refs.push(tokenize(&sample.report, vocab));
    }
    Ok(bleu(&cands, &refs, 4)?[3])
}

/// Train a model on the dataset's train split with teacher forcing,
/// validating by greedy BLEU-4 after every epoch and retaining the
/// best-validation parameters. Fully deterministic for a fixed config.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    samples: &[ReportSample],
    lexicon: &Lexicon,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainResult> {
    train_cfg.validate()?;
    let train_split = split(samples, "train");
    let val_split = split(samples, "val");
    if train_split.is_empty() {
        return Err(Error::InvalidArg("dataset has no train split".into()));
    }
    let vocab = build_vocab(&train_split, train_cfg.min_freq)?;

    let mut cfg = model_cfg.clone();
    cfg.vocab_size = vocab.size();
    cfg.symptoms = lexicon.len();
    let train_labels: Vec<Vec<bool>> = train_split.iter().map(|s| s.labels_bool()).collect();
    if train_labels.iter().any(|l| l.len() != cfg.symptoms) {
        return Err(Error::InvalidArg(
            "sample label width differs from lexicon size".into(),
        ));
    }
    let graph =
        SymptomGraph::from_cooccurrence(lexicon.names(), &train_labels, train_cfg.graph_threshold);
    let mut model = KiutModel::new(cfg, graph, train_cfg.seed)?;

    // Pre-tokenized pairs and feature tensors.
    let prepared: Vec<(Tensor, Vec<usize>, Vec<usize>, Vec<bool>)> = train_split
        .iter()
        .map(|s| {
            let (input, target) = teacher_pair(&s.report, &vocab, model.config.max_len);
            Ok((features_tensor(s)?, input, target, s.labels_bool()))
        })
        .collect::<Result<_>>()?;

    let initial_loss = {
        let mut total = 0.0;
        for (features, input, target, labels) in &prepared {
            let mut tape = Tape::inference();
            total += sample_loss(
                &mut tape,
                &model,
                features,
                input,
                target,
                labels,
                train_cfg.lambda_probe,
            )?
            .item();
        }
        total / prepared.len() as f64
    };

    let mut adam = AdamState::new(&model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(0x9E37_79B9));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut logs = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;

    for epoch in 1..=train_cfg.epochs {
        // Fisher–Yates driven by the shuffle stream.
        for i in (1..order.len()).rev() {
            let j = (uniform01(&mut shuffle_rng) * (i + 1) as f64) as usize % (i + 1);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            let mut tape = Tape::new();
            let mut batch_losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let (features, input, target, labels) = &prepared[idx];
                batch_losses.push(sample_loss(
                    &mut tape,
                    &model,
                    features,
                    input,
                    target,
                    labels,
                    train_cfg.lambda_probe,
                )?);
            }
            let mut total = batch_losses[0].clone();
            for l in &batch_losses[1..] {
                total = tape.add(&total, l)?;
            }
            let loss = tape.scale(&total, 1.0 / batch.len() as f64)?;
            epoch_loss += loss.item() * batch.len() as f64;
            let grads = tape.backward(&loss)?;
            let mut grads = tape.store_gradients(&model.params, &grads);
            adam_step(&mut model.params, &mut grads, &mut adam, train_cfg)?;
        }
        let train_loss = epoch_loss / prepared.len() as f64;
        let val_bleu4 = validation_bleu4(&model, &vocab, &val_split)?;
        let log = EpochLog {
            epoch,
            train_loss,
            val_bleu4,
        };
        on_epoch(&log);
        logs.push(log);
        let is_better = best.as_ref().map_or(true, |(b, _)| val_bleu4 > *b);
        if is_better {
            let snapshot = model
                .params
                .ids()
                .map(|id| model.params.values(id).to_vec())
                .collect();
            best = Some((val_bleu4, snapshot));
        }
    }

    let (best_val_bleu4, snapshot) = best.expect("at least one epoch ran");
    for (id, values) in model.params.ids().collect::<Vec<_>>().into_iter().zip(snapshot) {
        model.params.values_mut(id).copy_from_slice(&values);
    }
    let checkpoint = Checkpoint::from_model(&model, &vocab, adam.step_count());
    Ok(TrainResult {
        checkpoint,
        epochs: logs,
        initial_loss,
        best_val_bleu4,
    })
}

// ── Checkpoint ─────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"KIUT";
const VERSION: u32 = 1;

/// A trained model snapshot: config, named parameter tensors, vocabulary
/// and the optimizer step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub vocab_tokens: Vec<String>,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    vocab: Vec<String>,
    step: u64,
}

impl Checkpoint {
    pub fn from_model(model: &KiutModel, vocab: &Vocab, step: u64) -> Self {
        Checkpoint {
            config: model.config.clone(),
            tensors: model
                .params
                .iter()
                .map(|(name, shape, values)| {
                    (name.to_string(), shape.to_vec(), values.to_vec())
                })
                .collect(),
            vocab_tokens: vocab.tokens().to_vec(),
            step,
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_tokens(self.vocab_tokens.clone())
    }

    /// Rebuild the model: construct from the stored config (any seed — the
    /// values are overwritten) and copy every tensor back in by name.
    pub fn restore(&self, graph: SymptomGraph) -> Result<KiutModel> {
        let mut model = KiutModel::new(self.config.clone(), graph, 0)?;
        if self.tensors.len() != model.params.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for (name, shape, values) in &self.tensors {
            let id = model.params.id_of(name)?;
            if model.params.shape(id) != shape.as_slice()
                || model.params.values(id).len() != values.len()
            {
                return Err(Error::Corrupt(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    shape,
                    model.params.shape(id)
                )));
            }
            model.params.values_mut(id).copy_from_slice(values);
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in &ckpt.tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        config: ckpt.config.clone(),
        vocab: ckpt.vocab_tokens.clone(),
        step: ckpt.step,
    };
    out.extend_from_slice(serde_json::to_string(&meta)?.as_bytes());
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Corrupt("unexpected end of file".into()));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        // A non-KIUT header is reported as version 0 of the format.
        return Err(Error::VersionMismatch {
            found: 0,
            expected: VERSION,
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        tensors.push((name, shape, values));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&data[cur.pos..])
        .map_err(|e| Error::Corrupt(format!("trailing metadata: {e}")))?;
    let expected: usize = tensors.iter().map(|(_, _, v)| v.len()).sum();
    let got: usize = tensors.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
    if expected != got {
        return Err(Error::Corrupt("tensor payload size mismatch".into()));
    }
    Ok(Checkpoint {
        config: meta.config,
        tensors,
        vocab_tokens: meta.vocab,
        step: meta.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_lexicon, generate_dataset, GeneratorConfig};
    use crate::tensor::normal01;

    fn uniform_probs(rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(vec![rows, cols], vec![1.0 / cols as f64; rows * cols]).unwrap()
    }

    #[test]
    fn cross_entropy_hand_values() {
        let mut tape = Tape::inference();
        // Probability 1 on every target → loss 0.
        let onehot = Tensor::from_vec(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = cross_entropy_loss(&mut tape, &onehot, &[0, 1], PAD_ID).unwrap();
        assert!(loss.item().abs() < 1e-12);

        let uniform = uniform_probs(2, 4);
        let loss = cross_entropy_loss(&mut tape, &uniform, &[3, 2], PAD_ID).unwrap();
        assert!((loss.item() - 4.0_f64.ln()).abs() < 1e-12);

        // All-PAD targets are a contract violation.
        assert!(cross_entropy_loss(&mut tape, &uniform, &[PAD_ID, PAD_ID], PAD_ID).is_err());
    }

    #[test]
    fn probe_loss_hand_values() {
        let mut tape = Tape::inference();
        let half = Tensor::from_vec(vec![3], vec![0.5; 3]).unwrap();
        let loss = probe_loss(&mut tape, &half, &[true, false, true]).unwrap();
        assert!((loss.item() - 2.0_f64.ln()).abs() < 1e-12);

        let p = Tensor::from_vec(vec![1], vec![0.9]).unwrap();
        let loss = probe_loss(&mut tape, &p, &[true]).unwrap();
        assert!((loss.item() - 0.105360515657826).abs() < 1e-9);

        let saturated = Tensor::from_vec(vec![2], vec![1e-9, 1.0 - 1e-9]).unwrap();
        let loss = probe_loss(&mut tape, &saturated, &[false, true]).unwrap();
        assert!(loss.item() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let before = store.values(store.id_of("w").unwrap()).to_vec();
        let mut state = AdamState::new(&store);
        let mut grads = vec![vec![0.0; 3]];
        adam_step(&mut store, &mut grads, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(store.values(store.id_of("w").unwrap()), before.as_slice());
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::from_vec(vec![1], vec![0.0]).unwrap())
            .unwrap();
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            clip_norm: None,
            ..TrainConfig::default()
        };
        let mut grads = vec![vec![1.0]];
        adam_step(&mut store, &mut grads, &mut state, &cfg).unwrap();
        let w = store.values(store.id_of("w").unwrap())[0];
        assert!((w + 1e-3).abs() < 1e-8, "update was {w}");
    }

    #[test]
    fn adam_rejects_nan_gradients_and_is_deterministic() {
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::from_vec(vec![2], vec![0.1, 0.2]).unwrap())
            .unwrap();
        let mut state = AdamState::new(&store);
        let mut bad = vec![vec![f64::NAN, 0.0]];
        assert!(matches!(
            adam_step(&mut store, &mut bad, &mut state, &TrainConfig::default()),
            Err(Error::NanGradient(_))
        ));

        let run = || {
            let mut store = ParamStore::new();
            store
                .register("w", Tensor::from_vec(vec![2], vec![0.1, 0.2]).unwrap())
                .unwrap();
            let mut state = AdamState::new(&store);
            let cfg = TrainConfig::default();
            for step in 0..5 {
                let mut grads = vec![vec![0.3 * (step as f64 + 1.0), -0.1]];
                adam_step(&mut store, &mut grads, &mut state, &cfg).unwrap();
            }
            store.values(store.id_of("w").unwrap()).to_vec()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn adam_clipping_bounds_the_step() {
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap())
            .unwrap();
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig {
            learning_rate: 1.0,
            clip_norm: Some(1.0),
            ..TrainConfig::default()
        };
        let mut grads = vec![vec![30.0, 40.0]];
        adam_step(&mut store, &mut grads, &mut state, &cfg).unwrap();
        // Clipped to norm 1: gradient becomes (0.6, 0.8).
        assert!((grads[0][0] - 0.6).abs() < 1e-12);
        assert!((grads[0][1] - 0.8).abs() < 1e-12);
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            grid_w: 3,
            grid_h: 3,
            d_in: 8,
            dim: 8,
            layers: 2,
            heads: 2,
            memory_slots: 1,
            d_g: 8,
            symptoms: 4,
            max_len: 40,
            ..ModelConfig::default()
        }
    }

    fn tiny_dataset(n: usize) -> Vec<ReportSample> {
        let cfg = GeneratorConfig {
            n,
            grid_w: 3,
            grid_h: 3,
            d_in: 8,
            symptoms: 4,
            seed: 5,
            ..GeneratorConfig::default()
        };
        generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn smoke_training_decreases_loss_across_seeds() {
        let samples = tiny_dataset(30);
        let lexicon = default_lexicon(4);
        for seed in [1, 2, 3] {
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 8,
                learning_rate: 3e-3,
                min_freq: 1,
                seed,
                ..TrainConfig::default()
            };
            let result = train(&tiny_model_cfg(), &cfg, &samples, &lexicon, |_| {}).unwrap();
            assert!(
                result.epochs[0].train_loss < result.initial_loss,
                "seed {seed}: {} !< {}",
                result.epochs[0].train_loss,
                result.initial_loss
            );
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let samples = tiny_dataset(20);
        let lexicon = default_lexicon(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            min_freq: 1,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || train(&tiny_model_cfg(), &cfg, &samples, &lexicon, |_| {}).unwrap();
        let a = run();
        let b = run();
        for (la, lb) in a.epochs.iter().zip(b.epochs.iter()) {
            assert_eq!(la.train_loss.to_bits(), lb.train_loss.to_bits());
            assert_eq!(la.val_bleu4.to_bits(), lb.val_bleu4.to_bits());
        }
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let samples = tiny_dataset(20);
        let lexicon = default_lexicon(4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            min_freq: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        let result = train(&tiny_model_cfg(), &cfg, &samples, &lexicon, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &result.checkpoint).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, result.checkpoint);
        for ((_, _, a), (_, _, b)) in loaded.tensors.iter().zip(result.checkpoint.tensors.iter())
        {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_detects_corruption_and_bad_magic() {
        let samples = tiny_dataset(10);
        let lexicon = default_lexicon(4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            min_freq: 1,
            ..TrainConfig::default()
        };
        let result = train(&tiny_model_cfg(), &cfg, &samples, &lexicon, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &result.checkpoint).unwrap();

        // Truncation → corrupt-file error.
        let bytes = fs::read(&path).unwrap();
        let truncated = dir.path().join("truncated.ckpt");
        fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&truncated),
            Err(Error::Corrupt(_))
        ));

        // Wrong magic → version error.
        let mut mangled = bytes.clone();
        mangled[0] = b'X';
        let bad_magic = dir.path().join("magic.ckpt");
        fs::write(&bad_magic, &mangled).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_magic),
            Err(Error::VersionMismatch { found: 0, .. })
        ));

        // Wrong version number.
        let mut versioned = bytes;
        versioned[4] = 9;
        let bad_version = dir.path().join("version.ckpt");
        fs::write(&bad_version, &versioned).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_version),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn teacher_pairs_shift_and_truncate() {
        let samples = tiny_dataset(5);
        let train_split = split(&samples, "train");
        let vocab = build_vocab(&train_split, 1).unwrap();
        let (input, target) = teacher_pair("the trachea is midline", &vocab, 40);
        assert_eq!(input.len(), target.len());
        assert_eq!(input[0], BOS_ID);
        assert_eq!(*target.last().unwrap(), EOS_ID);
        assert_eq!(&input[1..], &target[..target.len() - 1]);

        let (input, target) = teacher_pair("the trachea is midline", &vocab, 3);
        assert_eq!(input.len(), 3);
        assert_eq!(target.len(), 3);
    }

    #[test]
    fn restored_checkpoint_reproduces_losses() {
        let samples = tiny_dataset(20);
        let lexicon = default_lexicon(4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            min_freq: 1,
            seed: 21,
            ..TrainConfig::default()
        };
        let result = train(&tiny_model_cfg(), &cfg, &samples, &lexicon, |_| {}).unwrap();
        let train_split = split(&samples, "train");
        let labels: Vec<Vec<bool>> = train_split.iter().map(|s| s.labels_bool()).collect();
        let graph = SymptomGraph::from_cooccurrence(lexicon.names(), &labels, 0.05);
        let model = result.checkpoint.restore(graph).unwrap();
        let vocab = result.checkpoint.vocab().unwrap();

        // The restored model is usable end to end.
        let features = {
            let s = train_split[0];
            let flat: Vec<f64> = s.features.iter().flatten().copied().collect();
            Tensor::from_vec(vec![9, 8], flat).unwrap()
        };
        let decoded = greedy_decode(&model, &features, model.config.max_len).unwrap();
        assert!(decoded.len() <= model.config.max_len);
        let _ = vocab;
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let _ = normal01(&mut r);
    }
}
