//! Injected-knowledge distiller: at every decoding position the decoder
//! hidden state attends over a stack of visual, clinical and contextual
//! feature rows, and the attended vector alone feeds the vocabulary
//! projection. Also hosts greedy decoding, which drives the whole model.

use rand_chacha::ChaCha8Rng;

use crate::attention::{scaled_dot_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::model::{KiutModel, BOS_ID, EOS_ID};
use crate::tensor::{xavier_uniform, ParamId, ParamStore, Tape, Tensor};

/// Distiller parameters: one attention block shared by all positions, and
/// the vocabulary projection.
#[derive(Clone, Debug)]
pub struct DistillerParams {
    pub attn: AttentionParams,
    pub w_p: ParamId,
    pub b_p: ParamId,
    pub vocab_size: usize,
}

impl DistillerParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        Ok(DistillerParams {
            attn: AttentionParams::init(store, rng, &format!("{prefix}.attn"), dim, heads)?,
            w_p: store.register(
                &format!("{prefix}.w_p"),
                xavier_uniform(rng, dim, vocab_size),
            )?,
            b_p: store.register(&format!("{prefix}.b_p"), Tensor::zeros(vec![vocab_size]))?,
            vocab_size,
        })
    }
}

/// Per-position injected features F̃_i = [X̃; C̃; w̃_i]: the shared
/// visual/clinical rows plus position i's contextual row. Disabled blocks
/// are omitted entirely.
pub struct InjectedFeatures {
    /// Rows shared by every position (visual, then clinical when present).
    pub shared: Tensor,
    /// t×d contextual rows; row i extends position i's features.
    pub contextual: Option<Tensor>,
    pub positions: usize,
}

impl InjectedFeatures {
    /// Row count of each F̃_i.
    pub fn rows_per_position(&self) -> usize {
        self.shared.rows() + usize::from(self.contextual.is_some())
    }

    /// Materialize F̃_i for one position (used by tests and oracles).
    pub fn at(&self, tape: &mut Tape, i: usize) -> Result<Tensor> {
        match &self.contextual {
            Some(ctx) => {
                let row = tape.slice_rows(ctx, i, 1)?;
                tape.concat_rows(&[&self.shared, &row])
            }
            None => Ok(self.shared.clone()),
        }
    }
}

/// Assemble the injected features for `t` positions from the visual signal
/// X̃ (S×d), the optional clinical signal C̃ (K×d) and the optional
/// contextual signal W̃ (t×d).
pub fn build_injected(
    visual: &Tensor,
    clinical: Option<&Tensor>,
    contextual: Option<&Tensor>,
    t: usize,
) -> Result<InjectedFeatures> {
    let d = visual.cols();
    if let Some(c) = clinical {
        if c.cols() != d {
            return Err(Error::shape(
                "build_injected",
                format!("clinical dim {} vs visual dim {}", c.cols(), d),
            ));
        }
    }
    if let Some(w) = contextual {
        if w.cols() != d {
            return Err(Error::shape(
                "build_injected",
                format!("contextual dim {} vs visual dim {}", w.cols(), d),
            ));
        }
        if w.rows() != t {
            return Err(Error::shape(
                "build_injected",
                format!("contextual rows {} vs {} positions", w.rows(), t),
            ));
        }
    }
    // The shared block is concatenated once; a per-position contextual row
    // is appended lazily so no placeholder rows exist for disabled signals.
    let mut tape = Tape::inference();
    let shared = match clinical {
        Some(c) => tape.concat_rows(&[visual, c])?,
        None => visual.clone(),
    };
    Ok(InjectedFeatures {
        shared,
        contextual: contextual.cloned(),
        positions: t,
    })
}

/// h̃: row i is the multi-head attention of query h[i] over F̃_i. The
/// shared-block key/value projections are computed once; position rows are
/// assembled per head. No residual path: the distilled vector alone carries
/// information to the output head.
pub fn distill(
    tape: &mut Tape,
    store: &ParamStore,
    h: &Tensor,
    injected: &InjectedFeatures,
    p: &DistillerParams,
) -> Result<Tensor> {
    let t = h.rows();
    if injected.positions != t {
        return Err(Error::shape(
            "distill",
            format!("{} injected positions vs {} hidden rows", injected.positions, t),
        ));
    }
    let w_q = tape.param(store, p.attn.w_q);
    let w_k = tape.param(store, p.attn.w_k);
    let w_v = tape.param(store, p.attn.w_v);
    let q_all = tape.matmul(h, &w_q)?;
    let k_shared = tape.matmul(&injected.shared, &w_k)?;
    let v_shared = tape.matmul(&injected.shared, &w_v)?;
    let ctx_kv = match &injected.contextual {
        Some(ctx) => Some((tape.matmul(ctx, &w_k)?, tape.matmul(ctx, &w_v)?)),
        None => None,
    };

    let d_n = p.attn.head_dim();
    let mut rows = Vec::with_capacity(t);
    for i in 0..t {
        let q_i = tape.slice_rows(&q_all, i, 1)?;
        let (k_i, v_i) = match &ctx_kv {
            Some((k_ctx, v_ctx)) => {
                let k_row = tape.slice_rows(k_ctx, i, 1)?;
                let v_row = tape.slice_rows(v_ctx, i, 1)?;
                (
                    tape.concat_rows(&[&k_shared, &k_row])?,
                    tape.concat_rows(&[&v_shared, &v_row])?,
                )
            }
            None => (k_shared.clone(), v_shared.clone()),
        };
        let mut heads = Vec::with_capacity(p.attn.heads);
        for hd in 0..p.attn.heads {
            let q_h = tape.slice_cols(&q_i, hd * d_n, d_n)?;
            let k_h = tape.slice_cols(&k_i, hd * d_n, d_n)?;
            let v_h = tape.slice_cols(&v_i, hd * d_n, d_n)?;
            heads.push(scaled_dot_attention(tape, &q_h, &k_h, &v_h, None, None)?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        rows.push(tape.concat_cols(&refs)?);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    let stacked = tape.concat_rows(&refs)?;
    let w_o = tape.param(store, p.attn.w_o);
    tape.matmul(&stacked, &w_o)
}

/// Vocabulary distribution per position: softmax(h̃·W_p + b_p).
pub fn output_logits(
    tape: &mut Tape,
    store: &ParamStore,
    fused: &Tensor,
    p: &DistillerParams,
) -> Result<Tensor> {
    let w_p = tape.param(store, p.w_p);
    let b_p = tape.param(store, p.b_p);
    let logits = tape.matmul(fused, &w_p)?;
    let logits = tape.add_row(&logits, &b_p)?;
    tape.softmax_rows(&logits, None)
}

/// Greedy decoding: start from BOS, repeatedly take the argmax of the last
/// position's distribution, stop at EOS or when `max_len` tokens have been
/// generated. The returned sequence contains neither BOS nor EOS. The
/// encoder pass and clinical signal are token-independent and computed once.
pub fn greedy_decode(model: &KiutModel, features: &Tensor, max_len: usize) -> Result<Vec<usize>> {
    let mut tape = Tape::inference();
    let state = model.prepare(&mut tape, features)?;
    let mut prefix = vec![BOS_ID];
    let mut generated = Vec::new();
    // The prefix fed to the decoder may not exceed the model's max_len.
    let cap = max_len.min(model.config.max_len.saturating_sub(1));
    while generated.len() < cap {
        let probs = model.step(&mut tape, &state, &prefix)?;
        let last = probs.rows() - 1;
        let next = argmax_row(&probs, last);
        if next == EOS_ID {
            break;
        }
        prefix.push(next);
        generated.push(next);
    }
    Ok(generated)
}

/// Index of the row maximum; ties break toward the lowest index.
pub fn argmax_row(probs: &Tensor, row: usize) -> usize {
    let cols = probs.cols();
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for c in 0..cols {
        let v = probs.get(row, c);
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::multi_head_attention;
    use crate::tensor::{grad_check, normal01};
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| normal01(rng)).collect();
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn injected_row_counts() {
        let mut r = rng(1);
        let visual = rand_tensor(&mut r, 49, 8);
        let clinical = rand_tensor(&mut r, 8, 8);
        let ctx = rand_tensor(&mut r, 3, 8);
        let inj = build_injected(&visual, Some(&clinical), Some(&ctx), 3).unwrap();
        assert_eq!(inj.rows_per_position(), 58);
        let bare = build_injected(&visual, None, None, 3).unwrap();
        assert_eq!(bare.rows_per_position(), 49);
        let mut tape = Tape::inference();
        // With everything off, F̃_i is exactly the visual block.
        let f0 = bare.at(&mut tape, 0).unwrap();
        assert_eq!(f0.data(), visual.data());
        // F̃_i and F̃_j differ only in their last row.
        let a = inj.at(&mut tape, 0).unwrap();
        let b = inj.at(&mut tape, 2).unwrap();
        for row in 0..57 {
            for c in 0..8 {
                assert_eq!(a.get(row, c), b.get(row, c));
            }
        }
        let last_diff: f64 = (0..8).map(|c| (a.get(57, c) - b.get(57, c)).abs()).sum();
        assert!(last_diff > 1e-9);
    }

    #[test]
    fn injected_rejects_dimension_mismatch() {
        let mut r = rng(2);
        let visual = rand_tensor(&mut r, 4, 8);
        let clinical = rand_tensor(&mut r, 2, 6);
        assert!(build_injected(&visual, Some(&clinical), None, 2).is_err());
        let ctx = rand_tensor(&mut r, 5, 8);
        assert!(build_injected(&visual, None, Some(&ctx), 2).is_err());
    }

    #[test]
    fn single_shared_row_dominates_output() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let p = DistillerParams::init(&mut store, &mut r, "dist", 6, 2, 10).unwrap();
        let visual = rand_tensor(&mut r, 1, 6);
        let h1 = rand_tensor(&mut r, 2, 6);
        let h2 = rand_tensor(&mut r, 2, 6);
        let inj = build_injected(&visual, None, None, 2).unwrap();
        let mut tape = Tape::inference();
        let o1 = distill(&mut tape, &store, &h1, &inj, &p).unwrap();
        let o2 = distill(&mut tape, &store, &h2, &inj, &p).unwrap();
        // One key only: softmax weight is 1 regardless of the query.
        for (a, b) in o1.data().iter().zip(o2.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn toggles_off_reduces_to_cross_attention() {
        let mut store = ParamStore::new();
        let mut r = rng(4);
        let p = DistillerParams::init(&mut store, &mut r, "dist", 8, 2, 10).unwrap();
        let visual = rand_tensor(&mut r, 5, 8);
        let h = rand_tensor(&mut r, 3, 8);
        let inj = build_injected(&visual, None, None, 3).unwrap();
        let mut tape = Tape::inference();
        let via_distill = distill(&mut tape, &store, &h, &inj, &p).unwrap();
        let via_cross =
            multi_head_attention(&mut tape, &store, &h, &visual, &p.attn, None, None).unwrap();
        for (a, b) in via_distill.data().iter().zip(via_cross.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_matches_loop_oracle() {
        let (t, s, k, d) = (2usize, 3usize, 2usize, 4usize);
        let mut store = ParamStore::new();
        let mut r = rng(5);
        let p = DistillerParams::init(&mut store, &mut r, "dist", d, 2, 10).unwrap();
        let visual = rand_tensor(&mut r, s, d);
        let clinical = rand_tensor(&mut r, k, d);
        let ctx = rand_tensor(&mut r, t, d);
        let h = rand_tensor(&mut r, t, d);
        let inj = build_injected(&visual, Some(&clinical), Some(&ctx), t).unwrap();
        let mut tape = Tape::inference();
        let got = distill(&mut tape, &store, &h, &inj, &p).unwrap();

        // Direct loop: per position, build F̃_i and run single-query MHA.
        let d_n = d / 2;
        let wq = store.values(p.attn.w_q);
        let wk = store.values(p.attn.w_k);
        let wv = store.values(p.attn.w_v);
        let wo = store.values(p.attn.w_o);
        let rows_f = s + k + 1;
        for i in 0..t {
            let mut f = Vec::new();
            f.extend_from_slice(visual.data());
            f.extend_from_slice(clinical.data());
            f.extend_from_slice(&ctx.data()[i * d..(i + 1) * d]);
            let mut q = vec![0.0; d];
            for j in 0..d {
                for c in 0..d {
                    q[j] += h.get(i, c) * wq[c * d + j];
                }
            }
            let project = |m: &[f64]| {
                let mut out = vec![0.0; rows_f * d];
                for rr in 0..rows_f {
                    for j in 0..d {
                        for c in 0..d {
                            out[rr * d + j] += f[rr * d + c] * m[c * d + j];
                        }
                    }
                }
                out
            };
            let keys = project(wk);
            let vals = project(wv);
            let mut concat = vec![0.0; d];
            for head in 0..2 {
                let mut logits = vec![0.0; rows_f];
                for rr in 0..rows_f {
                    let mut dot = 0.0;
                    for c in 0..d_n {
                        dot += q[head * d_n + c] * keys[rr * d + head * d_n + c];
                    }
                    logits[rr] = dot / (d_n as f64).sqrt();
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for c in 0..d_n {
                    let mut acc = 0.0;
                    for rr in 0..rows_f {
                        acc += exps[rr] / sum * vals[rr * d + head * d_n + c];
                    }
                    concat[head * d_n + c] = acc;
                }
            }
            for j in 0..d {
                let mut want = 0.0;
                for c in 0..d {
                    want += concat[c] * wo[c * d + j];
                }
                assert!(
                    (got.get(i, j) - want).abs() < 1e-12,
                    "position {i} component {j}"
                );
            }
        }
    }

    #[test]
    fn output_logits_rows_are_distributions() {
        let mut store = ParamStore::new();
        let mut r = rng(6);
        let p = DistillerParams::init(&mut store, &mut r, "dist", 6, 2, 8).unwrap();
        let fused = rand_tensor(&mut r, 4, 6);
        let mut tape = Tape::inference();
        let probs = output_logits(&mut tape, &store, &fused, &p).unwrap();
        for row in 0..4 {
            let sum: f64 = (0..8).map(|c| probs.get(row, c)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        // Zero projection: uniform rows.
        for v in store.values_mut(p.w_p) {
            *v = 0.0;
        }
        let uniform = output_logits(&mut tape, &store, &fused, &p).unwrap();
        for v in uniform.data() {
            assert!((v - 1.0 / 8.0).abs() < 1e-12);
        }
        // Argmax is invariant to a constant shift of the bias.
        let mut r2 = rng(7);
        let mut store2 = ParamStore::new();
        let p2 = DistillerParams::init(&mut store2, &mut r2, "dist", 6, 2, 8).unwrap();
        let base = output_logits(&mut tape, &store2, &fused, &p2).unwrap();
        for v in store2.values_mut(p2.b_p) {
            *v += 3.7;
        }
        let shifted = output_logits(&mut tape, &store2, &fused, &p2).unwrap();
        for row in 0..4 {
            assert_eq!(argmax_row(&base, row), argmax_row(&shifted, row));
        }
    }

    #[test]
    fn distiller_chain_passes_grad_check() {
        let mut store = ParamStore::new();
        let mut r = rng(8);
        let p = DistillerParams::init(&mut store, &mut r, "dist", 6, 2, 8).unwrap();
        store.register("h", rand_tensor(&mut r, 3, 6)).unwrap();
        store.register("vis", rand_tensor(&mut r, 4, 6)).unwrap();
        store.register("ctx", rand_tensor(&mut r, 3, 6)).unwrap();
        let targets = vec![2usize, 5, 1];
        let active = vec![true, true, true];
        let err = grad_check(
            move |tape, store| {
                let h = tape.param(store, store.id_of("h")?);
                let vis = tape.param(store, store.id_of("vis")?);
                let ctx = tape.param(store, store.id_of("ctx")?);
                let inj = build_injected(&vis, None, Some(&ctx), 3)?;
                let fused = distill(tape, store, &h, &inj, &p)?;
                let probs = output_logits(tape, store, &fused, &p)?;
                tape.nll_mean(&probs, &targets, &active)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
