//! Decoder stack: sinusoidal positions, causal masked self-attention,
//! cross-attention over a routed encoder output, and a post-norm FFN — with
//! pluggable encoder→decoder connection schemas.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionParams};
use crate::encoder::EncoderOutputs;
use crate::error::{Error, Result};
use crate::tensor::{scaled_normal, xavier_uniform, Mask, ParamId, ParamStore, Tape, Tensor};

const LN_EPS: f64 = 1e-5;

/// How encoder layer outputs are routed into decoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConnectionSchema {
    /// Layer i of the decoder reads encoder layer N−i+1.
    U,
    /// Every decoder layer reads the last encoder layer.
    Last,
    /// Decoder layer i reads encoder layer i.
    OneToOne,
}

impl ConnectionSchema {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u" | "U" => Ok(ConnectionSchema::U),
            "last" => Ok(ConnectionSchema::Last),
            "one-to-one" | "1-to-1" => Ok(ConnectionSchema::OneToOne),
            other => Err(Error::InvalidArg(format!(
                "unknown connection schema {other:?} (expected u, last or one-to-one)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConnectionSchema::U => "u",
            ConnectionSchema::Last => "last",
            ConnectionSchema::OneToOne => "one-to-one",
        }
    }
}

/// Resolved routing: `route[i]` is the 1-based encoder layer feeding decoder
/// layer i+1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConnectionPlan {
    pub route: Vec<usize>,
}

pub fn plan_connection(schema: ConnectionSchema, n: usize) -> ConnectionPlan {
    let route = (1..=n)
        .map(|i| match schema {
            ConnectionSchema::U => n - i + 1,
            ConnectionSchema::Last => n,
            ConnectionSchema::OneToOne => i,
        })
        .collect();
    ConnectionPlan { route }
}

/// Sinusoidal position table: PE(pos, 2k) = sin(pos/10000^{2k/d}),
/// PE(pos, 2k+1) = cos(pos/10000^{2k/d}).
pub fn positional_encoding(length: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::InvalidArg(format!(
            "positional encoding dimension {d} must be even"
        )));
    }
    let mut data = Vec::with_capacity(length * d);
    for pos in 0..length {
        for i in 0..d {
            let k = i / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_vec(vec![length, d], data)
}

/// One decoder layer: masked self-attention, cross-attention, ReLU FFN, each
/// wrapped in AddNorm (post-norm residuals).
#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn_w0: ParamId,
    pub ffn_b0: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ln3_gain: ParamId,
    pub ln3_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// Token embedding table, vocab_size × d. Row 0 is PAD.
    pub embed: ParamId,
    pub layers: Vec<DecoderLayerParams>,
    pub dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl DecoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        n_layers: usize,
        dim: usize,
        heads: usize,
        vocab_size: usize,
        max_len: usize,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::InvalidArg("decoder needs at least one layer".into()));
        }
        let sigma = 1.0 / (dim as f64).sqrt();
        let embed = store.register(
            &format!("{prefix}.embed"),
            scaled_normal(rng, vec![vocab_size, dim], sigma),
        )?;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let lp = format!("{prefix}.layer{l}");
            let self_attn =
                AttentionParams::init(store, rng, &format!("{lp}.self"), dim, heads)?;
            let cross_attn =
                AttentionParams::init(store, rng, &format!("{lp}.cross"), dim, heads)?;
            let ones = Tensor::from_vec(vec![dim], vec![1.0; dim])?;
            layers.push(DecoderLayerParams {
                self_attn,
                cross_attn,
                ffn_w0: store
                    .register(&format!("{lp}.ffn.w0"), xavier_uniform(rng, dim, 4 * dim))?,
                ffn_b0: store.register(&format!("{lp}.ffn.b0"), Tensor::zeros(vec![4 * dim]))?,
                ffn_w1: store
                    .register(&format!("{lp}.ffn.w1"), xavier_uniform(rng, 4 * dim, dim))?,
                ffn_b1: store.register(&format!("{lp}.ffn.b1"), Tensor::zeros(vec![dim]))?,
                ln1_gain: store.register(&format!("{lp}.ln1.gain"), ones.clone())?,
                ln1_bias: store.register(&format!("{lp}.ln1.bias"), Tensor::zeros(vec![dim]))?,
                ln2_gain: store.register(&format!("{lp}.ln2.gain"), ones.clone())?,
                ln2_bias: store.register(&format!("{lp}.ln2.bias"), Tensor::zeros(vec![dim]))?,
                ln3_gain: store.register(&format!("{lp}.ln3.gain"), ones)?,
                ln3_bias: store.register(&format!("{lp}.ln3.bias"), Tensor::zeros(vec![dim]))?,
            });
        }
        Ok(DecoderParams {
            embed,
            layers,
            dim,
            vocab_size,
            max_len,
        })
    }
}

fn add_norm(
    tape: &mut Tape,
    store: &ParamStore,
    x: &Tensor,
    sublayer: &Tensor,
    gain: ParamId,
    bias: ParamId,
) -> Result<Tensor> {
    let sum = tape.add(x, sublayer)?;
    let g = tape.param(store, gain);
    let b = tape.param(store, bias);
    tape.layer_norm(&sum, &g, &b, LN_EPS)
}

/// Apply one decoder layer to hidden states `h` with cross-attention source
/// `x_hat`. The causal mask must allow position j to see positions ≤ j only.
pub fn decoder_layer(
    tape: &mut Tape,
    store: &ParamStore,
    h: &Tensor,
    x_hat: &Tensor,
    layer: &DecoderLayerParams,
    causal: &Mask,
) -> Result<Tensor> {
    let self_out = multi_head_attention(tape, store, h, h, &layer.self_attn, Some(causal), None)?;
    let a = add_norm(tape, store, h, &self_out, layer.ln1_gain, layer.ln1_bias)?;

    let cross_out = multi_head_attention(tape, store, &a, x_hat, &layer.cross_attn, None, None)?;
    let b = add_norm(tape, store, &a, &cross_out, layer.ln2_gain, layer.ln2_bias)?;

    let w0 = tape.param(store, layer.ffn_w0);
    let b0 = tape.param(store, layer.ffn_b0);
    let w1 = tape.param(store, layer.ffn_w1);
    let b1 = tape.param(store, layer.ffn_b1);
    let hidden = tape.matmul(&b, &w0)?;
    let hidden = tape.add_row(&hidden, &b0)?;
    let hidden = tape.relu(&hidden)?;
    let ffn = tape.matmul(&hidden, &w1)?;
    let ffn = tape.add_row(&ffn, &b1)?;
    add_norm(tape, store, &b, &ffn, layer.ln3_gain, layer.ln3_bias)
}

/// Embed a token prefix, add positions, and run the decoder stack with each
/// layer's cross-attention source routed per `plan`. Returns the hidden
/// states of the final layer for all positions.
pub fn decode_hidden(
    tape: &mut Tape,
    store: &ParamStore,
    tokens: &[usize],
    enc: &EncoderOutputs,
    plan: &ConnectionPlan,
    params: &DecoderParams,
) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let t = tokens.len();
    if t > params.max_len {
        return Err(Error::InvalidArg(format!(
            "sequence length {} exceeds max_len {}",
            t, params.max_len
        )));
    }
    if plan.route.len() != params.layers.len() || enc.len() != params.layers.len() {
        return Err(Error::shape(
            "decode_hidden",
            format!(
                "plan {} / encoder {} / decoder {} layer counts differ",
                plan.route.len(),
                enc.len(),
                params.layers.len()
            ),
        ));
    }
    let embed = tape.param(store, params.embed);
    let w = tape.gather_rows(&embed, tokens)?;
    let pe = positional_encoding(t, params.dim)?;
    let mut h = tape.add(&w, &pe)?;
    let causal = Mask::causal(t);
    for (layer, &src) in params.layers.iter().zip(plan.route.iter()) {
        let x_hat = &enc.per_layer[src - 1];
        h = decoder_layer(tape, store, &h, x_hat, layer, &causal)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode, EncoderParams};
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
    fn positional_encoding_known_values() {
        let pe = positional_encoding(3, 4).unwrap();
        // pos 0: sin 0 = 0 at even, cos 0 = 1 at odd.
        assert_eq!(pe.get(0, 0), 0.0);
        assert_eq!(pe.get(0, 1), 1.0);
        assert_eq!(pe.get(0, 2), 0.0);
        assert_eq!(pe.get(0, 3), 1.0);
        // pos 1, k = 0: (sin 1, cos 1).
        assert!((pe.get(1, 0) - 0.8414709848).abs() < 1e-9);
        assert!((pe.get(1, 1) - 0.5403023059).abs() < 1e-9);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(3, 5).is_err());
    }

    #[test]
    fn connection_plans() {
        assert_eq!(plan_connection(ConnectionSchema::U, 3).route, vec![3, 2, 1]);
        assert_eq!(
            plan_connection(ConnectionSchema::Last, 3).route,
            vec![3, 3, 3]
        );
        assert_eq!(
            plan_connection(ConnectionSchema::OneToOne, 3).route,
            vec![1, 2, 3]
        );
        for schema in [
            ConnectionSchema::U,
            ConnectionSchema::Last,
            ConnectionSchema::OneToOne,
        ] {
            assert_eq!(plan_connection(schema, 1).route, vec![1]);
        }
    }

    fn setup(
        seed: u64,
        n: usize,
        s: usize,
        d: usize,
        vocab: usize,
    ) -> (ParamStore, EncoderParams, DecoderParams) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let enc = EncoderParams::init(&mut store, &mut r, "enc", n, d, 2, 8, s, 0).unwrap();
        let dec = DecoderParams::init(&mut store, &mut r, "dec", n, d, 2, vocab, 16).unwrap();
        (store, enc, dec)
    }

    fn run_decode(
        store: &ParamStore,
        enc_p: &EncoderParams,
        dec_p: &DecoderParams,
        features: &Tensor,
        tokens: &[usize],
        schema: ConnectionSchema,
    ) -> Tensor {
        let mut tape = Tape::inference();
        let enc = encode(&mut tape, store, features, enc_p, None, 0).unwrap();
        let plan = plan_connection(schema, dec_p.layers.len());
        decode_hidden(&mut tape, store, tokens, &enc, &plan, dec_p).unwrap()
    }

    #[test]
    fn single_token_sequence_works() {
        let (store, enc_p, dec_p) = setup(1, 2, 4, 8, 10);
        let x = rand_tensor(&mut rng(2), 4, 8);
        let h = run_decode(&store, &enc_p, &dec_p, &x, &[1], ConnectionSchema::U);
        assert_eq!(h.shape(), &[1, 8]);
    }

    #[test]
    fn cross_attention_source_perturbation_reaches_every_row() {
        let (store, enc_p, dec_p) = setup(3, 2, 4, 8, 10);
        let x1 = rand_tensor(&mut rng(4), 4, 8);
        let mut d2 = x1.data().to_vec();
        for v in d2.iter_mut() {
            *v += 0.5;
        }
        let x2 = Tensor::from_vec(vec![4, 8], d2).unwrap();
        let tokens = [1usize, 4, 5];
        let h1 = run_decode(&store, &enc_p, &dec_p, &x1, &tokens, ConnectionSchema::U);
        let h2 = run_decode(&store, &enc_p, &dec_p, &x2, &tokens, ConnectionSchema::U);
        for row in 0..3 {
            let diff: f64 = (0..8).map(|c| (h1.get(row, c) - h2.get(row, c)).abs()).sum();
            assert!(diff > 1e-9, "row {row} unaffected by encoder change");
        }
    }

    #[test]
    fn causality_hidden_rows_ignore_future_tokens() {
        let (store, enc_p, dec_p) = setup(5, 2, 4, 8, 10);
        let x = rand_tensor(&mut rng(6), 4, 8);
        let a = run_decode(&store, &enc_p, &dec_p, &x, &[1, 4, 5, 6], ConnectionSchema::U);
        let b = run_decode(&store, &enc_p, &dec_p, &x, &[1, 4, 9, 2], ConnectionSchema::U);
        for row in 0..2 {
            for c in 0..8 {
                assert_eq!(a.get(row, c).to_bits(), b.get(row, c).to_bits());
            }
        }
    }

    #[test]
    fn schemas_coincide_at_single_layer() {
        let (store, enc_p, dec_p) = setup(7, 1, 4, 8, 10);
        let x = rand_tensor(&mut rng(8), 4, 8);
        let tokens = [1usize, 3, 4];
        let u = run_decode(&store, &enc_p, &dec_p, &x, &tokens, ConnectionSchema::U);
        let last = run_decode(&store, &enc_p, &dec_p, &x, &tokens, ConnectionSchema::Last);
        let oto = run_decode(
            &store,
            &enc_p,
            &dec_p,
            &x,
            &tokens,
            ConnectionSchema::OneToOne,
        );
        assert_eq!(u.data(), last.data());
        assert_eq!(u.data(), oto.data());
    }

    #[test]
    fn u_and_last_differ_with_multiple_layers() {
        let (store, enc_p, dec_p) = setup(9, 3, 4, 8, 10);
        let x = rand_tensor(&mut rng(10), 4, 8);
        let tokens = [1usize, 3, 4, 7];
        let u = run_decode(&store, &enc_p, &dec_p, &x, &tokens, ConnectionSchema::U);
        let last = run_decode(&store, &enc_p, &dec_p, &x, &tokens, ConnectionSchema::Last);
        let diff: f64 = u
            .data()
            .iter()
            .zip(last.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn u_routing_equals_reversed_outputs_with_one_to_one() {
        let (store, enc_p, dec_p) = setup(11, 3, 4, 8, 10);
        let x = rand_tensor(&mut rng(12), 4, 8);
        let tokens = [1usize, 5];
        let mut tape = Tape::inference();
        let enc = encode(&mut tape, &store, &x, &enc_p, None, 0).unwrap();
        let u_plan = plan_connection(ConnectionSchema::U, 3);
        let h_u = decode_hidden(&mut tape, &store, &tokens, &enc, &u_plan, &dec_p).unwrap();

        let reversed = EncoderOutputs {
            per_layer: enc.per_layer.iter().rev().cloned().collect(),
        };
        let oto_plan = plan_connection(ConnectionSchema::OneToOne, 3);
        let h_r =
            decode_hidden(&mut tape, &store, &tokens, &reversed, &oto_plan, &dec_p).unwrap();
        for (a, b) in h_u.data().iter().zip(h_r.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (store, enc_p, dec_p) = setup(13, 2, 4, 8, 10);
        let x = rand_tensor(&mut rng(14), 4, 8);
        let mut tape = Tape::inference();
        let enc = encode(&mut tape, &store, &x, &enc_p, None, 0).unwrap();
        let plan = plan_connection(ConnectionSchema::U, 2);
        assert!(matches!(
            decode_hidden(&mut tape, &store, &[], &enc, &plan, &dec_p),
            Err(Error::EmptySequence)
        ));
        assert!(matches!(
            decode_hidden(&mut tape, &store, &[11], &enc, &plan, &dec_p),
            Err(Error::UnknownTokenId(11, 10))
        ));
        let too_long: Vec<usize> = vec![1; 17];
        assert!(decode_hidden(&mut tape, &store, &too_long, &enc, &plan, &dec_p).is_err());
    }

    #[test]
    fn encoder_decoder_stack_passes_grad_check() {
        let (mut store, enc_p, dec_p) = setup(15, 2, 4, 6, 8);
        store
            .register("x", rand_tensor(&mut rng(16), 4, 6))
            .unwrap();
        let tokens = vec![1usize, 4, 6];
        let err = grad_check(
            move |tape, store| {
                let x = tape.param(store, store.id_of("x")?);
                let enc = encode(tape, store, &x, &enc_p, None, 0)?;
                let plan = plan_connection(ConnectionSchema::U, 2);
                let h = decode_hidden(tape, store, &tokens, &enc, &plan, &dec_p)?;
                let sq = tape.mul(&h, &h)?;
                tape.sum_all(&sq)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
