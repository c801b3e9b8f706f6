//! Region-relationship encoder: a stack of pre-norm transformer layers whose
//! self-attention is the memory-extended, geometry-biased RRSA. Every layer's
//! output is retained so downstream connection schemas can route any of them.

use rand_chacha::ChaCha8Rng;

use crate::attention::{extrinsic_from_features, geometry_features, rrsa, RrsaParams};
use crate::error::{Error, Result};
use crate::tensor::{xavier_uniform, ParamId, ParamStore, Tape, Tensor};

const LN_EPS: f64 = 1e-5;

/// One encoder layer: RRSA block, two layer norms, and the GELU MLP with
/// hidden width 4d.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub rrsa: RrsaParams,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub mlp_w0: ParamId,
    pub mlp_b0: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
}

/// Full encoder stack. The geometry FC map is registered once and shared by
/// all layers; each layer keeps its own per-head w_g, attention projections
/// and memory slots.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub layers: Vec<EncoderLayerParams>,
    pub dim: usize,
}

/// The retained per-layer outputs, one S×d tensor per layer.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    pub per_layer: Vec<Tensor>,
}

impl EncoderOutputs {
    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    /// Output of the last layer (the visual knowledge signal).
    pub fn last(&self) -> &Tensor {
        self.per_layer
            .last()
            .expect("encoder has at least one layer")
    }
}

impl EncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        n_layers: usize,
        dim: usize,
        heads: usize,
        d_g: usize,
        regions: usize,
        memory_slots: usize,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::InvalidArg("encoder needs at least one layer".into()));
        }
        let fc_w = store.register(&format!("{prefix}.fc_w"), xavier_uniform(rng, 4, d_g))?;
        let fc_b = store.register(&format!("{prefix}.fc_b"), Tensor::zeros(vec![d_g]))?;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let lp = format!("{prefix}.layer{l}");
            let rrsa = RrsaParams::init(
                store,
                rng,
                &format!("{lp}.attn"),
                dim,
                heads,
                d_g,
                regions,
                memory_slots,
                Some((fc_w, fc_b)),
            )?;
            let ones = Tensor::from_vec(vec![dim], vec![1.0; dim])?;
            layers.push(EncoderLayerParams {
                rrsa,
                ln1_gain: store.register(&format!("{lp}.ln1.gain"), ones.clone())?,
                ln1_bias: store.register(&format!("{lp}.ln1.bias"), Tensor::zeros(vec![dim]))?,
                ln2_gain: store.register(&format!("{lp}.ln2.gain"), ones)?,
                ln2_bias: store.register(&format!("{lp}.ln2.bias"), Tensor::zeros(vec![dim]))?,
                mlp_w0: store
                    .register(&format!("{lp}.mlp.w0"), xavier_uniform(rng, dim, 4 * dim))?,
                mlp_b0: store.register(&format!("{lp}.mlp.b0"), Tensor::zeros(vec![4 * dim]))?,
                mlp_w1: store
                    .register(&format!("{lp}.mlp.w1"), xavier_uniform(rng, 4 * dim, dim))?,
                mlp_b1: store.register(&format!("{lp}.mlp.b1"), Tensor::zeros(vec![dim]))?,
            });
        }
        Ok(EncoderParams {
            fc_w,
            fc_b,
            layers,
            dim,
        })
    }
}

/// One pre-norm layer: X' = RRSA(LN(X)) + X, then X'' = MLP(LN(X')) + X'.
pub fn encoder_layer(
    tape: &mut Tape,
    store: &ParamStore,
    x: &Tensor,
    er: Option<&[Tensor]>,
    layer: &EncoderLayerParams,
    m_n: usize,
) -> Result<Tensor> {
    let ln1_g = tape.param(store, layer.ln1_gain);
    let ln1_b = tape.param(store, layer.ln1_bias);
    let normed = tape.layer_norm(x, &ln1_g, &ln1_b, LN_EPS)?;
    let attended = rrsa(tape, store, &normed, er, &layer.rrsa, m_n)?;
    let x1 = tape.add(&attended, x)?;

    let ln2_g = tape.param(store, layer.ln2_gain);
    let ln2_b = tape.param(store, layer.ln2_bias);
    let normed2 = tape.layer_norm(&x1, &ln2_g, &ln2_b, LN_EPS)?;
    let w0 = tape.param(store, layer.mlp_w0);
    let b0 = tape.param(store, layer.mlp_b0);
    let w1 = tape.param(store, layer.mlp_w1);
    let b1 = tape.param(store, layer.mlp_b1);
    let hidden = tape.matmul(&normed2, &w0)?;
    let hidden = tape.add_row(&hidden, &b0)?;
    let hidden = tape.gelu(&hidden)?;
    let mlp = tape.matmul(&hidden, &w1)?;
    let mlp = tape.add_row(&mlp, &b1)?;
    tape.add(&mlp, &x1)
}

/// Run the full stack, retaining every layer's output. `rg` carries the
/// flattened pairwise geometry features; when absent the extrinsic bias is
/// skipped (the ablation's "no ER" setting). `m_n` = 0 disables the memory
/// extension ("no IR").
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    features: &Tensor,
    params: &EncoderParams,
    rg: Option<&Tensor>,
    m_n: usize,
) -> Result<EncoderOutputs> {
    if features.cols() != params.dim {
        return Err(Error::shape(
            "encode",
            format!(
                "features dim {} vs model dim {}",
                features.cols(),
                params.dim
            ),
        ));
    }
    // FC(rg) is head- and layer-independent; compute it once per pass.
    let g = match rg {
        Some(rg) => Some(geometry_features(tape, store, rg, params.fc_w, params.fc_b)?),
        None => None,
    };
    let mut outputs = Vec::with_capacity(params.layers.len());
    let mut x = features.clone();
    for layer in &params.layers {
        let er = match &g {
            Some(g) => Some(extrinsic_from_features(
                tape,
                store,
                g,
                layer.rrsa.w_g,
                layer.rrsa.attn.heads,
            )?),
            None => None,
        };
        x = encoder_layer(tape, store, &x, er.as_deref(), layer, m_n)?;
        outputs.push(x.clone());
    }
    Ok(EncoderOutputs { per_layer: outputs })
}
