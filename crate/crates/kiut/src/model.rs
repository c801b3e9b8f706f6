//! Model configuration and the assembled network: backbone projection,
//! region-relationship encoder, connection-routed decoder, knowledge signals
//! and the injected-knowledge distiller, all registered in one parameter
//! store with a deterministic layout.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{region_geometry, relative_geometry};
use crate::decoder::{plan_connection, ConnectionPlan, ConnectionSchema, DecoderParams};
use crate::distiller::{build_injected, distill, output_logits, DistillerParams};
use crate::encoder::{encode, EncoderOutputs, EncoderParams};
use crate::error::{Error, Result};
use crate::knowledge::{
    contextual_signal, gat_layer, init_graph, symptom_probabilities, ContextualParams, GatParams,
    ProbeParams, SymptomGraph,
};
use crate::tensor::{xavier_uniform, ParamId, ParamStore, Tape, Tensor};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// All architecture hyperparameters. `vocab_size` comes from the corpus
/// vocabulary; everything else has desk-scale defaults.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub grid_w: usize,
    pub grid_h: usize,
    pub d_in: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub memory_slots: usize,
    pub d_g: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub symptoms: usize,
    pub schema: ConnectionSchema,
    pub use_er: bool,
    pub use_ir: bool,
    pub use_clinical: bool,
    pub use_contextual: bool,
    pub geometry_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid_w: 7,
            grid_h: 7,
            d_in: 16,
            dim: 16,
            layers: 3,
            heads: 2,
            memory_slots: 2,
            d_g: 64,
            vocab_size: 0,
            max_len: 40,
            symptoms: 8,
            schema: ConnectionSchema::U,
            use_er: true,
            use_ir: true,
            use_clinical: true,
            use_contextual: true,
            geometry_epsilon: 1e-3,
        }
    }
}

impl ModelConfig {
    pub fn regions(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_w == 0 || self.grid_h == 0 {
            return Err(Error::InvalidArg("zero-sized grid".into()));
        }
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::InvalidArg(format!(
                "dim {} must be even and positive",
                self.dim
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArg(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::InvalidArg("layers must be >= 1".into()));
        }
        if self.vocab_size <= UNK_ID + 1 {
            return Err(Error::InvalidArg(format!(
                "vocab_size {} leaves no room for real tokens",
                self.vocab_size
            )));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidArg("max_len must be >= 2".into()));
        }
        if self.symptoms == 0 {
            return Err(Error::InvalidArg("symptoms must be >= 1".into()));
        }
        if self.d_in == 0 || self.d_g == 0 {
            return Err(Error::InvalidArg("d_in and d_g must be positive".into()));
        }
        Ok(())
    }

    fn effective_memory(&self) -> usize {
        if self.use_ir {
            self.memory_slots
        } else {
            0
        }
    }
}

/// The assembled model. Construction registers every trainable tensor
/// exactly once, in a fixed order, so two models built from the same config
/// and seed are bit-identical.
pub struct KiutModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone_w: ParamId,
    pub backbone_b: ParamId,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub contextual: ContextualParams,
    pub probe: ProbeParams,
    /// Symptom node embeddings, K×d.
    pub sf: ParamId,
    pub gat: GatParams,
    pub distiller: DistillerParams,
    pub graph: SymptomGraph,
    pub plan: ConnectionPlan,
    /// Pairwise log-ratio geometry features of the grid, S²×4.
    rg: Tensor,
}

/// One full forward pass over a token prefix.
pub struct ForwardOutput {
    /// probs[i] is the next-token distribution after position i, t×|V|.
    pub probs: Tensor,
    /// Symptom probabilities, present when the clinical path is enabled.
    pub sp: Option<Tensor>,
}

/// Token-independent per-sample state, reused across greedy-decode steps.
pub struct SampleState {
    pub encoded: EncoderOutputs,
    pub clinical: Option<Tensor>,
    pub sp: Option<Tensor>,
}

impl KiutModel {
    pub fn new(config: ModelConfig, graph: SymptomGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        if graph.node_count() != config.symptoms {
            return Err(Error::InvalidArg(format!(
                "graph has {} nodes but config expects {} symptoms",
                graph.node_count(),
                config.symptoms
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone_w = store.register(
            "backbone.w",
            xavier_uniform(&mut rng, config.d_in, config.dim),
        )?;
        let backbone_b = store.register("backbone.b", Tensor::zeros(vec![config.dim]))?;
        let encoder = EncoderParams::init(
            &mut store,
            &mut rng,
            "encoder",
            config.layers,
            config.dim,
            config.heads,
            config.d_g,
            config.regions(),
            config.memory_slots,
        )?;
        let decoder = DecoderParams::init(
            &mut store,
            &mut rng,
            "decoder",
            config.layers,
            config.dim,
            config.heads,
            config.vocab_size,
            config.max_len,
        )?;
        let contextual = ContextualParams::init(
            &mut store,
            &mut rng,
            "contextual",
            config.dim,
            config.heads,
            config.vocab_size,
        )?;
        let probe = ProbeParams::init(&mut store, &mut rng, "probe", config.dim, config.symptoms)?;
        let sf = store.register(
            "graph.sf",
            crate::tensor::scaled_normal(
                &mut rng,
                vec![config.symptoms, config.dim],
                1.0 / (config.dim as f64).sqrt(),
            ),
        )?;
        let gat = GatParams::init(&mut store, &mut rng, "gat", config.dim)?;
        let distiller = DistillerParams::init(
            &mut store,
            &mut rng,
            "distiller",
            config.dim,
            config.heads,
            config.vocab_size,
        )?;
        let boxes = region_geometry(config.grid_w, config.grid_h)?;
        let rg = relative_geometry(&boxes, config.geometry_epsilon)?;
        let plan = plan_connection(config.schema, config.layers);
        Ok(KiutModel {
            config,
            params: store,
            backbone_w,
            backbone_b,
            encoder,
            decoder,
            contextual,
            probe,
            sf,
            gat,
            distiller,
            graph,
            plan,
            rg,
        })
    }

    /// Project raw region features into model space.
    fn backbone(&self, tape: &mut Tape, features: &Tensor) -> Result<Tensor> {
        if features.rows() != self.config.regions() || features.cols() != self.config.d_in {
            return Err(Error::shape(
                "backbone",
                format!(
                    "features {}x{} vs expected {}x{}",
                    features.rows(),
                    features.cols(),
                    self.config.regions(),
                    self.config.d_in
                ),
            ));
        }
        let w = tape.param(&self.params, self.backbone_w);
        let b = tape.param(&self.params, self.backbone_b);
        let x = tape.matmul(features, &w)?;
        tape.add_row(&x, &b)
    }

    /// Compute everything that does not depend on the token prefix: the
    /// encoder stack, and the clinical signal when enabled.
    pub fn prepare(&self, tape: &mut Tape, features: &Tensor) -> Result<SampleState> {
        let x0 = self.backbone(tape, features)?;
        let rg = if self.config.use_er {
            Some(&self.rg)
        } else {
            None
        };
        let encoded = encode(
            tape,
            &self.params,
            &x0,
            &self.encoder,
            rg,
            self.config.effective_memory(),
        )?;
        let (clinical, sp) = if self.config.use_clinical {
            let sp = symptom_probabilities(tape, &self.params, &x0, &self.probe)?;
            let sf = tape.param(&self.params, self.sf);
            let sg = init_graph(tape, &sp, &sf)?;
            let c = gat_layer(tape, &self.params, &sg, &self.graph, &self.gat)?;
            (Some(c), Some(sp))
        } else {
            (None, None)
        };
        Ok(SampleState {
            encoded,
            clinical,
            sp,
        })
    }

    /// Next-token distributions for every position of `tokens`, given a
    /// prepared sample state.
    pub fn step(&self, tape: &mut Tape, state: &SampleState, tokens: &[usize]) -> Result<Tensor> {
        let h = crate::decoder::decode_hidden(
            tape,
            &self.params,
            tokens,
            &state.encoded,
            &self.plan,
            &self.decoder,
        )?;
        let ctx = if self.config.use_contextual {
            Some(contextual_signal(
                tape,
                &self.params,
                tokens,
                &self.contextual,
            )?)
        } else {
            None
        };
        let injected = build_injected(
            state.encoded.last(),
            state.clinical.as_ref(),
            ctx.as_ref(),
            tokens.len(),
        )?;
        let fused = distill(tape, &self.params, &h, &injected, &self.distiller)?;
        output_logits(tape, &self.params, &fused, &self.distiller)
    }

    /// Full teacher-forcing pass: encode, signals, decode, distill, project.
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        tokens: &[usize],
    ) -> Result<ForwardOutput> {
        let state = self.prepare(tape, features)?;
        let probs = self.step(tape, &state, tokens)?;
        Ok(ForwardOutput {
            probs,
            sp: state.sp,
        })
    }
}
