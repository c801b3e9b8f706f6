//! The two non-visual knowledge signals: a contextual signal (masked
//! attention over a separate embedding of the generated tokens) and a
//! clinical signal (probability-weighted symptom graph propagated through a
//! graph-attention layer), plus the linear probe that predicts per-symptom
//! probabilities from pooled visual features.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head_attention, AttentionParams};
use crate::decoder::positional_encoding;
use crate::error::{Error, Result};
use crate::tensor::{
    scaled_normal, xavier_uniform, Activation, Mask, ParamId, ParamStore, Tape, Tensor,
};

/// Static structure of the symptom graph: node names and a symmetric
/// adjacency with self-loops. Node embeddings live in the parameter store;
/// per-sample probabilities come from the probe.
#[derive(Clone, Debug)]
pub struct SymptomGraph {
    pub names: Vec<String>,
    adjacency: Vec<bool>,
}

impl SymptomGraph {
    pub fn new(names: Vec<String>, adjacency: Vec<bool>) -> Result<Self> {
        let k = names.len();
        if adjacency.len() != k * k {
            return Err(Error::shape("symptom_graph", "adjacency is not K×K"));
        }
        for i in 0..k {
            if !adjacency[i * k + i] {
                return Err(Error::InvalidArg(format!(
                    "symptom graph node {i} is missing its self-loop"
                )));
            }
            for j in 0..k {
                if adjacency[i * k + j] != adjacency[j * k + i] {
                    return Err(Error::InvalidArg(format!(
                        "symptom graph adjacency is asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(SymptomGraph { names, adjacency })
    }

    /// Fully connected graph (including self-loops) over `names`.
    pub fn complete(names: Vec<String>) -> Self {
        let k = names.len();
        SymptomGraph {
            names,
            adjacency: vec![true; k * k],
        }
    }

    /// Build adjacency from boolean label vectors: nodes i and j are linked
    /// when they co-occur in at least `threshold` of the samples, plus
    /// self-loops.
    pub fn from_cooccurrence(names: Vec<String>, labels: &[Vec<bool>], threshold: f64) -> Self {
        let k = names.len();
        let mut adjacency = vec![false; k * k];
        let n = labels.len().max(1) as f64;
        for i in 0..k {
            adjacency[i * k + i] = true;
            for j in (i + 1)..k {
                let both = labels.iter().filter(|l| l[i] && l[j]).count() as f64;
                if both / n >= threshold {
                    adjacency[i * k + j] = true;
                    adjacency[j * k + i] = true;
                }
            }
        }
        SymptomGraph { names, adjacency }
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn linked(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.node_count() + j]
    }

    pub fn neighborhood_mask(&self) -> Mask {
        let k = self.node_count();
        Mask::new(k, k, self.adjacency.clone()).expect("adjacency is K×K by construction")
    }
}

/// Single-layer graph attention: node transform W, attention vector a
/// (stored as a 2d×1 column), and the leaky-ReLU slope.
#[derive(Clone, Debug)]
pub struct GatParams {
    pub w: ParamId,
    pub a: ParamId,
    pub slope: f64,
    pub dim: usize,
}

impl GatParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(GatParams {
            w: store.register(&format!("{prefix}.w"), xavier_uniform(rng, dim, dim))?,
            a: store.register(&format!("{prefix}.a"), xavier_uniform(rng, 2 * dim, 1))?,
            slope: 0.2,
            dim,
        })
    }
}

/// Contextual-signal parameters: an embedding table separate from the
/// decoder's, plus one masked attention block.
#[derive(Clone, Debug)]
pub struct ContextualParams {
    pub embed: ParamId,
    pub attn: AttentionParams,
    pub dim: usize,
}

impl ContextualParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        let sigma = 1.0 / (dim as f64).sqrt();
        Ok(ContextualParams {
            embed: store.register(
                &format!("{prefix}.embed"),
                scaled_normal(rng, vec![vocab_size, dim], sigma),
            )?,
            attn: AttentionParams::init(store, rng, &format!("{prefix}.attn"), dim, heads)?,
            dim,
        })
    }
}

/// Affine probe from mean-pooled visual features to K symptom logits.
#[derive(Clone, Debug)]
pub struct ProbeParams {
    pub w: ParamId,
    pub b: ParamId,
    pub symptoms: usize,
}

impl ProbeParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        symptoms: usize,
    ) -> Result<Self> {
        Ok(ProbeParams {
            w: store.register(&format!("{prefix}.w"), xavier_uniform(rng, dim, symptoms))?,
            b: store.register(&format!("{prefix}.b"), Tensor::zeros(vec![symptoms]))?,
            symptoms,
        })
    }
}

/// W̃_t: causal masked attention over context embeddings plus positions.
/// Row i depends only on tokens ≤ i.
pub fn contextual_signal(
    tape: &mut Tape,
    store: &ParamStore,
    tokens: &[usize],
    p: &ContextualParams,
) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let embed = tape.param(store, p.embed);
    let w = tape.gather_rows(&embed, tokens)?;
    let pe = positional_encoding(tokens.len(), p.dim)?;
    let x = tape.add(&w, &pe)?;
    let mask = Mask::causal(tokens.len());
    multi_head_attention(tape, store, &x, &x, &p.attn, Some(&mask), None)
}

/// Per-symptom probabilities: sigmoid(affine(mean-pool(features))), a
/// length-K tensor with every entry strictly inside (0, 1).
pub fn symptom_probabilities(
    tape: &mut Tape,
    store: &ParamStore,
    features: &Tensor,
    probe: &ProbeParams,
) -> Result<Tensor> {
    let pooled = tape.mean_rows(features)?;
    let w = tape.param(store, probe.w);
    let b = tape.param(store, probe.b);
    let logits = tape.matmul(&pooled, &w)?;
    let logits = tape.add_row(&logits, &b)?;
    let sp = tape.sigmoid(&logits)?;
    tape.reshape(&sp, vec![probe.symptoms])
}

/// Node initialization sg_i = sp_i ⊙ sf_i.
pub fn init_graph(tape: &mut Tape, sp: &Tensor, sf: &Tensor) -> Result<Tensor> {
    tape.scale_rows(sf, sp)
}

/// One graph-attention layer over the symptom graph:
/// e_ij = LeakyReLU(aᵀ[W·sg_i ; W·sg_j]) for j in the neighborhood of i,
/// α = row-softmax of e over neighbors, out_i = Σ_j α_ij W·sg_j.
pub fn gat_layer(
    tape: &mut Tape,
    store: &ParamStore,
    sg: &Tensor,
    graph: &SymptomGraph,
    p: &GatParams,
) -> Result<Tensor> {
    let k = graph.node_count();
    if sg.rows() != k {
        return Err(Error::shape(
            "gat_layer",
            format!("{} node states vs {} graph nodes", sg.rows(), k),
        ));
    }
    let w = tape.param(store, p.w);
    let h = tape.matmul(sg, &w)?;
    let a = tape.param(store, p.a);
    let a_src = tape.slice_rows(&a, 0, p.dim)?;
    let a_dst = tape.slice_rows(&a, p.dim, p.dim)?;
    let s_src = tape.matmul(&h, &a_src)?;
    let s_dst = tape.matmul(&h, &a_dst)?;
    let scores = tape.outer_add(&s_src, &s_dst)?;
    let scores = tape.activation(Activation::LeakyRelu(p.slope), &scores)?;
    let alpha = tape.softmax_rows(&scores, Some(&graph.neighborhood_mask()))?;
    tape.matmul(&alpha, &h)
}

/// The attention coefficients of [`gat_layer`], for tests asserting the
/// per-neighborhood distribution property.
pub fn gat_coefficients(
    tape: &mut Tape,
    store: &ParamStore,
    sg: &Tensor,
    graph: &SymptomGraph,
    p: &GatParams,
) -> Result<Tensor> {
    let w = tape.param(store, p.w);
    let h = tape.matmul(sg, &w)?;
    let a = tape.param(store, p.a);
    let a_src = tape.slice_rows(&a, 0, p.dim)?;
    let a_dst = tape.slice_rows(&a, p.dim, p.dim)?;
    let s_src = tape.matmul(&h, &a_src)?;
    let s_dst = tape.matmul(&h, &a_dst)?;
    let scores = tape.outer_add(&s_src, &s_dst)?;
    let scores = tape.activation(Activation::LeakyRelu(p.slope), &scores)?;
    tape.softmax_rows(&scores, Some(&graph.neighborhood_mask()))
}

// ── Symptom lexicon file ───────────────────────────────────────────────

/// Keyword lexicon mapping each symptom name to the phrases whose presence
/// in report text marks the symptom positive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub entries: Vec<(String, Vec<String>)>,
}

impl Lexicon {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Parse the tab-separated format: `name<TAB>keyword[,keyword…]`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (name, rest) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidArg(format!("lexicon line {} has no tab separator", lineno + 1))
            })?;
            let keywords: Vec<String> = rest
                .split(',')
                .map(|k| k.trim().to_string())
                .filter(|k| !k.is_empty())
                .collect();
            if keywords.is_empty() {
                return Err(Error::InvalidArg(format!(
                    "lexicon entry {name:?} has no keywords"
                )));
            }
            entries.push((name.to_string(), keywords));
        }
        if entries.is_empty() {
            return Err(Error::InvalidArg("lexicon is empty".into()));
        }
        Ok(Lexicon { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, keywords) in &self.entries {
            out.push_str(name);
            out.push('\t');
            out.push_str(&keywords.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}
