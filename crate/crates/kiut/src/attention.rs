//! Attention primitives: scaled-dot and multi-head attention, grid geometry
//! features, the extrinsic-relationship bias, and region-relationship
//! self-attention with learnable memory slots extending keys and values.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{scaled_normal, xavier_uniform, Mask, ParamId, ParamStore, Tape, Tensor};

/// Projection set for one multi-head attention block. The per-head d×d_n
/// query/key/value projections are stored fused as d×d matrices whose column
/// block h is head h.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArg(format!(
                "dim {dim} not divisible by heads {heads}"
            )));
        }
        let w_q = store.register(&format!("{prefix}.wq"), xavier_uniform(rng, dim, dim))?;
        let w_k = store.register(&format!("{prefix}.wk"), xavier_uniform(rng, dim, dim))?;
        let w_v = store.register(&format!("{prefix}.wv"), xavier_uniform(rng, dim, dim))?;
        let w_o = store.register(&format!("{prefix}.wo"), xavier_uniform(rng, dim, dim))?;
        Ok(AttentionParams {
            dim,
            heads,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// softmax(Q·Kᵀ/√d_n + bias) · V over already-projected single-head inputs.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    mask: Option<&Mask>,
) -> Result<Tensor> {
    let d_n = q.cols();
    if k.cols() != d_n {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("q cols {} vs k cols {}", d_n, k.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("k rows {} vs v rows {}", k.rows(), v.rows()),
        ));
    }
    let weights = attention_weights(tape, q, k, bias, mask)?;
    tape.matmul(&weights, v)
}

/// The softmax attention matrix of `scaled_dot_attention`, exposed so tests
/// can assert on the distribution itself.
pub fn attention_weights(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    mask: Option<&Mask>,
) -> Result<Tensor> {
    let d_n = q.cols();
    let k_t = tape.transpose(k)?;
    let logits = tape.matmul(q, &k_t)?;
    let mut logits = tape.scale(&logits, 1.0 / (d_n as f64).sqrt())?;
    if let Some(b) = bias {
        logits = tape.add(&logits, b)?;
    }
    tape.softmax_rows(&logits, mask)
}

/// Multi-head attention with queries from `x` and keys/values from `y`:
/// heads run scaled-dot attention on their column slice, the concatenated
/// head outputs go through the output projection. `bias` is per head.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    x: &Tensor,
    y: &Tensor,
    p: &AttentionParams,
    mask: Option<&Mask>,
    bias: Option<&[Tensor]>,
) -> Result<Tensor> {
    if x.cols() != p.dim || y.cols() != p.dim {
        return Err(Error::shape(
            "multi_head_attention",
            format!(
                "input dims {}/{} vs params dim {}",
                x.cols(),
                y.cols(),
                p.dim
            ),
        ));
    }
    if let Some(b) = bias {
        if b.len() != p.heads {
            return Err(Error::shape(
                "multi_head_attention",
                format!("{} bias matrices for {} heads", b.len(), p.heads),
            ));
        }
    }
    let w_q = tape.param(store, p.w_q);
    let w_k = tape.param(store, p.w_k);
    let w_v = tape.param(store, p.w_v);
    let q_full = tape.matmul(x, &w_q)?;
    let k_full = tape.matmul(y, &w_k)?;
    let v_full = tape.matmul(y, &w_v)?;
    concat_head_attention(tape, store, &q_full, &k_full, &v_full, p, mask, bias)
}

/// Shared tail of MHA and RRSA: split projected tensors into heads, attend,
/// concatenate, project.
#[allow(clippy::too_many_arguments)]
fn concat_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    q_full: &Tensor,
    k_full: &Tensor,
    v_full: &Tensor,
    p: &AttentionParams,
    mask: Option<&Mask>,
    bias: Option<&[Tensor]>,
) -> Result<Tensor> {
    let d_n = p.head_dim();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let q_h = tape.slice_cols(q_full, h * d_n, d_n)?;
        let k_h = tape.slice_cols(k_full, h * d_n, d_n)?;
        let v_h = tape.slice_cols(v_full, h * d_n, d_n)?;
        let b_h = bias.map(|b| &b[h]);
        heads.push(scaled_dot_attention(tape, &q_h, &k_h, &v_h, b_h, mask)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let concat = tape.concat_cols(&refs)?;
    let w_o = tape.param(store, p.w_o);
    tape.matmul(&concat, &w_o)
}

// ── Region geometry ────────────────────────────────────────────────────

/// Axis-aligned box per grid region: center, width, height in cell units.
#[derive(Clone, Debug)]
pub struct RegionBoxes {
    pub centers: Vec<(f64, f64)>,
    pub widths: Vec<f64>,
    pub heights: Vec<f64>,
}

impl RegionBoxes {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Boxes for a grid flattened row-major: cell (r, c) is a unit box centered
/// at (c, r).
pub fn region_geometry(grid_w: usize, grid_h: usize) -> Result<RegionBoxes> {
    if grid_w == 0 || grid_h == 0 {
        return Err(Error::InvalidArg("zero-sized grid".into()));
    }
    let s = grid_w * grid_h;
    let mut centers = Vec::with_capacity(s);
    for i in 0..s {
        let r = i / grid_w;
        let c = i % grid_w;
        centers.push((c as f64, r as f64));
    }
    Ok(RegionBoxes {
        centers,
        widths: vec![1.0; s],
        heights: vec![1.0; s],
    })
}

/// Log-ratio geometry features between every region pair, flattened to
/// [S², 4]. The positional terms use an epsilon clamp, log((|Δ|+ε)/w_i),
/// which keeps the i=j diagonal finite.
pub fn relative_geometry(boxes: &RegionBoxes, epsilon: f64) -> Result<Tensor> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "relative_geometry epsilon {epsilon} must be > 0"
        )));
    }
    let s = boxes.len();
    let mut data = Vec::with_capacity(s * s * 4);
    for i in 0..s {
        let (xi, yi) = boxes.centers[i];
        let (wi, hi) = (boxes.widths[i], boxes.heights[i]);
        for j in 0..s {
            let (xj, yj) = boxes.centers[j];
            let (wj, hj) = (boxes.widths[j], boxes.heights[j]);
            data.push((((xi - xj).abs() + epsilon) / wi).ln());
            data.push((((yi - yj).abs() + epsilon) / hi).ln());
            data.push((wi / wj).ln());
            data.push((hi / hj).ln());
        }
    }
    Tensor::from_vec(vec![s * s, 4], data)
}

// ── RRSA ───────────────────────────────────────────────────────────────

/// Parameters of one region-relationship self-attention block: a standard
/// attention projection set, the geometry feature map (FC may be shared
/// between blocks), per-head geometry vectors w_g, and the memory extension
/// M_k/M_v/M_I with `memory_slots` rows.
#[derive(Clone, Debug)]
pub struct RrsaParams {
    pub attn: AttentionParams,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    /// [heads, d_g]
    pub w_g: ParamId,
    /// [memory_slots, d] — only when memory_slots > 0
    pub m_k: Option<ParamId>,
    pub m_v: Option<ParamId>,
    /// [heads·S, memory_slots]
    pub m_i: Option<ParamId>,
    pub memory_slots: usize,
    pub d_g: usize,
    pub regions: usize,
}

impl RrsaParams {
    /// Register a block's own parameters; `fc` is reused when given so the
    /// geometry feature map can be shared across encoder layers.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        d_g: usize,
        regions: usize,
        memory_slots: usize,
        fc: Option<(ParamId, ParamId)>,
    ) -> Result<Self> {
        let attn = AttentionParams::init(store, rng, prefix, dim, heads)?;
        let (fc_w, fc_b) = match fc {
            Some(pair) => pair,
            None => (
                store.register(&format!("{prefix}.fc_w"), xavier_uniform(rng, 4, d_g))?,
                store.register(&format!("{prefix}.fc_b"), Tensor::zeros(vec![d_g]))?,
            ),
        };
        let w_g = store.register(&format!("{prefix}.w_g"), xavier_uniform(rng, heads, d_g))?;
        let sigma = 1.0 / (dim as f64).sqrt();
        let (m_k, m_v, m_i) = if memory_slots > 0 {
            (
                Some(store.register(
                    &format!("{prefix}.m_k"),
                    scaled_normal(rng, vec![memory_slots, dim], sigma),
                )?),
                Some(store.register(
                    &format!("{prefix}.m_v"),
                    scaled_normal(rng, vec![memory_slots, dim], sigma),
                )?),
                Some(store.register(
                    &format!("{prefix}.m_i"),
                    scaled_normal(rng, vec![heads * regions, memory_slots], sigma),
                )?),
            )
        } else {
            (None, None, None)
        };
        Ok(RrsaParams {
            attn,
            fc_w,
            fc_b,
            w_g,
            m_k,
            m_v,
            m_i,
            memory_slots,
            d_g,
            regions,
        })
    }
}

/// FC(rg): affine map of raw geometry features, shared by every head (and,
/// when the FC parameters are shared, by every layer).
pub fn geometry_features(
    tape: &mut Tape,
    store: &ParamStore,
    rg: &Tensor,
    fc_w: ParamId,
    fc_b: ParamId,
) -> Result<Tensor> {
    let fc_w = tape.param(store, fc_w);
    let fc_b = tape.param(store, fc_b);
    let g = tape.matmul(rg, &fc_w)?;
    tape.add_row(&g, &fc_b)
}

/// Per-head ER blocks from precomputed FC(rg): ER_h = ReLU(FC(rg) · w_g[h]),
/// reshaped to S×S.
pub fn extrinsic_from_features(
    tape: &mut Tape,
    store: &ParamStore,
    g: &Tensor,
    w_g: ParamId,
    heads: usize,
) -> Result<Vec<Tensor>> {
    let s2 = g.rows();
    let s = (s2 as f64).sqrt().round() as usize;
    if s * s != s2 {
        return Err(Error::shape(
            "extrinsic_relationship",
            format!("feature rows {s2} is not a square"),
        ));
    }
    let w_g = tape.param(store, w_g);
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let w_h = tape.slice_rows(&w_g, h, 1)?;
        let w_col = tape.transpose(&w_h)?;
        let scores = tape.matmul(g, &w_col)?;
        let er = tape.relu(&scores)?;
        per_head.push(tape.reshape(&er, vec![s, s])?);
    }
    Ok(per_head)
}

/// Per-head extrinsic relationship bias: ER_h = ReLU(w_g[h] · FC(rg)),
/// reshaped to S×S. Nonnegative by construction and independent of the
/// input features.
pub fn extrinsic_relationship(
    tape: &mut Tape,
    store: &ParamStore,
    rg: &Tensor,
    p: &RrsaParams,
) -> Result<Vec<Tensor>> {
    let g = geometry_features(tape, store, rg, p.fc_w, p.fc_b)?;
    extrinsic_from_features(tape, store, &g, p.w_g, p.attn.heads)
}

/// Region-relationship self-attention: keys and values are extended with
/// `m_n` memory rows, the attention logits carry the per-head bias
/// [ER, M_I]. With `m_n` = 0 and no bias this reduces to plain multi-head
/// self-attention.
pub fn rrsa(
    tape: &mut Tape,
    store: &ParamStore,
    x: &Tensor,
    er: Option<&[Tensor]>,
    p: &RrsaParams,
    m_n: usize,
) -> Result<Tensor> {
    let s = x.rows();
    if m_n > p.memory_slots {
        return Err(Error::InvalidArg(format!(
            "m_n {} exceeds allocated memory slots {}",
            m_n, p.memory_slots
        )));
    }
    if let Some(er) = er {
        if er.len() != p.attn.heads {
            return Err(Error::shape(
                "rrsa",
                format!("{} ER matrices for {} heads", er.len(), p.attn.heads),
            ));
        }
        for e in er {
            if e.rows() != s || e.cols() != s {
                return Err(Error::shape(
                    "rrsa",
                    format!("ER {}x{} vs {} regions", e.rows(), e.cols(), s),
                ));
            }
        }
    }

    let w_q = tape.param(store, p.attn.w_q);
    let w_k = tape.param(store, p.attn.w_k);
    let w_v = tape.param(store, p.attn.w_v);
    let q_full = tape.matmul(x, &w_q)?;
    let k_proj = tape.matmul(x, &w_k)?;
    let v_proj = tape.matmul(x, &w_v)?;

    let (k_full, v_full) = if m_n > 0 {
        let m_k = tape.param(store, p.m_k.expect("memory slots allocated"));
        let m_v = tape.param(store, p.m_v.expect("memory slots allocated"));
        let m_k = tape.slice_rows(&m_k, 0, m_n)?;
        let m_v = tape.slice_rows(&m_v, 0, m_n)?;
        (
            tape.concat_rows(&[&k_proj, &m_k])?,
            tape.concat_rows(&[&v_proj, &m_v])?,
        )
    } else {
        (k_proj, v_proj)
    };

    let bias = build_rrsa_bias(tape, store, er, p, s, m_n)?;
    concat_head_attention(
        tape,
        store,
        &q_full,
        &k_full,
        &v_full,
        &p.attn,
        None,
        bias.as_deref(),
    )
}

/// Per-head logit bias [ER, M_I]: the S×S extrinsic block (zeros when ER is
/// disabled) extended by the memory bias columns when m_n > 0.
fn build_rrsa_bias(
    tape: &mut Tape,
    store: &ParamStore,
    er: Option<&[Tensor]>,
    p: &RrsaParams,
    s: usize,
    m_n: usize,
) -> Result<Option<Vec<Tensor>>> {
    if er.is_none() && m_n == 0 {
        return Ok(None);
    }
    let m_i = if m_n > 0 {
        Some(tape.param(store, p.m_i.expect("memory slots allocated")))
    } else {
        None
    };
    let mut bias = Vec::with_capacity(p.attn.heads);
    for h in 0..p.attn.heads {
        let er_block = match er {
            Some(er) => er[h].clone(),
            None => Tensor::zeros(vec![s, s]),
        };
        let b = match &m_i {
            Some(m_i) => {
                let rows = tape.slice_rows(m_i, h * p.regions, s)?;
                let cols = tape.slice_cols(&rows, 0, m_n)?;
                tape.concat_cols(&[&er_block, &cols])?
            }
            None => er_block,
        };
        bias.push(b);
    }
    Ok(Some(bias))
}
