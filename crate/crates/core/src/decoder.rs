//! Transformer decoder over instance queries: masked cross-attention into
//! voxel features, self-attention among queries, mask/semantic heads, and
//! the three-stage progressive aggregation driver (coarse, fine, merge).
//!
//! One parameter set is shared by every layer. Position embeddings are
//! added to attention queries and keys only, never to values. The default
//! configuration wraps the attention equations in the usual learned
//! projections, multi-head split, feed-forward sublayer, residuals and
//! layer norm; `DecoderConfig::literal` switches all of that off so unit
//! tests can check the bare equations.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoding::FourierSpec;
use crate::init::{constant, xavier};
use crate::linalg::Matrix;
use crate::losses::{AcWeights, GtTargets, PredictionSet};
use crate::matching::{center_cost, hungarian, proposal_cost, Assignment};
use crate::{Error, Result};

/// Additive stand-in for "minus infinity" in attention masks. Large enough
/// that masked entries underflow to exactly zero after softmax.
pub const NEG_SENTINEL: f64 = -1e30;

/// Attention behavior switches. `feat_dim` is D, `embed_dim` is D_e.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub feat_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub use_projections: bool,
    pub use_ffn: bool,
    pub use_norm: bool,
    pub use_residual: bool,
}

impl DecoderConfig {
    pub fn standard(feat_dim: usize, embed_dim: usize, num_classes: usize) -> Self {
        DecoderConfig {
            feat_dim,
            embed_dim,
            num_classes,
            num_heads: 4,
            ffn_hidden: 2 * feat_dim,
            use_projections: true,
            use_ffn: true,
            use_norm: true,
            use_residual: true,
        }
    }

    /// Bare-equation mode: single head, no projections, no feed-forward,
    /// no normalization, no residuals. Requires `embed_dim == feat_dim`.
    pub fn literal(feat_dim: usize, num_classes: usize) -> Self {
        DecoderConfig {
            feat_dim,
            embed_dim: feat_dim,
            num_classes,
            num_heads: 1,
            ffn_hidden: feat_dim,
            use_projections: false,
            use_ffn: false,
            use_norm: false,
            use_residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "feat_dim {} not divisible by num_heads {}",
                self.feat_dim, self.num_heads
            )));
        }
        if !self.use_projections && self.embed_dim != self.feat_dim {
            return Err(Error::InvalidConfig(
                "without projections, embed_dim must equal feat_dim".into(),
            ));
        }
        Ok(())
    }
}

/// Layer counts for the three stages. The paper's schedule is `L` coarse
/// layers, `L - 1` fine layers, and one merge layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StagePlan {
    pub coarse_layers: usize,
    pub fine_layers: usize,
    pub merge_layers: usize,
}

impl StagePlan {
    pub fn from_l(l: usize) -> Self {
        StagePlan {
            coarse_layers: l,
            fine_layers: l.saturating_sub(1),
            merge_layers: 1,
        }
    }

    /// Ablation baseline: `2L - 1` coarse-style layers, no fine or merge.
    pub fn baseline_2l_minus_1(l: usize) -> Self {
        StagePlan {
            coarse_layers: 2 * l - 1,
            fine_layers: 0,
            merge_layers: 0,
        }
    }

    pub fn total_layers(&self) -> usize {
        self.coarse_layers + self.fine_layers + self.merge_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_layers == 0 {
            return Err(Error::InvalidConfig(
                "stage plan needs at least one coarse layer".into(),
            ));
        }
        if self.merge_layers > 1 {
            return Err(Error::InvalidConfig("merge stage is a single layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Coarse,
    Fine,
    Merge,
}

/// Instance queries: features, current positions, and position embeddings.
pub struct QuerySet {
    /// k x D query features.
    pub feats: Var,
    /// k x 3 current query positions (meters).
    pub pos_coords: Matrix,
    /// k x D_e position embeddings.
    pub pos_embed: Var,
}

impl QuerySet {
    pub fn len(&self, g: &Graph) -> usize {
        g.value(self.feats).rows()
    }
}

/// Binary attention mask over (query, voxel) pairs. `allowed` entries come
/// from the sign of the previous layer's mask logits; a query row with no
/// positive logit falls back to full attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    allowed: Vec<bool>,
    k: usize,
    m: usize,
    fallback_rows: Vec<bool>,
}

impl AttentionMask {
    pub fn from_logits(logits: &Matrix) -> Self {
        let (k, m) = logits.shape();
        let mut allowed = vec![false; k * m];
        let mut fallback_rows = vec![false; k];
        for q in 0..k {
            let mut any = false;
            for j in 0..m {
                let a = logits.get(q, j) > 0.0;
                allowed[q * m + j] = a;
                any |= a;
            }
            if !any {
                fallback_rows[q] = true;
                for j in 0..m {
                    allowed[q * m + j] = true;
                }
            }
        }
        AttentionMask {
            allowed,
            k,
            m,
            fallback_rows,
        }
    }

    /// Mask that allows everything (used before the first layer has no
    /// meaning; kept for tests).
    pub fn full(k: usize, m: usize) -> Self {
        AttentionMask {
            allowed: vec![true; k * m],
            k,
            m,
            fallback_rows: vec![true; k],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.k, self.m)
    }

    pub fn is_allowed(&self, q: usize, j: usize) -> bool {
        self.allowed[q * self.m + j]
    }

    pub fn is_fallback_row(&self, q: usize) -> bool {
        self.fallback_rows[q]
    }

    /// Additive form: 0 where allowed, a large negative sentinel otherwise.
    pub fn additive(&self) -> Matrix {
        Matrix::from_fn(self.k, self.m, |q, j| {
            if self.is_allowed(q, j) {
                0.0
            } else {
                NEG_SENTINEL
            }
        })
    }
}

/// One shared parameter set for all decoder layers.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub e_proj_w: Matrix,
    pub e_proj_b: Matrix,
    pub cross_q_w: Matrix,
    pub cross_q_b: Matrix,
    pub cross_k_w: Matrix,
    pub cross_k_b: Matrix,
    pub cross_v_w: Matrix,
    pub cross_v_b: Matrix,
    pub cross_o_w: Matrix,
    pub cross_o_b: Matrix,
    pub norm1_g: Matrix,
    pub norm1_b: Matrix,
    pub self_q_w: Matrix,
    pub self_q_b: Matrix,
    pub self_k_w: Matrix,
    pub self_k_b: Matrix,
    pub self_v_w: Matrix,
    pub self_v_b: Matrix,
    pub self_o_w: Matrix,
    pub self_o_b: Matrix,
    pub norm2_g: Matrix,
    pub norm2_b: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
    pub norm3_g: Matrix,
    pub norm3_b: Matrix,
    pub mask_w: Matrix,
    pub mask_b: Matrix,
    pub sem_w: Matrix,
    pub sem_b: Matrix,
}

macro_rules! decoder_param_fields {
    ($macro:ident) => {
        $macro!(
            e_proj_w, e_proj_b, cross_q_w, cross_q_b, cross_k_w, cross_k_b, cross_v_w,
            cross_v_b, cross_o_w, cross_o_b, norm1_g, norm1_b, self_q_w, self_q_b, self_k_w,
            self_k_b, self_v_w, self_v_b, self_o_w, self_o_b, norm2_g, norm2_b, ffn_w1, ffn_b1,
            ffn_w2, ffn_b2, norm3_g, norm3_b, mask_w, mask_b, sem_w, sem_b
        )
    };
}

impl DecoderParams {
    pub fn new(cfg: &DecoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.feat_dim;
        let de = cfg.embed_dim;
        let f = cfg.ffn_hidden;
        let s1 = cfg.num_classes + 1;
        DecoderParams {
            e_proj_w: xavier(de, d, rng),
            e_proj_b: Matrix::zeros(1, d),
            cross_q_w: xavier(d, d, rng),
            cross_q_b: Matrix::zeros(1, d),
            cross_k_w: xavier(d, d, rng),
            cross_k_b: Matrix::zeros(1, d),
            cross_v_w: xavier(d, d, rng),
            cross_v_b: Matrix::zeros(1, d),
            cross_o_w: xavier(d, d, rng),
            cross_o_b: Matrix::zeros(1, d),
            norm1_g: constant(1, d, 1.0),
            norm1_b: Matrix::zeros(1, d),
            self_q_w: xavier(d, d, rng),
            self_q_b: Matrix::zeros(1, d),
            self_k_w: xavier(d, d, rng),
            self_k_b: Matrix::zeros(1, d),
            self_v_w: xavier(d, d, rng),
            self_v_b: Matrix::zeros(1, d),
            self_o_w: xavier(d, d, rng),
            self_o_b: Matrix::zeros(1, d),
            norm2_g: constant(1, d, 1.0),
            norm2_b: Matrix::zeros(1, d),
            ffn_w1: xavier(d, f, rng),
            ffn_b1: Matrix::zeros(1, f),
            ffn_w2: xavier(f, d, rng),
            ffn_b2: Matrix::zeros(1, d),
            norm3_g: constant(1, d, 1.0),
            norm3_b: Matrix::zeros(1, d),
            mask_w: xavier(d, d, rng),
            mask_b: Matrix::zeros(1, d),
            sem_w: xavier(d, s1, rng),
            sem_b: Matrix::zeros(1, s1),
        }
    }

    pub fn param_names(prefix: &str) -> Vec<String> {
        macro_rules! names {
            ($($f:ident),*) => { vec![$(format!("{prefix}.{}", stringify!($f))),*] };
        }
        decoder_param_fields!(names)
    }

    pub fn params(&self) -> Vec<&Matrix> {
        macro_rules! refs {
            ($($f:ident),*) => { vec![$(&self.$f),*] };
        }
        decoder_param_fields!(refs)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        macro_rules! muts {
            ($($f:ident),*) => { vec![$(&mut self.$f),*] };
        }
        decoder_param_fields!(muts)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundDecoderParams {
        macro_rules! binds {
            ($($f:ident),*) => { BoundDecoderParams { $($f: g.leaf(self.$f.clone())),* } };
        }
        decoder_param_fields!(binds)
    }
}

/// Tape handles for one bound [`DecoderParams`].
pub struct BoundDecoderParams {
    pub e_proj_w: Var,
    pub e_proj_b: Var,
    pub cross_q_w: Var,
    pub cross_q_b: Var,
    pub cross_k_w: Var,
    pub cross_k_b: Var,
    pub cross_v_w: Var,
    pub cross_v_b: Var,
    pub cross_o_w: Var,
    pub cross_o_b: Var,
    pub norm1_g: Var,
    pub norm1_b: Var,
    pub self_q_w: Var,
    pub self_q_b: Var,
    pub self_k_w: Var,
    pub self_k_b: Var,
    pub self_v_w: Var,
    pub self_v_b: Var,
    pub self_o_w: Var,
    pub self_o_b: Var,
    pub norm2_g: Var,
    pub norm2_b: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub norm3_g: Var,
    pub norm3_b: Var,
    pub mask_w: Var,
    pub mask_b: Var,
    pub sem_w: Var,
    pub sem_b: Var,
}

impl BoundDecoderParams {
    pub fn vars(&self) -> Vec<Var> {
        macro_rules! vars {
            ($($f:ident),*) => { vec![$(self.$f),*] };
        }
        decoder_param_fields!(vars)
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Position embeddings projected into feature space (identity in literal
/// mode, where D_e == D).
fn project_embed(g: &mut Graph, p: &BoundDecoderParams, cfg: &DecoderConfig, e: Var) -> Var {
    if cfg.use_projections {
        linear(g, e, p.e_proj_w, p.e_proj_b)
    } else {
        e
    }
}

/// Multi-head scaled dot-product attention with an optional additive mask.
/// `queries`/`keys` already include position terms; `values` never do.
fn attention(
    g: &mut Graph,
    cfg: &DecoderConfig,
    queries: Var,
    keys: Var,
    values: Var,
    mask: Option<&AttentionMask>,
) -> Var {
    let d = cfg.feat_dim;
    let h = cfg.num_heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask_const = mask.map(|m| g.leaf(m.additive()));

    let mut head_outputs = Vec::with_capacity(h);
    for head in 0..h {
        let qs = g.slice_cols(queries, head * dh, dh);
        let ks = g.slice_cols(keys, head * dh, dh);
        let vs = g.slice_cols(values, head * dh, dh);
        let scores = g.matmul_nt(qs, ks);
        let scores = g.scale(scores, scale);
        let scores = match mask_const {
            Some(mc) => g.add(scores, mc),
            None => scores,
        };
        let att = g.softmax_rows(scores);
        head_outputs.push(g.matmul(att, vs));
    }
    let mut out = head_outputs[0];
    for &ho in &head_outputs[1..] {
        out = g.concat_cols(out, ho);
    }
    out
}

/// Cross-attention sublayer: queries attend to voxel features under the
/// instance mask. Public as a building block for tests.
pub fn cross_attention(
    g: &mut Graph,
    p: &BoundDecoderParams,
    cfg: &DecoderConfig,
    q_feats: Var,
    q_embed_proj: Var,
    kv_feats: Var,
    kv_embed_proj: Var,
    mask: &AttentionMask,
) -> Var {
    let q_in = g.add(q_feats, q_embed_proj);
    let k_in = g.add(kv_feats, kv_embed_proj);
    let (qs, ks, vs) = if cfg.use_projections {
        (
            linear(g, q_in, p.cross_q_w, p.cross_q_b),
            linear(g, k_in, p.cross_k_w, p.cross_k_b),
            linear(g, kv_feats, p.cross_v_w, p.cross_v_b),
        )
    } else {
        (q_in, k_in, kv_feats)
    };
    let att = attention(g, cfg, qs, ks, vs, Some(mask));
    let out = if cfg.use_projections {
        linear(g, att, p.cross_o_w, p.cross_o_b)
    } else {
        att
    };
    let out = if cfg.use_residual {
        g.add(q_feats, out)
    } else {
        out
    };
    if cfg.use_norm {
        g.layer_norm_rows(out, p.norm1_g, p.norm1_b, 1e-5)
    } else {
        out
    }
}

/// Self-attention sublayer among queries (no mask).
pub fn self_attention(
    g: &mut Graph,
    p: &BoundDecoderParams,
    cfg: &DecoderConfig,
    q_feats: Var,
    q_embed_proj: Var,
) -> Var {
    let qk_in = g.add(q_feats, q_embed_proj);
    let (qs, ks, vs) = if cfg.use_projections {
        (
            linear(g, qk_in, p.self_q_w, p.self_q_b),
            linear(g, qk_in, p.self_k_w, p.self_k_b),
            linear(g, q_feats, p.self_v_w, p.self_v_b),
        )
    } else {
        (qk_in, qk_in, q_feats)
    };
    let att = attention(g, cfg, qs, ks, vs, None);
    let out = if cfg.use_projections {
        linear(g, att, p.self_o_w, p.self_o_b)
    } else {
        att
    };
    let out = if cfg.use_residual {
        g.add(q_feats, out)
    } else {
        out
    };
    if cfg.use_norm {
        g.layer_norm_rows(out, p.norm2_g, p.norm2_b, 1e-5)
    } else {
        out
    }
}

fn feed_forward(g: &mut Graph, p: &BoundDecoderParams, cfg: &DecoderConfig, x: Var) -> Var {
    if !cfg.use_ffn {
        return x;
    }
    let h = linear(g, x, p.ffn_w1, p.ffn_b1);
    let h = g.gelu(h);
    let out = linear(g, h, p.ffn_w2, p.ffn_b2);
    let out = if cfg.use_residual { g.add(x, out) } else { out };
    if cfg.use_norm {
        g.layer_norm_rows(out, p.norm3_g, p.norm3_b, 1e-5)
    } else {
        out
    }
}

/// One decoder layer: masked cross-attention, then self-attention, then
/// the feed-forward sublayer. Query positions and embeddings pass through
/// unchanged.
pub fn decoder_layer(
    g: &mut Graph,
    p: &BoundDecoderParams,
    cfg: &DecoderConfig,
    q: &QuerySet,
    kv_feats: Var,
    kv_embeds: Var,
    mask: &AttentionMask,
) -> Result<QuerySet> {
    let (k, m) = mask.shape();
    if g.value(q.feats).rows() != k || g.value(kv_feats).rows() != m {
        return Err(Error::ShapeMismatch {
            context: "decoder_layer",
            expected: format!("mask {k} x {m}"),
            got: format!(
                "queries {}, voxels {}",
                g.value(q.feats).rows(),
                g.value(kv_feats).rows()
            ),
        });
    }
    let qe = project_embed(g, p, cfg, q.pos_embed);
    let ekv = project_embed(g, p, cfg, kv_embeds);
    let q1 = cross_attention(g, p, cfg, q.feats, qe, kv_feats, ekv, mask);
    let q2 = self_attention(g, p, cfg, q1, qe);
    let q3 = feed_forward(g, p, cfg, q2);
    if !g.value(q3).is_finite() {
        return Err(Error::NumericOverflow {
            context: "decoder_layer",
        });
    }
    Ok(QuerySet {
        feats: q3,
        pos_coords: q.pos_coords.clone(),
        pos_embed: q.pos_embed,
    })
}

/// Mask logits (k x M) through the mask head plus the derived attention
/// mask for the next layer.
pub fn compute_mask(
    g: &mut Graph,
    p: &BoundDecoderParams,
    cfg: &DecoderConfig,
    q_feats: Var,
    kv_feats: Var,
) -> (Var, AttentionMask) {
    let mq = if cfg.use_projections {
        linear(g, q_feats, p.mask_w, p.mask_b)
    } else {
        q_feats
    };
    let logits = g.matmul_nt(mq, kv_feats);
    let mask = AttentionMask::from_logits(g.value(logits));
    (logits, mask)
}

/// Semantic logits (k x (S+1)).
pub fn semantic_logits(g: &mut Graph, p: &BoundDecoderParams, q_feats: Var) -> Var {
    linear(g, q_feats, p.sem_w, p.sem_b)
}

/// Mean voxel coordinate over positive mask logits per query; rows with no
/// positive logit keep their fallback (previous) position.
pub fn aggregation_average(mask_logits: &Matrix, coords: &Matrix, fallback: &Matrix) -> Matrix {
    let (k, m) = mask_logits.shape();
    assert_eq!(coords.rows(), m, "aggregation_average coords");
    assert_eq!(fallback.shape(), (k, 3), "aggregation_average fallback");
    let mut out = Matrix::zeros(k, 3);
    for q in 0..k {
        let mut n = 0usize;
        let mut acc = [0.0; 3];
        for j in 0..m {
            if mask_logits.get(q, j) > 0.0 {
                n += 1;
                for a in 0..3 {
                    acc[a] += coords.get(j, a);
                }
            }
        }
        if n == 0 {
            out.row_mut(q).copy_from_slice(fallback.row(q));
        } else {
            for a in 0..3 {
                out.set(q, a, acc[a] / n as f64);
            }
        }
    }
    out
}

/// Inputs to the progressive driver, all restricted to one voxel domain.
pub struct ProgressiveInputs<'a> {
    /// M x D voxel features.
    pub feats: Var,
    /// M x D_e voxel position embeddings.
    pub embeds: Var,
    /// M x 3 voxel coordinates.
    pub coords: &'a Matrix,
    /// k initial query indices into the domain.
    pub init_indices: &'a [usize],
    pub gt: &'a GtTargets,
    pub lambdas: AcWeights,
    pub fourier: &'a FourierSpec,
}

/// Per-layer outputs and targets.
pub struct LayerRecord {
    pub stage: Stage,
    pub mask_logits: Var,
    pub semantic_logits: Var,
    pub assignment: Assignment,
    /// Value of the query position embedding used by this layer (for trace
    /// assertions on the fine-stage contract).
    pub pos_embed_values: Matrix,
}

/// Full trace of one progressive run.
pub struct ProgressiveTrace {
    pub layers: Vec<LayerRecord>,
    /// Refined query centers (set when the fine or merge stage ran).
    pub c_avg: Option<Matrix>,
    /// The one-shot center-matching assignment of the fine stage.
    pub center_assignment: Option<Assignment>,
    pub final_feats: Var,
}

fn proposal_assignment(
    g: &Graph,
    logits: Var,
    sem: Var,
    gt: &GtTargets,
    lambdas: AcWeights,
) -> Result<Assignment> {
    if gt.num_instances() == 0 {
        return Ok(Assignment::empty(g.value(logits).rows()));
    }
    let pred = PredictionSet {
        mask_logits: g.value(logits).clone(),
        semantic_logits: g.value(sem).clone(),
        confidence: vec![0.0; g.value(logits).rows()],
    };
    let cost = proposal_cost(&pred, gt, lambdas)?;
    Ok(hungarian(&cost))
}

/// Run the coarse/fine/merge schedule.
///
/// Coarse: positions fixed at the initial samples, targets reassigned by
/// proposal matching after every layer. Fine: positions refined once by
/// aggregation averaging, targets fixed once by center matching. Merge:
/// one layer keeping the refined positions, targets via proposal matching.
pub fn run_progressive(
    g: &mut Graph,
    p: &BoundDecoderParams,
    cfg: &DecoderConfig,
    plan: StagePlan,
    inp: &ProgressiveInputs,
) -> Result<ProgressiveTrace> {
    cfg.validate()?;
    plan.validate()?;
    let k = inp.init_indices.len();
    if k == 0 {
        return Err(Error::EmptyInput);
    }

    let init_coords = Matrix::from_fn(k, 3, |i, a| inp.coords.get(inp.init_indices[i], a));
    let q_feats = g.gather_rows(inp.feats, inp.init_indices);
    let q_embed = g.gather_rows(inp.embeds, inp.init_indices);
    let mut q = QuerySet {
        feats: q_feats,
        pos_coords: init_coords,
        pos_embed: q_embed,
    };

    let (_logits0, mut amask) = compute_mask(g, p, cfg, q.feats, inp.feats);
    let mut layers: Vec<LayerRecord> = Vec::with_capacity(plan.total_layers());
    let mut c_avg: Option<Matrix> = None;
    let mut center_assignment: Option<Assignment> = None;

    let schedule: Vec<Stage> = std::iter::repeat(Stage::Coarse)
        .take(plan.coarse_layers)
        .chain(std::iter::repeat(Stage::Fine).take(plan.fine_layers))
        .chain(std::iter::repeat(Stage::Merge).take(plan.merge_layers))
        .collect();

    for (idx, &stage) in schedule.iter().enumerate() {
        q = decoder_layer(g, p, cfg, &q, inp.feats, inp.embeds, &amask)?;
        let (logits, next_mask) = compute_mask(g, p, cfg, q.feats, inp.feats);
        let sem = semantic_logits(g, p, q.feats);
        amask = next_mask;

        let assignment = match stage {
            Stage::Coarse | Stage::Merge => {
                proposal_assignment(g, logits, sem, inp.gt, inp.lambdas)?
            }
            Stage::Fine => center_assignment
                .clone()
                .expect("fine stage runs after the refinement point"),
        };

        layers.push(LayerRecord {
            stage,
            mask_logits: logits,
            semantic_logits: sem,
            assignment,
            pos_embed_values: g.value(q.pos_embed).clone(),
        });

        // After the last coarse layer, refine positions once and fix the
        // fine-stage targets by center matching.
        let last_coarse = idx + 1 == plan.coarse_layers;
        let refinement_needed = plan.fine_layers > 0 || plan.merge_layers > 0;
        if last_coarse && refinement_needed {
            let avg = aggregation_average(g.value(logits), inp.coords, &q.pos_coords);
            let q_e_avg = inp.fourier.encode_unchecked(&avg);
            q.pos_coords = avg.clone();
            q.pos_embed = g.leaf(q_e_avg);
            if plan.fine_layers > 0 {
                let centers =
                    Matrix::from_fn(inp.gt.centers.len(), 3, |i, a| inp.gt.centers[i][a]);
                let assignment = if inp.gt.centers.is_empty() {
                    Assignment::empty(k)
                } else {
                    hungarian(&center_cost(&avg, &centers)?)
                };
                center_assignment = Some(assignment);
            }
            c_avg = Some(avg);
        }
    }

    Ok(ProgressiveTrace {
        layers,
        c_avg,
        center_assignment,
        final_feats: q.feats,
    })
}

/// Trainable parameter count of one decoder parameter set (shared across
/// layers, so independent of the stage plan).
pub fn parameter_count(params: &DecoderParams) -> usize {
    params.params().iter().map(|m| m.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn literal_params(cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> DecoderParams {
        DecoderParams::new(cfg, rng)
    }

    #[test]
    fn one_hot_mask_copies_voxel_features() {
        // Literal mode: value "projection" is identity, so a mask that
        // allows exactly one voxel per query makes cross-attention copy
        // that voxel's features.
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let cfg = DecoderConfig::literal(4, 2);
        let params = literal_params(&cfg, &mut rng);
        let mut g = Graph::new();
        let p = params.bind(&mut g);

        let kv = rand_mat(&mut rng, 5, 4);
        let kvv = g.leaf(kv.clone());
        let zeros_kv = g.leaf(Matrix::zeros(5, 4));
        let qf = g.leaf(rand_mat(&mut rng, 3, 4));
        let qe = g.leaf(Matrix::zeros(3, 4));

        // Query q attends only to voxel 2q.
        let logits = Matrix::from_fn(3, 5, |q, j| if j == 2 * q { 1.0 } else { -1.0 });
        let mask = AttentionMask::from_logits(&logits);
        let out = cross_attention(&mut g, &p, &cfg, qf, qe, kvv, zeros_kv, &mask);
        for q in 0..3 {
            for c in 0..4 {
                assert!((g.value(out).get(q, c) - kv.get(2 * q, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_query_self_attention_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let cfg = DecoderConfig::literal(4, 2);
        let params = literal_params(&cfg, &mut rng);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let qf_val = rand_mat(&mut rng, 1, 4);
        let qf = g.leaf(qf_val.clone());
        let qe = g.leaf(rand_mat(&mut rng, 1, 4));
        let out = self_attention(&mut g, &p, &cfg, qf, qe);
        for c in 0..4 {
            assert!((g.value(out).get(0, c) - qf_val.get(0, c)).abs() < 1e-12);
        }
    }

    // Independent straight-line reference for one literal decoder layer.
    fn reference_literal_layer(
        qf: &Matrix,
        qe: &Matrix,
        f: &Matrix,
        e: &Matrix,
        mask: &AttentionMask,
    ) -> Matrix {
        let d = qf.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let (k, m) = mask.shape();
        // Cross attention.
        let mut q1 = Matrix::zeros(k, d);
        for qi in 0..k {
            let mut scores = vec![0.0; m];
            for j in 0..m {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += (qf.get(qi, c) + qe.get(qi, c)) * (f.get(j, c) + e.get(j, c));
                }
                scores[j] = dot * scale + if mask.is_allowed(qi, j) { 0.0 } else { NEG_SENTINEL };
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..m {
                for c in 0..d {
                    q1.set(qi, c, q1.get(qi, c) + exps[j] / z * f.get(j, c));
                }
            }
        }
        // Self attention.
        let mut q2 = Matrix::zeros(k, d);
        for qi in 0..k {
            let mut scores = vec![0.0; k];
            for j in 0..k {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += (q1.get(qi, c) + qe.get(qi, c)) * (q1.get(j, c) + qe.get(j, c));
                }
                scores[j] = dot * scale;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..k {
                for c in 0..d {
                    q2.set(qi, c, q2.get(qi, c) + exps[j] / z * q1.get(j, c));
                }
            }
        }
        q2
    }

    #[test]
    fn literal_layer_matches_reference_script() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let cfg = DecoderConfig::literal(4, 2);
        let params = literal_params(&cfg, &mut rng);

        let qf = rand_mat(&mut rng, 2, 4);
        let qe = rand_mat(&mut rng, 2, 4);
        let f = rand_mat(&mut rng, 3, 4);
        let e = rand_mat(&mut rng, 3, 4);
        let logits = rand_mat(&mut rng, 2, 3);
        let mask = AttentionMask::from_logits(&logits);

        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let q = QuerySet {
            feats: g.leaf(qf.clone()),
            pos_coords: Matrix::zeros(2, 3),
            pos_embed: g.leaf(qe.clone()),
        };
        let fv = g.leaf(f.clone());
        let ev = g.leaf(e.clone());
        let out = decoder_layer(&mut g, &p, &cfg, &q, fv, ev, &mask).unwrap();

        let want = reference_literal_layer(&qf, &qe, &f, &e, &mask);
        for qi in 0..2 {
            for c in 0..4 {
                assert!(
                    (g.value(out.feats).get(qi, c) - want.get(qi, c)).abs() < 1e-10,
                    "({qi},{c})"
                );
            }
        }
    }

    #[test]
    fn compute_mask_fallback_and_sign_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let cfg = DecoderConfig::literal(3, 2);
        let params = literal_params(&cfg, &mut rng);
        let mut g = Graph::new();
        let p = params.bind(&mut g);

        // Query 0 orthogonal to all voxel features -> zero logits -> full
        // fallback row. Query 1 equals voxel 1 -> positive diagonal entry.
        let kv = Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let qf = Matrix::from_vec(2, 3, vec![0.0, 0.0, 5.0, 0.0, 1.0, 0.0]);
        let kvv = g.leaf(kv);
        let qfv = g.leaf(qf);
        let (logits, mask) = compute_mask(&mut g, &p, &cfg, qfv, kvv);
        assert!(mask.is_fallback_row(0));
        assert!(mask.is_allowed(0, 0) && mask.is_allowed(0, 1));
        assert!(!mask.is_fallback_row(1));
        assert!(mask.is_allowed(1, 1));
        assert!(!mask.is_allowed(1, 0));
        //

        // Sign agreement on a random case (no fallback rows).
        let big = rand_mat(&mut rng, 4, 6);
        let bigv = g.leaf(big.clone());
        let qv = g.leaf(rand_mat(&mut rng, 3, 6));
        let (logits2, mask2) = compute_mask(&mut g, &p, &cfg, qv, bigv);
        for q in 0..3 {
            if mask2.is_fallback_row(q) {
                continue;
            }
            for j in 0..4 {
                assert_eq!(mask2.is_allowed(q, j), g.value(logits2).get(q, j) > 0.0);
            }
        }
        let _ = logits;
    }

    #[test]
    fn identity_queries_unmask_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let cfg = DecoderConfig::literal(4, 2);
        let params = literal_params(&cfg, &mut rng);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let f = rand_mat(&mut rng, 5, 4);
        let fv = g.leaf(f.clone());
        let qv = g.leaf(f.clone());
        let (_, mask) = compute_mask(&mut g, &p, &cfg, qv, fv);
        for i in 0..5 {
            // Q_f = F: the diagonal dot product is a squared norm > 0.
            assert!(mask.is_allowed(i, i), "diagonal ({i},{i}) masked");
        }
    }

    #[test]
    fn aggregation_average_examples() {
        let logits = Matrix::from_vec(2, 3, vec![1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
        let coords = Matrix::from_vec(3, 3, vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 9.0, 9.0, 9.0]);
        let fallback = Matrix::from_vec(2, 3, vec![5.0, 5.0, 5.0, 7.0, 7.0, 7.0]);
        let avg = aggregation_average(&logits, &coords, &fallback);
        assert_eq!(avg.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(avg.row(1), &[7.0, 7.0, 7.0]); // fallback row
    }

    #[test]
    fn aggregation_average_matches_masked_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let logits = rand_mat(&mut rng, 4, 12);
        let coords = rand_mat(&mut rng, 12, 3);
        let fallback = rand_mat(&mut rng, 4, 3);
        let avg = aggregation_average(&logits, &coords, &fallback);
        for q in 0..4 {
            let pos: Vec<usize> = (0..12).filter(|&j| logits.get(q, j) > 0.0).collect();
            if pos.is_empty() {
                assert_eq!(avg.row(q), fallback.row(q));
            } else {
                for a in 0..3 {
                    let want: f64 =
                        pos.iter().map(|&j| coords.get(j, a)).sum::<f64>() / pos.len() as f64;
                    assert!((avg.get(q, a) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_under_mask_and_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let cfg = DecoderConfig::literal(4, 2);
        let params = literal_params(&cfg, &mut rng);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        // One all-negative row forces the fallback path.
        let logits = Matrix::from_fn(3, 6, |q, j| if q == 2 { -1.0 } else { rng.gen_range(-1.0..1.0) });
        let mask = AttentionMask::from_logits(&logits);
        let qs = g.leaf(rand_mat(&mut rng, 3, 4));
        let ks = g.leaf(rand_mat(&mut rng, 6, 4));
        let scores = g.matmul_nt(qs, ks);
        let scores = g.scale(scores, 0.5);
        let mc = g.leaf(mask.additive());
        let masked = g.add(scores, mc);
        let att = g.softmax_rows(masked);
        for q in 0..3 {
            let s: f64 = g.value(att).row(q).iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {q}: {s}");
        }
        let _ = p;
    }

    #[test]
    fn cross_attention_output_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let cfg = DecoderConfig::literal(4, 2);
        let params = literal_params(&cfg, &mut rng);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let kv = rand_mat(&mut rng, 7, 4);
        let kvv = g.leaf(kv.clone());
        let ev = g.leaf(rand_mat(&mut rng, 7, 4));
        let qf = g.leaf(rand_mat(&mut rng, 3, 4));
        let qe = g.leaf(rand_mat(&mut rng, 3, 4));
        let logits = rand_mat(&mut rng, 3, 7);
        let mask = AttentionMask::from_logits(&logits);
        let out = cross_attention(&mut g, &p, &cfg, qf, qe, kvv, ev, &mask);
        for q in 0..3 {
            for c in 0..4 {
                let col: Vec<f64> = (0..7)
                    .filter(|&j| mask.is_allowed(q, j))
                    .map(|j| kv.get(j, c))
                    .collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = g.value(out).get(q, c);
                assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "({q},{c}): {v} not in [{lo},{hi}]");
            }
        }
    }

    #[test]
    fn parameter_count_independent_of_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let cfg = DecoderConfig::standard(16, 12, 3);
        let params = DecoderParams::new(&cfg, &mut rng);
        let n = parameter_count(&params);
        // The plan never allocates parameters; sharing is structural.
        assert_eq!(StagePlan::from_l(2).total_layers(), 4);
        assert_eq!(StagePlan::from_l(6).total_layers(), 12);
        assert!(n > 0);
        let params2 = DecoderParams::new(&cfg, &mut rng);
        assert_eq!(n, parameter_count(&params2));
    }

    fn toy_gt(m: usize) -> GtTargets {
        GtTargets {
            masks: vec![
                (0..m).map(|j| j < m / 2).collect(),
                (0..m).map(|j| j >= m / 2).collect(),
            ],
            classes: vec![0, 1],
            centers: vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
        }
    }

    #[test]
    fn plan_1_0_0_equals_single_layer_plus_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let cfg = DecoderConfig::literal(4, 2);
        let params = literal_params(&cfg, &mut rng);
        let m = 8;
        let f = rand_mat(&mut rng, m, 4);
        let e = rand_mat(&mut rng, m, 4);
        let coords = rand_mat(&mut rng, m, 3);
        let gt = toy_gt(m);
        let spec = FourierSpec::new(1, 1.0).unwrap();
        let init = vec![1usize, 5];

        // Progressive with a single coarse layer.
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let fv = g.leaf(f.clone());
        let ev = g.leaf(e.clone());
        let inp = ProgressiveInputs {
            feats: fv,
            embeds: ev,
            coords: &coords,
            init_indices: &init,
            gt: &gt,
            lambdas: AcWeights::default(),
            fourier: &spec,
        };
        let plan = StagePlan {
            coarse_layers: 1,
            fine_layers: 0,
            merge_layers: 0,
        };
        let trace = run_progressive(&mut g, &p, &cfg, plan, &inp).unwrap();
        assert_eq!(trace.layers.len(), 1);

        // By hand: same single layer + proposal match.
        let mut g2 = Graph::new();
        let p2 = params.bind(&mut g2);
        let fv2 = g2.leaf(f.clone());
        let ev2 = g2.leaf(e.clone());
        let qf = g2.gather_rows(fv2, &init);
        let qe = g2.gather_rows(ev2, &init);
        let q = QuerySet {
            feats: qf,
            pos_coords: Matrix::from_fn(2, 3, |i, a| coords.get(init[i], a)),
            pos_embed: qe,
        };
        let (_l0, mask0) = compute_mask(&mut g2, &p2, &cfg, q.feats, fv2);
        let q1 = decoder_layer(&mut g2, &p2, &cfg, &q, fv2, ev2, &mask0).unwrap();
        let (logits, _) = compute_mask(&mut g2, &p2, &cfg, q1.feats, fv2);
        let sem = semantic_logits(&mut g2, &p2, q1.feats);
        let want_assignment =
            proposal_assignment(&g2, logits, sem, &gt, AcWeights::default()).unwrap();

        assert_eq!(trace.layers[0].assignment, want_assignment);
        for (a, b) in g
            .value(trace.layers[0].mask_logits)
            .data()
            .iter()
            .zip(g2.value(logits).data())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fine_stage_targets_and_embeddings_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let cfg = DecoderConfig::standard(8, 6, 2);
        let params = DecoderParams::new(&cfg, &mut rng);
        let m = 12;
        let f = rand_mat(&mut rng, m, 8);
        let e = rand_mat(&mut rng, m, 6);
        let coords = rand_mat(&mut rng, m, 3);
        let gt = toy_gt(m);
        let spec = FourierSpec::new(1, 1.0).unwrap();
        let init: Vec<usize> = vec![0, 3, 7, 9];

        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let fv = g.leaf(f);
        let ev = g.leaf(e);
        let inp = ProgressiveInputs {
            feats: fv,
            embeds: ev,
            coords: &coords,
            init_indices: &init,
            gt: &gt,
            lambdas: AcWeights::default(),
            fourier: &spec,
        };
        let plan = StagePlan::from_l(3); // 3 coarse, 2 fine, 1 merge
        let trace = run_progressive(&mut g, &p, &cfg, plan, &inp).unwrap();
        assert_eq!(trace.layers.len(), 6);

        let fine: Vec<&LayerRecord> = trace
            .layers
            .iter()
            .filter(|r| r.stage == Stage::Fine)
            .collect();
        assert_eq!(fine.len(), 2);
        assert_eq!(fine[0].assignment, fine[1].assignment);
        assert_eq!(
            fine[0].assignment,
            trace.center_assignment.clone().unwrap()
        );
        // Bitwise identical position embeddings across fine layers.
        assert_eq!(fine[0].pos_embed_values, fine[1].pos_embed_values);
        // The merge layer keeps the refined embedding.
        let merge = trace
            .layers
            .iter()
            .find(|r| r.stage == Stage::Merge)
            .unwrap();
        assert_eq!(merge.pos_embed_values, fine[0].pos_embed_values);
        // And it differs from the coarse embedding (refinement happened).
        assert_ne!(trace.layers[0].pos_embed_values, fine[0].pos_embed_values);
    }

    #[test]
    fn query_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let cfg = DecoderConfig::standard(8, 6, 2);
        let params = DecoderParams::new(&cfg, &mut rng);
        let m = 10;
        let f = rand_mat(&mut rng, m, 8);
        let e = rand_mat(&mut rng, m, 6);
        let qf = rand_mat(&mut rng, 4, 8);
        let qe = rand_mat(&mut rng, 4, 6);
        let logits = rand_mat(&mut rng, 4, m);

        let run = |perm: &[usize]| -> Matrix {
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let fv = g.leaf(f.clone());
            let ev = g.leaf(e.clone());
            let qfp = Matrix::from_fn(4, 8, |i, j| qf.get(perm[i], j));
            let qep = Matrix::from_fn(4, 6, |i, j| qe.get(perm[i], j));
            let lp = Matrix::from_fn(4, m, |i, j| logits.get(perm[i], j));
            let q = QuerySet {
                feats: g.leaf(qfp),
                pos_coords: Matrix::zeros(4, 3),
                pos_embed: g.leaf(qep),
            };
            let mask = AttentionMask::from_logits(&lp);
            let out = decoder_layer(&mut g, &p, &cfg, &q, fv, ev, &mask).unwrap();
            g.value(out.feats).clone()
        };

        let id: Vec<usize> = (0..4).collect();
        let perm = vec![2usize, 0, 3, 1];
        let base = run(&id);
        let permuted = run(&perm);
        for i in 0..4 {
            for j in 0..8 {
                assert!(
                    (permuted.get(i, j) - base.get(perm[i], j)).abs() < 1e-9,
                    "({i},{j})"
                );
            }
        }
    }

    #[test]
    fn non_finite_activations_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let cfg = DecoderConfig::literal(4, 2);
        let params = literal_params(&cfg, &mut rng);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let huge = g.leaf(Matrix::from_fn(3, 4, |_, _| 1e308));
        let ev = g.leaf(Matrix::zeros(3, 4));
        let qf = g.leaf(Matrix::from_fn(2, 4, |_, _| 1e308));
        let qe = g.leaf(Matrix::zeros(2, 4));
        let q = QuerySet {
            feats: qf,
            pos_coords: Matrix::zeros(2, 3),
            pos_embed: qe,
        };
        let mask = AttentionMask::full(2, 3);
        let r = decoder_layer(&mut g, &p, &cfg, &q, huge, ev, &mask);
        assert!(matches!(r, Err(Error::NumericOverflow { .. })));
    }
}
