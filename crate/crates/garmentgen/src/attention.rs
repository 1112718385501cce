//! Mixed attention (silhouette injection) and dual cross-attention
//! (text + color injection).
//!
//! Both conditioning paths share the same structure: a frozen base branch
//! plus a scaled second branch whose key/value projections are the only new
//! parameters. The graph-level builders are what the UNets call; the pure
//! functions below wrap them for direct use and testing.

use ndarray::Array2;
use rand::Rng;

use crate::error::{GarmentError, Result};
use crate::graph::{Graph, Var};
use crate::num::Scalar;
use crate::tensor::{FeatureRole, FeatureSequence};

/// Self-attention projections plus the trainable silhouette branch.
///
/// `w_q/w_k/w_v` are frozen base parameters; `wp_k/wp_v` are the learnable
/// silhouette projections, copy-initialized from `w_k/w_v`.
#[derive(Debug, Clone)]
pub struct AttentionWeights<T> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub wp_k: Array2<T>,
    pub wp_v: Array2<T>,
    pub head_count: usize,
}

impl<T: Scalar> AttentionWeights<T> {
    /// Random base projections; silhouette branch initialized from the base.
    pub fn init<R: Rng + ?Sized>(
        d_model: usize,
        d_cond: usize,
        d_attn: usize,
        head_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_attn % head_count != 0 {
            return Err(GarmentError::Parameter(format!(
                "d_attn {d_attn} not divisible by head_count {head_count}"
            )));
        }
        let w_q = random_proj(d_model, d_attn, rng);
        let w_k = random_proj(d_model, d_attn, rng);
        let w_v = random_proj(d_model, d_attn, rng);
        let (wp_k, wp_v) = init_from_base_adapted(&w_k, &w_v, d_cond);
        Ok(Self { w_q, w_k, w_v, wp_k, wp_v, head_count })
    }
}

/// Cross-attention projections: frozen text branch, trainable color branch.
#[derive(Debug, Clone)]
pub struct DualCrossWeights<T> {
    pub w_q: Array2<T>,
    pub wt_k: Array2<T>,
    pub wt_v: Array2<T>,
    pub wc_k: Array2<T>,
    pub wc_v: Array2<T>,
    pub head_count: usize,
}

impl<T: Scalar> DualCrossWeights<T> {
    pub fn init<R: Rng + ?Sized>(
        d_model: usize,
        d_text: usize,
        d_attn: usize,
        head_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_attn % head_count != 0 {
            return Err(GarmentError::Parameter(format!(
                "d_attn {d_attn} not divisible by head_count {head_count}"
            )));
        }
        let w_q = random_proj(d_model, d_attn, rng);
        let wt_k = random_proj(d_text, d_attn, rng);
        let wt_v = random_proj(d_text, d_attn, rng);
        // Color branch starts as a copy of the text branch so its early
        // outputs stay in the base model's operating range.
        let (wc_k, wc_v) = init_from_base(&wt_k, &wt_v);
        Ok(Self { w_q, wt_k, wt_v, wc_k, wc_v, head_count })
    }
}

fn random_proj<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    let std = (1.0 / rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        T::from_f64(rng.gen_range(-std..std))
    })
}

/// Copy-initializes the conditioning projections from the base `w_k/w_v`.
/// The returned matrices are independent copies.
pub fn init_from_base<T: Scalar>(w_k: &Array2<T>, w_v: &Array2<T>) -> (Array2<T>, Array2<T>) {
    (w_k.clone(), w_v.clone())
}

/// Copy-initialization generalized to `d_cond != d_model`: rows are
/// truncated or zero-padded to the conditioning dimension.
pub fn init_from_base_adapted<T: Scalar>(
    w_k: &Array2<T>,
    w_v: &Array2<T>,
    d_cond: usize,
) -> (Array2<T>, Array2<T>) {
    let adapt = |w: &Array2<T>| -> Array2<T> {
        if w.nrows() == d_cond {
            return w.clone();
        }
        let mut out = Array2::zeros((d_cond, w.ncols()));
        let rows = d_cond.min(w.nrows());
        out.slice_mut(ndarray::s![..rows, ..]).assign(&w.slice(ndarray::s![..rows, ..]));
        out
    };
    (adapt(w_k), adapt(w_v))
}

/// Multi-head `Softmax(QK^T / sqrt(d_head)) V` on graph nodes.
///
/// `q/k/v` are `[n, d_attn]` nodes; the head split happens along the
/// feature axis and the outputs are re-concatenated. With one head this is
/// exactly the single-head formula.
pub fn attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    head_count: usize,
) -> Var {
    let d_qk = g.value(q).shape()[1];
    let d_v = g.value(v).shape()[1];
    assert!(d_qk % head_count == 0 && d_v % head_count == 0);
    let d_head = d_qk / head_count;
    let dv_head = d_v / head_count;
    let scale = T::from_f64(1.0 / (d_head as f64).sqrt());
    let mut heads = Vec::with_capacity(head_count);
    for h in 0..head_count {
        let qh = g.slice_axis(q, 1, h * d_head, d_head);
        let kh = g.slice_axis(k, 1, h * d_head, d_head);
        let vh = g.slice_axis(v, 1, h * dv_head, dv_head);
        let kt = transpose_graph(g, kh);
        let logits = g.matmul(qh, kt);
        let scaled = g.scale(logits, scale);
        let attn = g.softmax_rows(scaled);
        heads.push(g.matmul(attn, vh));
    }
    if head_count == 1 {
        heads[0]
    } else {
        g.concat(1, &heads)
    }
}

/// Transpose of a `[n,m]` node, via reshape-free data movement.
fn transpose_graph<T: Scalar>(g: &mut Graph<T>, a: Var) -> Var {
    // matmul(I, a)^T is wasteful; do it as a dedicated cheap op: reuse
    // slice/concat machinery would also be wasteful, so transpose eagerly
    // and route gradients by transposing back.
    g.transpose2(a)
}

/// Mixed attention (silhouette conditioning):
/// `Attn(ZWq, ZWk, ZWv) + alpha * Attn(ZWq, Cs Wk', Cs Wv')`.
pub fn mixed_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    c_s: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    wp_k: Var,
    wp_v: Var,
    head_count: usize,
    alpha: T,
) -> Var {
    let q = g.matmul(z, w_q);
    let k = g.matmul(z, w_k);
    let v = g.matmul(z, w_v);
    let self_branch = attention_graph(g, q, k, v, head_count);
    if alpha == T::zero() {
        return self_branch;
    }
    let kp = g.matmul(c_s, wp_k);
    let vp = g.matmul(c_s, wp_v);
    let cond_branch = attention_graph(g, q, kp, vp, head_count);
    let scaled = g.scale(cond_branch, alpha);
    g.add(self_branch, scaled)
}

/// Dual cross-attention (text + color conditioning):
/// `Attn(Q, Kt, Vt) + beta * Attn(Q, Kc, Vc)`.
#[allow(clippy::too_many_arguments)]
pub fn dual_cross_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    c_t: Var,
    c_c: Var,
    w_q: Var,
    wt_k: Var,
    wt_v: Var,
    wc_k: Var,
    wc_v: Var,
    head_count: usize,
    beta: T,
) -> Var {
    let q = g.matmul(z, w_q);
    let kt = g.matmul(c_t, wt_k);
    let vt = g.matmul(c_t, wt_v);
    let text_branch = attention_graph(g, q, kt, vt, head_count);
    if beta == T::zero() {
        return text_branch;
    }
    let kc = g.matmul(c_c, wc_k);
    let vc = g.matmul(c_c, wc_v);
    let color_branch = attention_graph(g, q, kc, vc, head_count);
    let scaled = g.scale(color_branch, beta);
    g.add(text_branch, scaled)
}

fn check_dims<T: Scalar>(q: &FeatureSequence<T>, k: &FeatureSequence<T>, v: &FeatureSequence<T>) -> Result<()> {
    if k.n_tokens() != v.n_tokens() {
        return Err(GarmentError::Shape(format!(
            "K has {} tokens but V has {}",
            k.n_tokens(),
            v.n_tokens()
        )));
    }
    if q.dim() != k.dim() {
        return Err(GarmentError::Shape(format!(
            "Q dim {} != K dim {}",
            q.dim(),
            k.dim()
        )));
    }
    Ok(())
}

/// Single-head scaled dot-product attention over raw feature sequences.
pub fn scaled_dot_attention<T: Scalar>(
    q: &FeatureSequence<T>,
    k: &FeatureSequence<T>,
    v: &FeatureSequence<T>,
) -> Result<FeatureSequence<T>> {
    check_dims(q, k, v)?;
    let mut g: Graph<T> = Graph::new();
    let qv = g.leaf(q.tokens.clone().into_dyn(), false);
    let kv = g.leaf(k.tokens.clone().into_dyn(), false);
    let vv = g.leaf(v.tokens.clone().into_dyn(), false);
    let out = attention_graph(&mut g, qv, kv, vv, 1);
    let tokens = g
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    FeatureSequence::new(tokens, q.role)
}

/// Pure-function mixed attention over feature sequences (Eq. 1/2 surface).
pub fn mixed_attention<T: Scalar>(
    z: &FeatureSequence<T>,
    c_s: &FeatureSequence<T>,
    w: &AttentionWeights<T>,
    alpha: T,
) -> Result<FeatureSequence<T>> {
    if z.role != FeatureRole::Latent {
        return Err(GarmentError::Contract(format!("Z role must be Latent, got {:?}", z.role)));
    }
    if c_s.role != FeatureRole::Silhouette {
        return Err(GarmentError::Contract(format!(
            "C_s role must be Silhouette, got {:?}",
            c_s.role
        )));
    }
    if z.dim() != w.w_q.nrows() || c_s.dim() != w.wp_k.nrows() {
        return Err(GarmentError::Shape(format!(
            "token dims ({}, {}) incompatible with weights ({}, {})",
            z.dim(),
            c_s.dim(),
            w.w_q.nrows(),
            w.wp_k.nrows()
        )));
    }
    let mut g: Graph<T> = Graph::new();
    let zv = g.leaf(z.tokens.clone().into_dyn(), false);
    let sv = g.leaf(c_s.tokens.clone().into_dyn(), false);
    let wq = g.leaf(w.w_q.clone().into_dyn(), false);
    let wk = g.leaf(w.w_k.clone().into_dyn(), false);
    let wv = g.leaf(w.w_v.clone().into_dyn(), false);
    let wpk = g.leaf(w.wp_k.clone().into_dyn(), false);
    let wpv = g.leaf(w.wp_v.clone().into_dyn(), false);
    let out = mixed_attention_graph(&mut g, zv, sv, wq, wk, wv, wpk, wpv, w.head_count, alpha);
    let tokens = g
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    FeatureSequence::new(tokens, FeatureRole::Latent)
}

/// Pure-function dual cross-attention over feature sequences (Eq. 3 surface).
pub fn dual_cross_attention<T: Scalar>(
    z: &FeatureSequence<T>,
    c_t: &FeatureSequence<T>,
    c_c: &FeatureSequence<T>,
    w: &DualCrossWeights<T>,
    beta: T,
) -> Result<FeatureSequence<T>> {
    if z.role != FeatureRole::Latent {
        return Err(GarmentError::Contract(format!("Z role must be Latent, got {:?}", z.role)));
    }
    if c_t.role != FeatureRole::Text {
        return Err(GarmentError::Contract(format!("C_t role must be Text, got {:?}", c_t.role)));
    }
    if c_c.role != FeatureRole::Color {
        return Err(GarmentError::Contract(format!("C_c role must be Color, got {:?}", c_c.role)));
    }
    if z.dim() != w.w_q.nrows() || c_t.dim() != w.wt_k.nrows() || c_c.dim() != w.wc_k.nrows() {
        return Err(GarmentError::Shape("token dims incompatible with weights".into()));
    }
    let mut g: Graph<T> = Graph::new();
    let zv = g.leaf(z.tokens.clone().into_dyn(), false);
    let tv = g.leaf(c_t.tokens.clone().into_dyn(), false);
    let cv = g.leaf(c_c.tokens.clone().into_dyn(), false);
    let wq = g.leaf(w.w_q.clone().into_dyn(), false);
    let wtk = g.leaf(w.wt_k.clone().into_dyn(), false);
    let wtv = g.leaf(w.wt_v.clone().into_dyn(), false);
    let wck = g.leaf(w.wc_k.clone().into_dyn(), false);
    let wcv = g.leaf(w.wc_v.clone().into_dyn(), false);
    let out = dual_cross_attention_graph(
        &mut g, zv, tv, cv, wq, wtk, wtv, wck, wcv, w.head_count, beta,
    );
    let tokens = g
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    FeatureSequence::new(tokens, FeatureRole::Latent)
}
