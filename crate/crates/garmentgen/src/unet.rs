//! Toy UNet shared by the denoising, silhouette, and local-enhancement
//! streams: depth-2 encoder/decoder, one residual block plus one attention
//! block per level, sinusoidal timestep embedding.

use ndarray::Array2;
use rand::Rng;

use crate::attention::{dual_cross_attention_graph, mixed_attention_graph};
use crate::error::{GarmentError, Result};
use crate::graph::Var;
use crate::nn::{
    kaiming_conv, kaiming_linear, ones1, position_encoding_2d, timestep_embedding, zeros1,
    Binder, ParamStore,
};
use crate::num::Scalar;

const TIME_EMB_DIM: usize = 64;
const TIME_HIDDEN: usize = 128;
const NORM_GROUPS: usize = 8;
const NORM_EPS: f64 = 1e-5;

/// Structure of one UNet stream.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    /// Width of level 0; level 1 doubles it.
    pub base_width: usize,
    /// Number of down/up levels. The toy topology is fixed at 2.
    pub depth: usize,
    pub head_count: usize,
    /// Dual text+color cross-attention after each self-attention site.
    pub has_cross_attention: bool,
    /// Extra silhouette key/value branch in every self-attention site.
    pub has_mixed_attention: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub d_text: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth != 2 {
            return Err(GarmentError::Parameter("toy UNet depth is fixed at 2".into()));
        }
        if self.base_width % NORM_GROUPS != 0 {
            return Err(GarmentError::Parameter(format!(
                "base_width {} must be divisible by {NORM_GROUPS}",
                self.base_width
            )));
        }
        if self.base_width % self.head_count != 0 || self.base_width % 4 != 0 {
            return Err(GarmentError::Parameter(
                "base_width must be divisible by head_count and by 4".into(),
            ));
        }
        Ok(())
    }

    /// Attention-site geometry for an `h x w` latent:
    /// `(tokens, width)` per site in forward order (down0, mid, up0).
    pub fn attention_sites(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let (h2, w2) = (down2(h), down2(w));
        vec![
            (h * w, self.base_width),
            (h2 * w2, self.base_width * 2),
            (h * w, self.base_width),
        ]
    }
}

fn down2(n: usize) -> usize {
    // stride-2 conv with k=3, pad=1
    (n + 2 - 3) / 2 + 1
}

/// One UNet stream bound to a parameter-name prefix inside a store.
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub prefix: String,
}

/// Conditioning inputs for a forward pass, already bound as graph nodes.
#[derive(Default)]
pub struct UNetCond<'a> {
    /// Text tokens `[n_t, d_text]` for the cross sites.
    pub text: Option<Var>,
    /// Color tokens `[n_c, d_text]` for the cross sites.
    pub color: Option<Var>,
    /// One silhouette sequence per attention site, in site order.
    pub sil_feats: Option<&'a [Var]>,
    pub alpha: f64,
    pub beta: f64,
}

impl UNet {
    pub fn new(cfg: UNetConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, prefix: prefix.to_string() })
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    /// Inserts freshly initialized parameters for this stream.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let w0 = self.cfg.base_width;
        let w1 = w0 * 2;
        let conv = |s: &mut ParamStore<T>, rng: &mut R, name: String, co: usize, ci: usize, k: usize| {
            s.insert(&format!("{name}.w"), kaiming_conv(co, ci, k, rng), true);
            s.insert(&format!("{name}.b"), zeros1(co), true);
        };
        let linear = |s: &mut ParamStore<T>, rng: &mut R, name: String, di: usize, dmo: usize| {
            s.insert(&format!("{name}.w"), kaiming_linear(di, dmo, rng), true);
            s.insert(&format!("{name}.b"), zeros1(dmo), true);
        };
        let norm = |s: &mut ParamStore<T>, name: String, c: usize| {
            s.insert(&format!("{name}.g"), ones1(c), true);
            s.insert(&format!("{name}.b"), zeros1(c), true);
        };

        conv(store, rng, self.name("stem"), w0, self.cfg.in_channels, 3);
        linear(store, rng, self.name("time.fc1"), TIME_EMB_DIM, TIME_HIDDEN);
        linear(store, rng, self.name("time.fc2"), TIME_HIDDEN, TIME_HIDDEN);

        for (level, cin, cout) in [
            ("down0.res", w0, w0),
            ("mid.res", w1, w1),
            ("up0.res", 2 * w0, w0),
        ] {
            let base = self.name(level);
            norm(store, format!("{base}.norm1"), cin);
            conv(store, rng, format!("{base}.conv1"), cout, cin, 3);
            linear(store, rng, format!("{base}.time_proj"), TIME_HIDDEN, cout);
            norm(store, format!("{base}.norm2"), cout);
            conv(store, rng, format!("{base}.conv2"), cout, cout, 3);
            if cin != cout {
                conv(store, rng, format!("{base}.skip"), cout, cin, 1);
            }
        }
        conv(store, rng, self.name("downsample"), w1, w0, 3);
        conv(store, rng, self.name("up0.upconv"), w0, w1, 3);

        for (site, c) in [("down0.attn", w0), ("mid.attn", w1), ("up0.attn", w0)] {
            let base = self.name(site);
            norm(store, format!("{base}.norm1"), c);
            let proj = |s: &mut ParamStore<T>, rng: &mut R, n: String, rows: usize, cols: usize| {
                let std = (1.0 / rows as f64).sqrt();
                let m = Array2::from_shape_fn((rows, cols), |_| {
                    T::from_f64(rng.gen_range(-std..std))
                });
                s.insert(&n, m.into_dyn(), true);
            };
            proj(store, rng, format!("{base}.wq"), c, c);
            proj(store, rng, format!("{base}.wk"), c, c);
            proj(store, rng, format!("{base}.wv"), c, c);
            if self.cfg.has_mixed_attention {
                // Silhouette projections start as copies of the base ones.
                let wk = store.get(&format!("{base}.wk")).value.clone();
                let wv = store.get(&format!("{base}.wv")).value.clone();
                store.insert(&format!("{base}.wpk"), wk, true);
                store.insert(&format!("{base}.wpv"), wv, true);
            }
            linear(store, rng, format!("{base}.out1"), c, c);
            if self.cfg.has_cross_attention {
                norm(store, format!("{base}.norm2"), c);
                proj(store, rng, format!("{base}.q2"), c, c);
                proj(store, rng, format!("{base}.wtk"), self.cfg.d_text, c);
                proj(store, rng, format!("{base}.wtv"), self.cfg.d_text, c);
                let wtk = store.get(&format!("{base}.wtk")).value.clone();
                let wtv = store.get(&format!("{base}.wtv")).value.clone();
                store.insert(&format!("{base}.wck"), wtk, true);
                store.insert(&format!("{base}.wcv"), wtv, true);
                linear(store, rng, format!("{base}.out2"), c, c);
            }
        }
        norm(store, self.name("out.norm"), w0);
        conv(store, rng, self.name("out.conv"), self.cfg.out_channels, w0, 3);
        // Zero-init the output conv so fresh models predict ~zero noise.
        let out_w = store.get_mut(&self.name("out.conv.w"));
        out_w.value.fill(T::zero());
    }

    fn conv<T: Scalar>(
        &self,
        b: &mut Binder<'_, '_, T>,
        name: &str,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Var {
        let w = b.param(&format!("{}.w", self.name(name)));
        let bias = b.param(&format!("{}.b", self.name(name)));
        b.g.conv2d(x, w, bias, stride, pad)
    }

    fn norm<T: Scalar>(&self, b: &mut Binder<'_, '_, T>, name: &str, x: Var) -> Var {
        let g = b.param(&format!("{}.g", self.name(name)));
        let beta = b.param(&format!("{}.b", self.name(name)));
        let c = b.g.value(x).shape()[0];
        let groups = if c % NORM_GROUPS == 0 { NORM_GROUPS } else { 1 };
        b.g.group_norm(x, g, beta, groups, T::from_f64(NORM_EPS))
    }

    fn linear<T: Scalar>(&self, b: &mut Binder<'_, '_, T>, name: &str, x: Var) -> Var {
        let w = b.param(&format!("{}.w", self.name(name)));
        let bias = b.param(&format!("{}.b", self.name(name)));
        let y = b.g.matmul(x, w);
        b.g.add_row(y, bias)
    }

    fn res_block<T: Scalar>(
        &self,
        b: &mut Binder<'_, '_, T>,
        base: &str,
        x: Var,
        t_emb: Var,
    ) -> Var {
        let cin = b.g.value(x).shape()[0];
        let h = self.norm(b, &format!("{base}.norm1"), x);
        let h = b.g.silu(h);
        let h = self.conv(b, &format!("{base}.conv1"), h, 1, 1);
        // Timestep bias, one scalar per output channel.
        let tb = self.linear(b, &format!("{base}.time_proj"), t_emb);
        let cout = b.g.value(h).shape()[0];
        let tb = b.g.reshape(tb, &[cout]);
        let h = b.g.add_channel_bias(h, tb);
        let h = self.norm(b, &format!("{base}.norm2"), h);
        let h = b.g.silu(h);
        let h = self.conv(b, &format!("{base}.conv2"), h, 1, 1);
        let skip = if cin != cout {
            self.conv(b, &format!("{base}.skip"), x, 1, 0)
        } else {
            x
        };
        b.g.add(skip, h)
    }

    /// Channel map -> token rows plus fixed position features.
    fn tokens_with_pos<T: Scalar>(&self, b: &mut Binder<'_, '_, T>, x: Var) -> (Var, usize, usize) {
        let shape = b.g.value(x).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let flat = b.g.reshape(x, &[c, h * w]);
        let tokens = b.g.transpose2(flat);
        let pe = position_encoding_2d::<T>(h, w, c);
        let pe_var = b.g.leaf(pe.into_dyn(), false);
        (b.g.add(tokens, pe_var), h, w)
    }

    fn untokens<T: Scalar>(&self, b: &mut Binder<'_, '_, T>, tokens: Var, h: usize, w: usize) -> Var {
        let c = b.g.value(tokens).shape()[1];
        let t = b.g.transpose2(tokens);
        b.g.reshape(t, &[c, h, w])
    }

    /// Attention block at `site`; returns the new map and the normalized
    /// token sequence that entered self-attention (the silhouette tap).
    fn attn_block<T: Scalar>(
        &self,
        b: &mut Binder<'_, '_, T>,
        site: &str,
        site_index: usize,
        x: Var,
        cond: &UNetCond<'_>,
    ) -> (Var, Var) {
        let base = self.name(site);
        let normed = self.norm(b, &format!("{site}.norm1"), x);
        let (t0, h, w) = self.tokens_with_pos(b, normed);

        let wq = b.param(&format!("{base}.wq"));
        let wk = b.param(&format!("{base}.wk"));
        let wv = b.param(&format!("{base}.wv"));
        let attn_out = if self.cfg.has_mixed_attention {
            let sil = cond
                .sil_feats
                .expect("mixed-attention UNet requires silhouette features (use zeros for null)");
            let wpk = b.param(&format!("{base}.wpk"));
            let wpv = b.param(&format!("{base}.wpv"));
            mixed_attention_graph(
                b.g,
                t0,
                sil[site_index],
                wq,
                wk,
                wv,
                wpk,
                wpv,
                self.cfg.head_count,
                T::from_f64(cond.alpha),
            )
        } else {
            let q = b.g.matmul(t0, wq);
            let k = b.g.matmul(t0, wk);
            let v = b.g.matmul(t0, wv);
            crate::attention::attention_graph(b.g, q, k, v, self.cfg.head_count)
        };
        let projected = self.linear(b, &format!("{site}.out1"), attn_out);
        let delta = self.untokens(b, projected, h, w);
        let mut out = b.g.add(x, delta);

        if self.cfg.has_cross_attention {
            let text = cond.text.expect("cross-attention UNet requires text tokens");
            let color = cond.color.expect("cross-attention UNet requires color tokens");
            let normed2 = self.norm(b, &format!("{site}.norm2"), out);
            let (t1, _, _) = self.tokens_with_pos(b, normed2);
            let q2 = b.param(&format!("{base}.q2"));
            let wtk = b.param(&format!("{base}.wtk"));
            let wtv = b.param(&format!("{base}.wtv"));
            let wck = b.param(&format!("{base}.wck"));
            let wcv = b.param(&format!("{base}.wcv"));
            let cross = dual_cross_attention_graph(
                b.g,
                t1,
                text,
                color,
                q2,
                wtk,
                wtv,
                wck,
                wcv,
                self.cfg.head_count,
                T::from_f64(cond.beta),
            );
            let projected2 = self.linear(b, &format!("{site}.out2"), cross);
            let delta2 = self.untokens(b, projected2, h, w);
            out = b.g.add(out, delta2);
        }
        (out, t0)
    }

    /// Full forward pass. Returns the predicted noise map and the
    /// per-site normalized token sequences (silhouette taps).
    pub fn forward<T: Scalar>(
        &self,
        b: &mut Binder<'_, '_, T>,
        x: Var,
        t: usize,
        cond: &UNetCond<'_>,
    ) -> (Var, Vec<Var>) {
        let t_emb = timestep_embedding::<T>(t, TIME_EMB_DIM);
        let t_emb = b.g.leaf(t_emb.insert_axis(ndarray::Axis(0)).into_dyn(), false);
        let t_emb = self.linear(b, "time.fc1", t_emb);
        let t_emb = b.g.silu(t_emb);
        let t_emb = self.linear(b, "time.fc2", t_emb);

        let mut taps = Vec::with_capacity(3);

        let x0 = self.conv(b, "stem", x, 1, 1);
        let d0 = self.res_block(b, "down0.res", x0, t_emb);
        let (d0, tap0) = self.attn_block(b, "down0.attn", 0, d0, cond);
        taps.push(tap0);

        let down = self.conv(b, "downsample", d0, 2, 1);
        let m = self.res_block(b, "mid.res", down, t_emb);
        let (m, tap1) = self.attn_block(b, "mid.attn", 1, m, cond);
        taps.push(tap1);

        let up = b.g.upsample2x(m);
        // Crop to the skip's spatial dims for odd sizes.
        let d0_shape = b.g.value(d0).shape().to_vec();
        let up_shape = b.g.value(up).shape().to_vec();
        let up = if up_shape[1] != d0_shape[1] || up_shape[2] != d0_shape[2] {
            let c1 = b.g.slice_axis(up, 1, 0, d0_shape[1]);
            b.g.slice_axis(c1, 2, 0, d0_shape[2])
        } else {
            up
        };
        let up = self.conv(b, "up0.upconv", up, 1, 1);
        let cat = b.g.concat(0, &[d0, up]);
        let u0 = self.res_block(b, "up0.res", cat, t_emb);
        let (u0, tap2) = self.attn_block(b, "up0.attn", 2, u0, cond);
        taps.push(tap2);

        let out = self.norm(b, "out.norm", u0);
        let out = b.g.silu(out);
        let out = self.conv(b, "out.conv", out, 1, 1);
        (out, taps)
    }
}
