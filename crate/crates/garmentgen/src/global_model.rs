//! Stage-I global appearance model: a trainable silhouette UNet feeding
//! mixed attention inside a frozen denoising UNet, plus the color adapter
//! on the cross-attention path.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::encoders::{COLOR_FEATURE_DIM, D_TEXT, N_COLOR_TOKENS};
use crate::error::{GarmentError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Binder, Census, ParamStore};
use crate::num::Scalar;
use crate::schedule::TimestepIndex;
use crate::tensor::{FeatureRole, FeatureSequence, Latent, LatentLayout};
use crate::unet::{UNet, UNetCond, UNetConfig};

pub const DENOISE_PREFIX: &str = "denoise";
pub const SIL_PREFIX: &str = "sil";
pub const COLOR_PROJ: &str = "color_adapter.proj.w";

/// Per-site silhouette features extracted by the silhouette UNet; one
/// sequence per mixed-attention site of the denoising UNet.
#[derive(Debug, Clone)]
pub struct SilhouetteFeatures<T> {
    pub sites: Vec<FeatureSequence<T>>,
}

impl<T: Scalar> SilhouetteFeatures<T> {
    /// All-zero features: the null silhouette condition. The mixed branch
    /// contributes exactly zero for these.
    pub fn null(cfg: &UNetConfig, h: usize, w: usize) -> Self {
        let sites = cfg
            .attention_sites(h, w)
            .into_iter()
            .map(|(n, c)| FeatureSequence::zeros(n, c, FeatureRole::Silhouette))
            .collect();
        Self { sites }
    }
}

/// Stage-I model: both UNet streams plus the color adapter projection,
/// sharing one parameter store.
#[derive(Debug, Clone)]
pub struct GlobalModel<T> {
    pub params: ParamStore<T>,
    pub denoise: UNet,
    pub sil: UNet,
}

impl<T: Scalar> GlobalModel<T> {
    /// Fresh model. All parameters start trainable (base pretraining
    /// phase); [`GlobalModel::enter_adapter_phase`] applies the stage-I
    /// freeze policy.
    pub fn init(base_width: usize, head_count: usize, seed: u64) -> Result<Self> {
        let denoise_cfg = UNetConfig {
            base_width,
            depth: 2,
            head_count,
            has_cross_attention: true,
            has_mixed_attention: true,
            in_channels: 4,
            out_channels: 4,
            d_text: D_TEXT,
        };
        let sil_cfg = UNetConfig {
            has_cross_attention: false,
            has_mixed_attention: false,
            ..denoise_cfg.clone()
        };
        let denoise = UNet::new(denoise_cfg, DENOISE_PREFIX)?;
        let sil = UNet::new(sil_cfg, SIL_PREFIX)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        denoise.init_params(&mut params, &mut rng);
        sil.init_params(&mut params, &mut rng);
        let std = (1.0 / COLOR_FEATURE_DIM as f64).sqrt();
        let proj = Array2::from_shape_fn((COLOR_FEATURE_DIM, N_COLOR_TOKENS * D_TEXT), |_| {
            T::from_f64(rand::Rng::gen_range(&mut rng, -std..std))
        });
        params.insert(COLOR_PROJ, proj.into_dyn(), true);
        Ok(Self { params, denoise, sil })
    }

    /// Base-pretraining trainability: the denoising UNet's own parameters
    /// learn; adapter branches are inert (run with alpha = beta = 0).
    pub fn enter_base_phase(&mut self) {
        self.params.set_trainable_prefix("", false);
        self.params.set_trainable_prefix(&format!("{DENOISE_PREFIX}."), true);
        for (name, p) in self.params.iter_mut() {
            if is_adapter_projection(name) {
                p.trainable = false;
            }
        }
    }

    /// Transition from the pretrained base into adapter training:
    /// re-initializes the silhouette UNet as a copy of the base stream,
    /// re-copies the mixed/color projections from the trained base
    /// weights, and applies the stage-I freeze policy.
    pub fn enter_adapter_phase(&mut self) {
        // Silhouette UNet inherits the base topology weights (it has no
        // cross/mixed parameters of its own).
        let copies: Vec<(String, ndarray::ArrayD<T>)> = self
            .params
            .iter()
            .filter(|(name, _)| name.starts_with(&format!("{SIL_PREFIX}.")))
            .map(|(name, _)| {
                let base_name = name.replacen(SIL_PREFIX, DENOISE_PREFIX, 1);
                (name.clone(), self.params.get(&base_name).value.clone())
            })
            .collect();
        for (name, value) in copies {
            self.params.get_mut(&name).value = value;
        }
        // Conditioning projections restart from the trained base weights.
        for site in ["down0.attn", "mid.attn", "up0.attn"] {
            let copy = |p: &mut ParamStore<T>, from: String, to: String| {
                let v = p.get(&from).value.clone();
                p.get_mut(&to).value = v;
            };
            let d = |s: &str| format!("{DENOISE_PREFIX}.{site}.{s}");
            copy(&mut self.params, d("wk"), d("wpk"));
            copy(&mut self.params, d("wv"), d("wpv"));
            copy(&mut self.params, d("wtk"), d("wck"));
            copy(&mut self.params, d("wtv"), d("wcv"));
        }

        self.params.set_trainable_prefix("", false);
        self.params.set_trainable_prefix(&format!("{SIL_PREFIX}."), true);
        self.params.set_trainable_prefix(COLOR_PROJ, true);
        for (name, p) in self.params.iter_mut() {
            if is_adapter_projection(name) {
                p.trainable = true;
            }
        }
    }

    /// Parameter census; in the adapter phase the trainable set is exactly
    /// {silhouette UNet, W'_k/W'_v, W^c_k/W^c_v, color projection}.
    pub fn count_trainable(&self) -> Census {
        self.params.census()
    }

    /// Graph-side silhouette feature extraction (one tap per site).
    pub fn silhouette_features_graph(
        &self,
        b: &mut Binder<'_, '_, T>,
        sil_latent: Var,
        t: usize,
    ) -> Vec<Var> {
        let cond = UNetCond::default();
        let (_, taps) = self.sil.forward(b, sil_latent, t, &cond);
        taps
    }

    /// Extracts per-site silhouette features from the clean silhouette
    /// latent at timestep `t`.
    pub fn silhouette_features(
        &self,
        sil_latent: &Latent<T>,
        t: TimestepIndex,
    ) -> Result<SilhouetteFeatures<T>> {
        if sil_latent.layout != LatentLayout::Garment {
            return Err(GarmentError::Contract(format!(
                "silhouette latent must use the garment layout, got {:?}",
                sil_latent.layout
            )));
        }
        let mut g: Graph<T> = Graph::new();
        let mut b = Binder::new(&mut g, &self.params, false);
        let x = b.g.leaf(sil_latent.data.clone().into_dyn(), false);
        let taps = self.silhouette_features_graph(&mut b, x, t.0);
        let sites = taps
            .into_iter()
            .map(|v| {
                let tokens = g
                    .value(v)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                FeatureSequence { tokens, role: FeatureRole::Silhouette }
            })
            .collect();
        Ok(SilhouetteFeatures { sites })
    }

    /// Graph-side denoising forward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn global_denoise_graph(
        &self,
        b: &mut Binder<'_, '_, T>,
        z_t: Var,
        t: usize,
        text: Var,
        color: Var,
        sil_feats: &[Var],
        alpha: f64,
        beta: f64,
    ) -> Var {
        let cond = UNetCond {
            text: Some(text),
            color: Some(color),
            sil_feats: Some(sil_feats),
            alpha,
            beta,
        };
        let (out, _) = self.denoise.forward(b, z_t, t, &cond);
        out
    }

    /// Predicted noise for a garment latent under full conditioning.
    #[allow(clippy::too_many_arguments)]
    pub fn global_denoise(
        &self,
        z_t: &Latent<T>,
        t: TimestepIndex,
        c_t: &FeatureSequence<T>,
        c_c: &FeatureSequence<T>,
        c_s: &SilhouetteFeatures<T>,
        alpha: f64,
        beta: f64,
    ) -> Result<Latent<T>> {
        if z_t.layout != LatentLayout::Garment {
            return Err(GarmentError::Shape(format!(
                "global_denoise expects a garment latent, got {:?}",
                z_t.layout
            )));
        }
        let (h, w) = (z_t.height(), z_t.width());
        let sites = self.denoise.cfg.attention_sites(h, w);
        if c_s.sites.len() != sites.len() {
            return Err(GarmentError::Contract(format!(
                "silhouette features carry {} sites, denoising UNet has {}",
                c_s.sites.len(),
                sites.len()
            )));
        }
        for (f, (n, c)) in c_s.sites.iter().zip(&sites) {
            if f.n_tokens() != *n || f.dim() != *c {
                return Err(GarmentError::Shape(format!(
                    "silhouette site {}x{} does not match required {}x{}",
                    f.n_tokens(),
                    f.dim(),
                    n,
                    c
                )));
            }
        }
        let mut g: Graph<T> = Graph::new();
        let mut b = Binder::new(&mut g, &self.params, false);
        let z = b.g.leaf(z_t.data.clone().into_dyn(), false);
        let text = b.g.leaf(c_t.tokens.clone().into_dyn(), false);
        let color = b.g.leaf(c_c.tokens.clone().into_dyn(), false);
        let sil_vars: Vec<Var> = c_s
            .sites
            .iter()
            .map(|f| b.g.leaf(f.tokens.clone().into_dyn(), false))
            .collect();
        let out = self.global_denoise_graph(&mut b, z, t.0, text, color, &sil_vars, alpha, beta);
        let data = g
            .value(out)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        Ok(Latent { data, layout: LatentLayout::Garment })
    }
}

/// True for the four adapter projection tensors of a mixed/cross site.
fn is_adapter_projection(name: &str) -> bool {
    name.starts_with(DENOISE_PREFIX)
        && (name.ends_with(".wpk")
            || name.ends_with(".wpv")
            || name.ends_with(".wck")
            || name.ends_with(".wcv"))
}

/// Stage-I trainable groups, for census assertions and per-group checks.
pub fn stage1_group_of(name: &str) -> Option<&'static str> {
    if name.starts_with("sil.") {
        Some("silhouette_unet")
    } else if name.ends_with(".wpk") || name.ends_with(".wpv") {
        Some("mixed_attention_projections")
    } else if name.ends_with(".wck") || name.ends_with(".wcv") {
        Some("color_cross_projections")
    } else if name == COLOR_PROJ {
        Some("color_adapter")
    } else {
        None
    }
}
