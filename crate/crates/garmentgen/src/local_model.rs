//! Stage-II local enhancement model: A3 latent assembly (width-concat of
//! masked garment and logo, channel-concat with noise and mask) and a
//! self-attention-only UNet over the 9-channel input.

use ndarray::{Array3, Axis};

use crate::encoders::D_TEXT;
use crate::error::{GarmentError, Result};
use crate::global_model::{GlobalModel, DENOISE_PREFIX};
use crate::graph::{Graph, Var};
use crate::nn::{kaiming_conv, zeros1, Binder, ParamStore};
use crate::num::Scalar;
use crate::tensor::{Latent, LatentLayout};
use crate::unet::{UNet, UNetCond, UNetConfig};

pub const LOCAL_PREFIX: &str = "local";

/// Assembled A3 conditioning for one sample.
#[derive(Debug, Clone)]
pub struct A3Input<T> {
    /// Clean width-concatenated garment|logo latent (the denoising target).
    pub x0: Latent<T>,
    /// Width-concatenated (garment (x) mask, logo) conditioning latent.
    pub x_cond: Latent<T>,
    /// Mask channel, zero-padded over the logo half.
    pub c_mask: Latent<T>,
}

/// Width-concatenates garment and logo latents into the A3 parts:
/// `x0 = concat(C_g, C_l)`, `X = concat(C_g (x) C_m, C_l)`,
/// `C_M = concat(C_m, 0)`.
pub fn assemble_a3<T: Scalar>(
    c_g: &Latent<T>,
    c_l: &Latent<T>,
    c_m: &Latent<T>,
) -> Result<A3Input<T>> {
    let (cg_c, h, w) = c_g.data.dim();
    let (cl_c, lh, lw) = c_l.data.dim();
    let (cm_c, mh, mw) = c_m.data.dim();
    if cg_c != 4 || cl_c != 4 || (lh, lw) != (h, w) {
        return Err(GarmentError::Shape(format!(
            "garment {:?} and logo {:?} latents must both be 4x{h}x{w}",
            c_g.data.dim(),
            c_l.data.dim()
        )));
    }
    if cm_c != 1 || (mh, mw) != (h, w) {
        return Err(GarmentError::Shape(format!(
            "mask latent must be 1x{h}x{w}, got {:?}",
            c_m.data.dim()
        )));
    }
    if c_m.data.iter().any(|v| *v != T::zero() && *v != T::one()) {
        return Err(GarmentError::Contract("mask latent must be binary".into()));
    }

    let mut x0 = Array3::zeros((4, h, 2 * w));
    let mut x_cond = Array3::zeros((4, h, 2 * w));
    for c in 0..4 {
        for y in 0..h {
            for x in 0..w {
                let g = c_g.data[[c, y, x]];
                let l = c_l.data[[c, y, x]];
                x0[[c, y, x]] = g;
                x0[[c, y, w + x]] = l;
                x_cond[[c, y, x]] = g * c_m.data[[0, y, x]];
                x_cond[[c, y, w + x]] = l;
            }
        }
    }
    let mut c_mask = Array3::zeros((1, h, 2 * w));
    c_mask
        .slice_mut(ndarray::s![.., .., ..w])
        .assign(&c_m.data.index_axis(Axis(0), 0).insert_axis(Axis(0)));

    Ok(A3Input {
        x0: Latent { data: x0, layout: LatentLayout::ConcatWidth },
        x_cond: Latent { data: x_cond, layout: LatentLayout::ConcatWidth },
        c_mask: Latent { data: c_mask, layout: LatentLayout::LatentMask },
    })
}

/// Channel-concatenates `(x_t, C_M, X)` into the 9-channel model input.
pub fn make_stage2_input<T: Scalar>(
    x_t: &Latent<T>,
    c_mask: &Latent<T>,
    x_cond: &Latent<T>,
) -> Result<Latent<T>> {
    let (xc, h, w) = x_t.data.dim();
    if xc != 4 || c_mask.data.dim() != (1, h, w) || x_cond.data.dim() != (4, h, w) {
        return Err(GarmentError::Shape(format!(
            "stage-II parts disagree: x_t {:?}, C_M {:?}, X {:?}",
            x_t.data.dim(),
            c_mask.data.dim(),
            x_cond.data.dim()
        )));
    }
    let z = ndarray::concatenate(
        Axis(0),
        &[c_mask.data.view(), x_cond.data.view()],
    )
    .unwrap();
    let z = ndarray::concatenate(Axis(0), &[x_t.data.view(), z.view()]).unwrap();
    Latent::new(z.as_standard_layout().into_owned(), LatentLayout::Stage2Input)
}

/// Left (garment) half of a width-concatenated latent.
pub fn split_garment_half<T: Scalar>(x: &Latent<T>) -> Result<Latent<T>> {
    if x.layout != LatentLayout::ConcatWidth {
        return Err(GarmentError::Contract(format!(
            "split_garment_half expects the concat_width layout, got {:?}",
            x.layout
        )));
    }
    let (_, _, w2) = x.data.dim();
    if w2 % 2 != 0 {
        return Err(GarmentError::Contract(format!("odd concatenated width {w2}")));
    }
    let half = x
        .data
        .slice(ndarray::s![.., .., ..w2 / 2])
        .as_standard_layout()
        .into_owned();
    Latent::new(half, LatentLayout::Garment)
}

/// Stage-II model: 9-channel-input, self-attention-only UNet.
#[derive(Debug, Clone)]
pub struct LocalModel<T> {
    pub params: ParamStore<T>,
    pub unet: UNet,
}

impl<T: Scalar> LocalModel<T> {
    /// Initializes from the trained stage-I base: every stream parameter is
    /// copied from the denoising UNet (the stage-agnostic init), the 9-channel
    /// stem is fresh, and only the self-attention layers plus the stem
    /// remain trainable.
    pub fn init_from_base(global: &GlobalModel<T>, seed: u64) -> Result<Self> {
        let base_cfg = &global.denoise.cfg;
        let cfg = UNetConfig {
            has_cross_attention: false,
            has_mixed_attention: false,
            in_channels: 9,
            out_channels: 4,
            d_text: D_TEXT,
            ..base_cfg.clone()
        };
        let unet = UNet::new(cfg, LOCAL_PREFIX)?;
        let mut params = ParamStore::new();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        use rand::SeedableRng;
        let _ = &mut rng;
        unet.init_params(&mut params, &mut rng);

        // Copy every matching base tensor (all but the stem, whose input
        // width differs, and cross/mixed projections, which do not exist
        // here).
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            if name.starts_with(&format!("{LOCAL_PREFIX}.stem.")) {
                continue;
            }
            let base_name = name.replacen(LOCAL_PREFIX, DENOISE_PREFIX, 1);
            if global.params.contains(&base_name) {
                params.get_mut(&name).value = global.params.get(&base_name).value.clone();
            }
        }
        // Fresh zero-bias stem over 9 channels.
        params.get_mut(&format!("{LOCAL_PREFIX}.stem.w")).value =
            kaiming_conv(base_cfg.base_width, 9, 3, &mut rng);
        params.get_mut(&format!("{LOCAL_PREFIX}.stem.b")).value = zeros1(base_cfg.base_width);

        let mut model = Self { params, unet };
        model.apply_freeze_policy();
        Ok(model)
    }

    /// Only self-attention layers and the input convolution train.
    pub fn apply_freeze_policy(&mut self) {
        self.params.set_trainable_prefix("", false);
        let trainable: Vec<String> = self
            .params
            .iter()
            .filter(|(name, _)| is_stage2_trainable(name))
            .map(|(n, _)| n.clone())
            .collect();
        for name in trainable {
            self.params.get_mut(&name).trainable = true;
        }
    }

    /// Structural assertion: no cross-attention parameters exist.
    pub fn has_cross_attention_params(&self) -> bool {
        self.params.iter().any(|(name, _)| {
            name.ends_with(".wtk")
                || name.ends_with(".wtv")
                || name.ends_with(".wck")
                || name.ends_with(".wcv")
                || name.ends_with(".q2")
                || name.contains(".out2.")
                || name.contains(".norm2.g") && name.contains(".attn.")
        })
    }

    pub fn local_denoise_graph(&self, b: &mut Binder<'_, '_, T>, z: Var, t: usize) -> Var {
        let cond = UNetCond::default();
        let (out, _) = self.unet.forward(b, z, t, &cond);
        out
    }

    /// Predicted noise over the concatenated latent: `4 x h x 2w` from the
    /// 9-channel assembled input.
    pub fn local_denoise(&self, z: &Latent<T>, t: crate::schedule::TimestepIndex) -> Result<Latent<T>> {
        if z.layout != LatentLayout::Stage2Input || z.channels() != 9 {
            return Err(GarmentError::Shape(format!(
                "local_denoise expects a 9-channel stage2_input latent, got {} channels, {:?}",
                z.channels(),
                z.layout
            )));
        }
        let mut g: Graph<T> = Graph::new();
        let mut b = Binder::new(&mut g, &self.params, false);
        let zv = b.g.leaf(z.data.clone().into_dyn(), false);
        let out = self.local_denoise_graph(&mut b, zv, t.0);
        let data = g
            .value(out)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        Ok(Latent { data, layout: LatentLayout::ConcatWidth })
    }
}

/// Stage-II trainable set: self-attention layer parameters and the stem.
pub fn is_stage2_trainable(name: &str) -> bool {
    if name.starts_with(&format!("{LOCAL_PREFIX}.stem.")) {
        return true;
    }
    name.contains(".attn.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::TimestepIndex;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_latent4(rng: &mut ChaCha12Rng, h: usize, w: usize) -> Latent<f64> {
        Latent {
            data: Array3::from_shape_fn((4, h, w), |_| rng.gen_range(-1.0..1.0)),
            layout: LatentLayout::Garment,
        }
    }

    fn box_mask(h: usize, w: usize, top: usize, left: usize, bh: usize, bw: usize) -> Latent<f64> {
        let mut m = Array3::zeros((1, h, w));
        for y in top..top + bh {
            for x in left..left + bw {
                m[[0, y, x]] = 1.0;
            }
        }
        Latent { data: m, layout: LatentLayout::LatentMask }
    }

    #[test]
    fn a3_all_ones_mask_makes_x_equal_x0() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let c_g = rand_latent4(&mut rng, 8, 10);
        let c_l = rand_latent4(&mut rng, 8, 10);
        let ones = box_mask(8, 10, 0, 0, 8, 10);
        let a3 = assemble_a3(&c_g, &c_l, &ones).unwrap();
        assert_eq!(a3.x0.data, a3.x_cond.data);
    }

    #[test]
    fn a3_all_zero_mask_zeroes_garment_half() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let c_g = rand_latent4(&mut rng, 8, 10);
        let c_l = rand_latent4(&mut rng, 8, 10);
        let zeros = box_mask(8, 10, 0, 0, 0, 0);
        let a3 = assemble_a3(&c_g, &c_l, &zeros).unwrap();
        assert!(a3.x_cond.data.slice(ndarray::s![.., .., ..10]).iter().all(|v| *v == 0.0));
        assert_eq!(
            a3.x_cond.data.slice(ndarray::s![.., .., 10..]).to_owned(),
            c_l.data
        );
    }

    #[test]
    fn a3_shape_algebra_at_toy_dims() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let c_g = rand_latent4(&mut rng, 8, 10);
        let c_l = rand_latent4(&mut rng, 8, 10);
        let m = box_mask(8, 10, 1, 1, 2, 2);
        let a3 = assemble_a3(&c_g, &c_l, &m).unwrap();
        assert_eq!(a3.x0.data.dim(), (4, 8, 20));
        assert_eq!(a3.c_mask.data.dim(), (1, 8, 20));
        // Mask channel: left half = mask, right half = zeros.
        assert_eq!(
            a3.c_mask.data.slice(ndarray::s![0, .., ..10]).to_owned(),
            m.data.index_axis(Axis(0), 0).to_owned()
        );
        assert!(a3.c_mask.data.slice(ndarray::s![0, .., 10..]).iter().all(|v| *v == 0.0));
        let x_t = Latent {
            data: Array3::zeros((4, 8, 20)),
            layout: LatentLayout::ConcatWidth,
        };
        let z = make_stage2_input(&x_t, &a3.c_mask, &a3.x_cond).unwrap();
        assert_eq!(z.data.dim(), (9, 8, 20));
        assert_eq!(z.layout, LatentLayout::Stage2Input);
    }

    #[test]
    fn a3_rejects_non_binary_mask() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let c_g = rand_latent4(&mut rng, 4, 5);
        let c_l = rand_latent4(&mut rng, 4, 5);
        let mut m = box_mask(4, 5, 0, 0, 2, 2);
        m.data[[0, 0, 0]] = 0.5;
        assert!(matches!(
            assemble_a3(&c_g, &c_l, &m),
            Err(GarmentError::Contract(_))
        ));
    }

    #[test]
    fn a3_mask_locality() {
        // Changing C_g outside the kept region must not change X.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let c_g = rand_latent4(&mut rng, 8, 10);
        let c_l = rand_latent4(&mut rng, 8, 10);
        let m = box_mask(8, 10, 2, 3, 2, 2);
        let a3 = assemble_a3(&c_g, &c_l, &m).unwrap();
        let mut c_g2 = c_g.clone();
        c_g2.data[[0, 0, 0]] += 5.0; // outside mask
        let a3b = assemble_a3(&c_g2, &c_l, &m).unwrap();
        assert_eq!(a3.x_cond.data, a3b.x_cond.data);
        // Inside the kept region the change shows up, elementwise.
        let mut c_g3 = c_g.clone();
        c_g3.data[[0, 2, 3]] += 5.0;
        let a3c = assemble_a3(&c_g3, &c_l, &m).unwrap();
        assert_eq!(a3c.x_cond.data[[0, 2, 3]], a3.x_cond.data[[0, 2, 3]] + 5.0);
    }

    #[test]
    fn stage2_input_channel_slices_reproduce_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let c_g = rand_latent4(&mut rng, 4, 5);
        let c_l = rand_latent4(&mut rng, 4, 5);
        let m = box_mask(4, 5, 1, 1, 2, 2);
        let a3 = assemble_a3(&c_g, &c_l, &m).unwrap();
        let x_t = Latent {
            data: Array3::from_shape_fn((4, 4, 10), |_| rng.gen_range(-1.0..1.0)),
            layout: LatentLayout::ConcatWidth,
        };
        let z = make_stage2_input(&x_t, &a3.c_mask, &a3.x_cond).unwrap();
        assert_eq!(z.data.slice(ndarray::s![..4, .., ..]).to_owned(), x_t.data);
        assert_eq!(
            z.data.slice(ndarray::s![4..5, .., ..]).to_owned(),
            a3.c_mask.data
        );
        assert_eq!(z.data.slice(ndarray::s![5.., .., ..]).to_owned(), a3.x_cond.data);
        // Zero inputs give a zero Z.
        let zero4: Latent<f64> = Latent { data: Array3::zeros((4, 4, 10)), layout: LatentLayout::ConcatWidth };
        let zero1 = Latent { data: Array3::zeros((1, 4, 10)), layout: LatentLayout::LatentMask };
        let z0 = make_stage2_input(&zero4, &zero1, &Latent { data: Array3::zeros((4, 4, 10)), layout: LatentLayout::ConcatWidth }).unwrap();
        assert!(z0.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn split_recovers_garment_half_bit_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let c_g = rand_latent4(&mut rng, 8, 10);
        let c_l = rand_latent4(&mut rng, 8, 10);
        let m = box_mask(8, 10, 1, 1, 3, 3);
        let a3 = assemble_a3(&c_g, &c_l, &m).unwrap();
        let half = split_garment_half(&a3.x0).unwrap();
        assert_eq!(half.data, c_g.data);
        assert_eq!(half.width(), 10);
        // Wrong layout rejected.
        assert!(split_garment_half(&c_g).is_err());
    }

    fn toy_local() -> LocalModel<f64> {
        let mut global = GlobalModel::<f64>::init(16, 2, 11).unwrap();
        global.enter_adapter_phase();
        LocalModel::init_from_base(&global, 12).unwrap()
    }

    #[test]
    fn local_denoise_shape_and_determinism() {
        let model = toy_local();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let z = Latent {
            data: Array3::from_shape_fn((9, 8, 20), |_| rng.gen_range(-1.0..1.0)),
            layout: LatentLayout::Stage2Input,
        };
        let a = model.local_denoise(&z, TimestepIndex(100)).unwrap();
        let b = model.local_denoise(&z, TimestepIndex(100)).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.data.dim(), (4, 8, 20));
        assert!(a.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn local_model_has_no_cross_attention() {
        let model = toy_local();
        assert!(!model.has_cross_attention_params());
    }

    #[test]
    fn stage2_census_is_stem_plus_self_attention() {
        let model = toy_local();
        let census = model.params.census();
        for name in &census.trainable {
            assert!(is_stage2_trainable(name), "unexpected trainable {name}");
        }
        assert!(census.trainable.iter().any(|n| n == "local.stem.w"));
        assert!(census.trainable.iter().any(|n| n == "local.mid.attn.wq"));
        assert!(census.frozen.iter().any(|n| n == "local.mid.res.conv1.w"));
        assert!(census.frozen.iter().any(|n| n == "local.out.conv.w"));
    }

    #[test]
    fn local_init_copies_base_weights() {
        let mut global = GlobalModel::<f64>::init(16, 2, 11).unwrap();
        global.enter_adapter_phase();
        let model = LocalModel::init_from_base(&global, 12).unwrap();
        assert_eq!(
            model.params.get("local.mid.res.conv1.w").value,
            global.params.get("denoise.mid.res.conv1.w").value
        );
        // Stem differs in shape: 9 input channels.
        assert_eq!(
            model.params.get("local.stem.w").value.shape(),
            &[16, 9, 3, 3]
        );
    }

    #[test]
    fn local_denoise_rejects_wrong_channels() {
        let model = toy_local();
        let z = Latent {
            data: Array3::zeros((4, 8, 20)),
            layout: LatentLayout::ConcatWidth,
        };
        assert!(model.local_denoise(&z, TimestepIndex(0)).is_err());
    }
}
