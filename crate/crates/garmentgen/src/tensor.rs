//! Domain tensor types: latents, images, masks, token sequences.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GarmentError, Result};
use crate::num::Scalar;

/// Pixel-space bounding box, origin top-left, `(top, left, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPx {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BoxPx {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self { top, left, height, width }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.bottom() && x >= self.left && x < self.right()
    }
}

/// Semantic layout of a latent tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentLayout {
    /// 4-channel garment latent at 1/8 resolution.
    Garment,
    /// 4-channel logo latent at 1/8 resolution.
    Logo,
    /// 4-channel garment|logo latent concatenated along width.
    ConcatWidth,
    /// 9-channel assembled local-model input.
    Stage2Input,
    /// 1-channel latent-resolution mask.
    LatentMask,
}

/// Channel x height x width real array with a declared semantic layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent<T> {
    pub data: Array3<T>,
    pub layout: LatentLayout,
}

impl<T: Scalar> Latent<T> {
    pub fn new(data: Array3<T>, layout: LatentLayout) -> Result<Self> {
        let (c, _, _) = data.dim();
        let expected = match layout {
            LatentLayout::Garment | LatentLayout::Logo | LatentLayout::ConcatWidth => 4,
            LatentLayout::Stage2Input => 9,
            LatentLayout::LatentMask => 1,
        };
        if c != expected {
            return Err(GarmentError::Shape(format!(
                "latent layout {layout:?} requires {expected} channels, got {c}"
            )));
        }
        Ok(Self { data, layout })
    }

    pub fn zeros(channels: usize, h: usize, w: usize, layout: LatentLayout) -> Self {
        Self { data: Array3::zeros((channels, h, w)), layout }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.data.dim() == other.data.dim()
    }

    /// Reinterprets the layout tag without touching data. Shape constraints
    /// of the target layout still apply.
    pub fn with_layout(self, layout: LatentLayout) -> Result<Self> {
        Latent::new(self.data, layout)
    }
}

/// 3 x H x W image with values in [0,1]; H and W divisible by 8.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    pub data: Array3<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(GarmentError::Shape(format!("image must have 3 channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(GarmentError::Shape(format!(
                "image dims must be divisible by 8, got {h}x{w}"
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { data: Array3::zeros((3, h, w)) }
    }

    pub fn filled(h: usize, w: usize, rgb: [T; 3]) -> Self {
        let mut data = Array3::zeros((3, h, w));
        for (c, v) in rgb.iter().enumerate() {
            data.index_axis_mut(Axis(0), c).fill(*v);
        }
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        [self.data[[0, y, x]], self.data[[1, y, x]], self.data[[2, y, x]]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [T; 3]) {
        for c in 0..3 {
            self.data[[c, y, x]] = rgb[c];
        }
    }

    pub fn clamp01(&mut self) {
        self.data.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
    }
}

/// Binary placement mask: 1 x H x W indicator of `bbox`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor<T> {
    pub data: Array3<T>,
    pub bbox: BoxPx,
}

impl<T: Scalar> MaskTensor<T> {
    /// Builds the indicator mask of `bbox` on an H x W canvas.
    pub fn from_box(h: usize, w: usize, bbox: BoxPx) -> Result<Self> {
        if bbox.bottom() > h || bbox.right() > w {
            return Err(GarmentError::Parameter(format!(
                "box {bbox:?} exceeds {h}x{w} canvas"
            )));
        }
        let mut data = Array3::zeros((1, h, w));
        for y in bbox.top..bbox.bottom() {
            for x in bbox.left..bbox.right() {
                data[[0, y, x]] = T::one();
            }
        }
        Ok(Self { data, bbox })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Semantic role of a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureRole {
    /// Noisy latent tokens entering attention.
    Latent,
    /// Silhouette features feeding the mixed-attention branch.
    Silhouette,
    /// Text prompt embedding tokens.
    Text,
    /// Color adapter tokens.
    Color,
}

/// n_tokens x d token matrix with a semantic role tag.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T> {
    pub tokens: Array2<T>,
    pub role: FeatureRole,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(tokens: Array2<T>, role: FeatureRole) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(GarmentError::Shape("feature sequence needs >= 1 token".into()));
        }
        Ok(Self { tokens, role })
    }

    pub fn zeros(n_tokens: usize, d: usize, role: FeatureRole) -> Self {
        Self { tokens: Array2::zeros((n_tokens, d)), role }
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_layout_enforces_channel_count() {
        assert!(Latent::<f64>::new(Array3::zeros((4, 8, 10)), LatentLayout::Garment).is_ok());
        assert!(Latent::<f64>::new(Array3::zeros((3, 8, 10)), LatentLayout::Garment).is_err());
        assert!(Latent::<f64>::new(Array3::zeros((9, 8, 20)), LatentLayout::Stage2Input).is_ok());
        assert!(Latent::<f64>::new(Array3::zeros((4, 8, 20)), LatentLayout::Stage2Input).is_err());
    }

    #[test]
    fn image_requires_divisible_dims() {
        assert!(ImageTensor::<f32>::new(Array3::zeros((3, 64, 80))).is_ok());
        assert!(ImageTensor::<f32>::new(Array3::zeros((3, 63, 80))).is_err());
        assert!(ImageTensor::<f32>::new(Array3::zeros((4, 64, 80))).is_err());
    }

    #[test]
    fn mask_is_exactly_the_box_indicator() {
        let m = MaskTensor::<f64>::from_box(16, 16, BoxPx::new(2, 3, 4, 5)).unwrap();
        let mut ones = 0;
        for y in 0..16 {
            for x in 0..16 {
                let v = m.data[[0, y, x]];
                assert!(v == 0.0 || v == 1.0);
                if v == 1.0 {
                    ones += 1;
                    assert!(m.bbox.contains(y, x));
                }
            }
        }
        assert_eq!(ones, 20);
    }

    #[test]
    fn mask_box_must_fit() {
        assert!(MaskTensor::<f64>::from_box(8, 8, BoxPx::new(6, 6, 4, 4)).is_err());
    }
}
