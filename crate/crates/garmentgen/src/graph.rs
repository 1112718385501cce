//! Minimal reverse-mode autodiff tape over `ndarray` values.
//!
//! Graphs are built per forward pass (define-by-run) and discarded after the
//! gradients are read. Every primitive's backward is checked against central
//! finite differences in the tests below.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};

use crate::num::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

type BackFn<T> = Box<dyn Fn(&[ArrayD<T>], &ArrayD<T>) -> Vec<(usize, ArrayD<T>)> + Send + Sync>;

pub struct Graph<T> {
    values: Vec<ArrayD<T>>,
    needs_grad: Vec<bool>,
    backwards: Vec<Option<BackFn<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), needs_grad: Vec::new(), backwards: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.values[v.0]
    }

    pub fn leaf(&mut self, value: ArrayD<T>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        self.backwards.push(None);
        Var(self.values.len() - 1)
    }

    fn push_op(&mut self, value: ArrayD<T>, parents: &[Var], back: BackFn<T>) -> Var {
        let needs = parents.iter().any(|p| self.needs_grad[p.0]);
        self.values.push(value);
        self.needs_grad.push(needs);
        self.backwards.push(if needs { Some(back) } else { None });
        Var(self.values.len() - 1)
    }

    /// Runs backprop from a scalar root; returns per-node gradients.
    pub fn backward(&self, root: Var) -> Vec<Option<ArrayD<T>>> {
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.values.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.values[root.0].raw_dim(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.backwards[i] {
                for (p, contrib) in back(&self.values, &g) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            } else if self.needs_grad[i] {
                grads[i] = Some(g); // leaf: keep for the caller
            }
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        self.push_op(v, &[a, b], Box::new(move |_, g| {
            vec![(a.0, g.clone()), (b.0, g.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        self.push_op(v, &[a, b], Box::new(move |_, g| {
            vec![(a.0, g.clone()), (b.0, -g.clone())]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        self.push_op(v, &[a, b], Box::new(move |vals, g| {
            vec![(a.0, g * &vals[b.0]), (b.0, g * &vals[a.0])]
        }))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = &self.values[a.0] * k;
        self.push_op(v, &[a], Box::new(move |_, g| vec![(a.0, g * k)]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x * sigmoid(x));
        self.push_op(v, &[a], Box::new(move |vals, g| {
            let dv = vals[a.0].mapv(|x| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            });
            vec![(a.0, g * &dv)]
        }))
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.values[a.0].len() as f64);
        let mean = self.values[a.0].sum() / n;
        let v = ArrayD::from_elem(IxDyn(&[1]), mean);
        self.push_op(v, &[a], Box::new(move |vals, g| {
            let gv = g[[0]] / n;
            vec![(a.0, ArrayD::from_elem(vals[a.0].raw_dim(), gv))]
        }))
    }

    /// Mean squared error between two same-shaped nodes, as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_shape: Vec<usize> = self.values[a.0].shape().to_vec();
        let v = self.values[a.0]
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push_op(v, &[a], Box::new(move |_, g| {
            let back = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&old_shape))
                .unwrap();
            vec![(a.0, back)]
        }))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let parents: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let lens: Vec<usize> = parts.iter().map(|p| self.values[p.0].shape()[axis]).collect();
        self.push_op(v, parts, Box::new(move |_, g| {
            let mut out = Vec::with_capacity(parents.len());
            let mut start = 0;
            for (p, len) in parents.iter().zip(&lens) {
                let piece = g
                    .slice_axis(Axis(axis), Slice::from(start..start + len))
                    .to_owned();
                out.push((*p, piece));
                start += len;
            }
            out
        }))
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.values[a.0]
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push_op(v, &[a], Box::new(move |vals, g| {
            let mut dz = ArrayD::zeros(vals[a.0].raw_dim());
            dz.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![(a.0, dz)]
        }))
    }

    // ---- linear algebra ----

    /// Transpose of a `[n,m]` node.
    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = as2(&self.values[a.0]).t().as_standard_layout().into_owned().into_dyn();
        self.push_op(v, &[a], Box::new(move |_, g| {
            vec![(a.0, as2(g).t().as_standard_layout().into_owned().into_dyn())]
        }))
    }

    /// `[m,k] x [k,n] -> [m,n]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let a2 = as2(&self.values[a.0]);
        let b2 = as2(&self.values[b.0]);
        let v = a2.dot(&b2).into_dyn();
        self.push_op(v, &[a, b], Box::new(move |vals, g| {
            let g2 = as2(g);
            let av = as2(&vals[a.0]);
            let bv = as2(&vals[b.0]);
            vec![
                (a.0, g2.dot(&bv.t()).into_dyn()),
                (b.0, av.t().dot(&g2).into_dyn()),
            ]
        }))
    }

    /// Adds a row vector `[d]` to every row of `[n,d]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let a2 = as2(&self.values[a.0]);
        let b1 = self.values[bias.0].view().into_dimensionality::<Ix1>().unwrap();
        let v = (&a2 + &b1).into_dyn();
        self.push_op(v, &[a, bias], Box::new(move |_, g| {
            let g2 = as2(g);
            vec![(a.0, g.clone()), (bias.0, g2.sum_axis(Axis(0)).into_dyn())]
        }))
    }

    /// Adds a per-channel bias `[C]` to a `[C,H,W]` map.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Var {
        let a3 = self.values[a.0].view().into_dimensionality::<Ix3>().unwrap();
        let b1 = self.values[bias.0].view().into_dimensionality::<Ix1>().unwrap();
        let mut v = a3.to_owned();
        for (c, mut plane) in v.axis_iter_mut(Axis(0)).enumerate() {
            plane += b1[c];
        }
        self.push_op(v.into_dyn(), &[a, bias], Box::new(move |_, g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let db = g3.sum_axis(Axis(2)).sum_axis(Axis(1));
            vec![(a.0, g.clone()), (bias.0, db.into_dyn())]
        }))
    }

    /// Row-wise numerically stable softmax over `[n,m]`.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = as2(&self.values[a.0]);
        let mut y = x.to_owned();
        for mut row in y.rows_mut() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let y_saved = y.clone();
        self.push_op(y.into_dyn(), &[a], Box::new(move |_, g| {
            // dx = y (.) (g - rowsum(g (.) y))
            let g2 = as2(g);
            let mut dx = g2.to_owned();
            for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y_saved.rows()) {
                let dot = drow
                    .iter()
                    .zip(yrow.iter())
                    .fold(T::zero(), |acc, (d, y)| acc + *d * *y);
                for (d, y) in drow.iter_mut().zip(yrow.iter()) {
                    *d = (*d - dot) * *y;
                }
            }
            vec![(a.0, dx.into_dyn())]
        }))
    }

    // ---- convolution ----

    /// 3x3-family convolution: `x [Cin,H,W] * w [Cout,Cin,kh,kw] + b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.values[w.0].view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (c_in, h, wd) = xv.dim();
        let (c_out, c_in_w, kh, kw) = wv.dim();
        assert_eq!(c_in, c_in_w, "conv2d channel mismatch");
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wd + 2 * pad - kw) / stride + 1;

        let cols = im2col(&xv, kh, kw, stride, pad, h_out, w_out);
        let w2 = wv.to_shape((c_out, c_in * kh * kw)).unwrap().to_owned();
        let mut out2 = w2.dot(&cols);
        let bv = self.values[b.0].view().into_dimensionality::<Ix1>().unwrap();
        for (c, mut row) in out2.rows_mut().into_iter().enumerate() {
            row += bv[c];
        }
        let v = out2
            .into_shape_with_order((c_out, h_out, w_out))
            .unwrap()
            .into_dyn();

        self.push_op(v, &[x, w, b], Box::new(move |vals, g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let g2 = g3.to_shape((c_out, h_out * w_out)).unwrap().to_owned();
            let wv = vals[w.0].view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let w2 = wv.to_shape((c_out, c_in * kh * kw)).unwrap().to_owned();

            // dW = g2 . cols^T, recomputing cols from the saved input.
            let xv = vals[x.0].view().into_dimensionality::<Ix3>().unwrap();
            let cols = im2col(&xv, kh, kw, stride, pad, h_out, w_out);
            let dw = g2.dot(&cols.t());
            let db = g2.sum_axis(Axis(1));
            let dcols = w2.t().dot(&g2);
            let dx = col2im(&dcols, c_in, h, wd, kh, kw, stride, pad, h_out, w_out);
            vec![
                (x.0, dx.into_dyn()),
                (w.0, dw.into_shape_with_order((c_out, c_in, kh, kw)).unwrap().into_dyn()),
                (b.0, db.into_dyn()),
            ]
        }))
    }

    /// Nearest-neighbor 2x upsampling of `[C,H,W]`.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let x = self.values[a.0].view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x.dim();
        let mut y = ndarray::Array3::<T>::zeros((c, h * 2, w * 2));
        for ch in 0..c {
            for i in 0..h * 2 {
                for j in 0..w * 2 {
                    y[[ch, i, j]] = x[[ch, i / 2, j / 2]];
                }
            }
        }
        self.push_op(y.into_dyn(), &[a], Box::new(move |_, g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
            for ch in 0..c {
                for i in 0..h * 2 {
                    for j in 0..w * 2 {
                        dx[[ch, i / 2, j / 2]] = dx[[ch, i / 2, j / 2]] + g3[[ch, i, j]];
                    }
                }
            }
            vec![(a.0, dx.into_dyn())]
        }))
    }

    /// Group normalization over `[C,H,W]` with per-channel affine params.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        assert!(c % groups == 0, "group_norm: channels {c} not divisible by {groups}");
        let gsize = c / groups;
        let n = T::from_f64((gsize * h * w) as f64);

        let mut xhat = ndarray::Array3::<T>::zeros((c, h, w));
        let mut means = vec![T::zero(); groups];
        let mut inv_stds = vec![T::zero(); groups];
        for g in 0..groups {
            let sl = xv.slice(ndarray::s![g * gsize..(g + 1) * gsize, .., ..]);
            let mean = sl.sum() / n;
            let var = sl.mapv(|v| (v - mean) * (v - mean)).sum() / n;
            let inv_std = T::one() / (var + eps).sqrt();
            means[g] = mean;
            inv_stds[g] = inv_std;
            let mut dst = xhat.slice_mut(ndarray::s![g * gsize..(g + 1) * gsize, .., ..]);
            dst.assign(&sl.mapv(|v| (v - mean) * inv_std));
        }
        let gv = self.values[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.values[beta.0].view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xhat.clone();
        for (ch, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            plane.mapv_inplace(|v| v * gv[ch] + bv[ch]);
        }

        let xhat_saved = xhat;
        self.push_op(y.into_dyn(), &[x, gamma, beta], Box::new(move |vals, g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let gammav = vals[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
            // d_gamma / d_beta
            let mut dgamma = ndarray::Array1::<T>::zeros(c);
            let mut dbeta = ndarray::Array1::<T>::zeros(c);
            for ch in 0..c {
                let gp = g3.index_axis(Axis(0), ch);
                let xp = xhat_saved.index_axis(Axis(0), ch);
                dgamma[ch] = (&gp * &xp).sum();
                dbeta[ch] = gp.sum();
            }
            // dx per group: inv_std * (dxh - mean(dxh) - xhat * mean(dxh*xhat))
            let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
            for grp in 0..groups {
                let range = ndarray::s![grp * gsize..(grp + 1) * gsize, .., ..];
                let xh = xhat_saved.slice(range);
                let gsl = g3.slice(range);
                let mut dxh = gsl.to_owned();
                for (ci, mut plane) in dxh.axis_iter_mut(Axis(0)).enumerate() {
                    plane *= gammav[grp * gsize + ci];
                }
                let m1 = dxh.sum() / n;
                let m2 = (&dxh * &xh).sum() / n;
                let mut dsl = dx.slice_mut(range);
                dsl.assign(&(&dxh - m1 - &(&xh.to_owned() * m2)));
                dsl.mapv_inplace(|v| v * inv_stds[grp]);
            }
            vec![
                (x.0, dx.into_dyn()),
                (gamma.0, dgamma.into_dyn()),
                (beta.0, dbeta.into_dyn()),
            ]
        }))
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().unwrap()
}

fn im2col<T: Scalar>(
    x: &ndarray::ArrayView3<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> ndarray::Array2<T> {
    let (c_in, h, w) = x.dim();
    let mut cols = ndarray::Array2::<T>::zeros((c_in * kh * kw, h_out * w_out));
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * w_out + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Central finite-difference gradient of `f` w.r.t. `inputs[which]`,
/// evaluated at every coordinate. Test helper shared with the model-level
/// gradient checks.
pub fn numerical_grad<F>(inputs: &[ArrayD<f64>], which: usize, h: f64, f: F) -> ArrayD<f64>
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let mut grad = ArrayD::zeros(inputs[which].raw_dim());
    let mut probe: Vec<ArrayD<f64>> = inputs.to_vec();
    for idx in 0..inputs[which].len() {
        let base = inputs[which].as_slice().unwrap()[idx];
        probe[which].as_slice_mut().unwrap()[idx] = base + h;
        let up = f(&probe);
        probe[which].as_slice_mut().unwrap()[idx] = base - h;
        let down = f(&probe);
        probe[which].as_slice_mut().unwrap()[idx] = base;
        grad.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error between analytic and numerical gradients, with an
/// absolute floor for near-zero entries.
pub fn grad_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    dcols: &ndarray::Array2<T>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> ndarray::Array3<T> {
    let mut dx = ndarray::Array3::<T>::zeros((c_in, h, w));
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] =
                            dx[[c, iy as usize, ix as usize]] + dcols[[row, oy * w_out + ox]];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks analytic grads of a scalar-valued builder against central
    /// differences for every input leaf.
    fn check<F>(inputs: Vec<ArrayD<f64>>, build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let root = build(&mut g, &vars);
        assert_eq!(g.value(root).len(), 1, "root must be scalar");
        let grads = g.backward(root);
        for which in 0..inputs.len() {
            let numeric = numerical_grad(&inputs, which, 1e-5, |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = probe.iter().map(|x| g.leaf(x.clone(), false)).collect();
                let root = build(&mut g, &vars);
                g.value(root)[[0]]
            });
            let analytic = grads[vars[which].0].clone().expect("missing grad");
            let err = grad_rel_err(&analytic, &numeric);
            assert!(err < 1e-6, "input {which}: rel err {err}");
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        check(vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[3, 4])], |g, v| {
            let s = g.add(v[0], v[1]);
            let m = g.mul(s, v[0]);
            let d = g.sub(m, v[1]);
            let sc = g.scale(d, 0.7);
            g.mean_all(sc)
        });
    }

    #[test]
    fn grad_silu() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        check(vec![randn(&mut rng, &[5, 3])], |g, v| {
            let y = g.silu(v[0]);
            g.mean_all(y)
        });
    }

    #[test]
    fn grad_matmul_and_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        check(
            vec![randn(&mut rng, &[4, 3]), randn(&mut rng, &[3, 5]), randn(&mut rng, &[5])],
            |g, v| {
                let y = g.matmul(v[0], v[1]);
                let y = g.add_row(y, v[2]);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
        );
    }

    #[test]
    fn grad_softmax() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        check(vec![randn(&mut rng, &[4, 6]), randn(&mut rng, &[4, 6])], |g, v| {
            let y = g.softmax_rows(v[0]);
            let w = g.mul(y, v[1]);
            g.mean_all(w)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[7, 9]);
        let mut g = Graph::new();
        let v = g.leaf(x, false);
        let y = g.softmax_rows(v);
        let y2 = as2(g.value(y));
        for row in y2.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_conv2d_stride1_and_stride2() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for stride in [1usize, 2] {
            check(
                vec![
                    randn(&mut rng, &[2, 4, 6]),
                    randn(&mut rng, &[3, 2, 3, 3]),
                    randn(&mut rng, &[3]),
                ],
                move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], stride, 1);
                    let sq = g.mul(y, y);
                    g.mean_all(sq)
                },
            );
        }
    }

    #[test]
    fn grad_upsample() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        check(vec![randn(&mut rng, &[2, 3, 4]), randn(&mut rng, &[2, 6, 8])], |g, v| {
            let y = g.upsample2x(v[0]);
            let w = g.mul(y, v[1]);
            g.mean_all(w)
        });
    }

    #[test]
    fn grad_group_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        check(
            vec![randn(&mut rng, &[4, 3, 2]), randn(&mut rng, &[4]), randn(&mut rng, &[4])],
            |g, v| {
                let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
        );
    }

    #[test]
    fn grad_concat_slice_reshape() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        check(vec![randn(&mut rng, &[2, 3]), randn(&mut rng, &[2, 3])], |g, v| {
            let c = g.concat(1, &[v[0], v[1]]);
            let s = g.slice_axis(c, 1, 2, 3);
            let r = g.reshape(s, &[6]);
            let r2 = g.reshape(r, &[3, 2]);
            let sq = g.mul(r2, r2);
            g.mean_all(sq)
        });
    }

    #[test]
    fn grad_add_channel_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        check(vec![randn(&mut rng, &[3, 2, 4]), randn(&mut rng, &[3])], |g, v| {
            let y = g.add_channel_bias(v[0], v[1]);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        });
    }

    #[test]
    fn grad_mse() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        check(vec![randn(&mut rng, &[4, 5]), randn(&mut rng, &[4, 5])], |g, v| {
            g.mse(v[0], v[1])
        });
    }

    #[test]
    fn grad_accumulates_over_shared_use() {
        // x used twice: grads must sum.
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0f64), true);
        let y = g.mul(x, x);
        let root = g.mean_all(y);
        let grads = g.backward(root);
        assert!((grads[x.0].as_ref().unwrap()[[0]] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn no_grad_leaves_skip_backward() {
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.0f64), false);
        let y = g.silu(x);
        let root = g.mean_all(y);
        let grads = g.backward(root);
        assert!(grads[x.0].is_none());
    }
}
