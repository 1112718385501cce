//! Named parameter store, graph binding, initializers, and AdamW.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::num::Scalar;

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub trainable: bool,
}

/// Ordered name -> tensor map. Iteration order is the sorted name order, so
/// every pass over the store is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

/// Partition of a store into frozen and trainable groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Census {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub trainable_scalars: usize,
    pub frozen_scalars: usize,
}

impl Census {
    pub fn total_scalars(&self) -> usize {
        self.trainable_scalars + self.frozen_scalars
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>, trainable: bool) {
        assert!(
            self.entries.insert(name.to_string(), Param { value, trainable }).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Param<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<T> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn census(&self) -> Census {
        let mut c = Census {
            trainable: Vec::new(),
            frozen: Vec::new(),
            trainable_scalars: 0,
            frozen_scalars: 0,
        };
        for (name, p) in &self.entries {
            if p.trainable {
                c.trainable.push(name.clone());
                c.trainable_scalars += p.value.len();
            } else {
                c.frozen.push(name.clone());
                c.frozen_scalars += p.value.len();
            }
        }
        c
    }

    /// Converts every tensor to another scalar type (used to build f64
    /// clones of f32 models for gradient checks).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p) in &self.entries {
            out.insert(name, p.value.mapv(|v| U::from_f64(v.to_f64_())), p.trainable);
        }
        out
    }
}

/// Binds store parameters into a graph, one cached leaf per name.
///
/// In train mode, trainable parameters become differentiable leaves; in
/// inference mode everything is constant.
pub struct Binder<'g, 'p, T> {
    pub g: &'g mut Graph<T>,
    params: &'p ParamStore<T>,
    bound: HashMap<String, Var>,
    train_mode: bool,
}

impl<'g, 'p, T: Scalar> Binder<'g, 'p, T> {
    pub fn new(g: &'g mut Graph<T>, params: &'p ParamStore<T>, train_mode: bool) -> Self {
        Self { g, params, bound: HashMap::new(), train_mode }
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let p = self.params.get(name);
        let var = self.g.leaf(p.value.clone(), self.train_mode && p.trainable);
        self.bound.insert(name.to_string(), var);
        var
    }

    /// Releases the graph borrow, keeping the binding table for gradient
    /// collection after `backward`.
    pub fn finish(self) -> BoundParams {
        let mut map = HashMap::new();
        for (name, var) in self.bound {
            map.insert(name.clone(), (var, self.params.get(&name).trainable));
        }
        BoundParams { map }
    }
}

/// Name -> graph leaf table produced by [`Binder::finish`].
pub struct BoundParams {
    map: HashMap<String, (Var, bool)>,
}

impl BoundParams {
    /// Gradients of bound trainable parameters given backward results.
    pub fn collect_grads<T: Scalar>(&self, grads: &[Option<ArrayD<T>>]) -> BTreeMap<String, ArrayD<T>> {
        let mut out = BTreeMap::new();
        for (name, (var, trainable)) in &self.map {
            if *trainable {
                if let Some(g) = &grads[var.0] {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.map.get(name).map(|(v, _)| *v)
    }
}

// ---- initializers ----

pub fn kaiming_conv<T: Scalar, R: Rng + ?Sized>(
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut R,
) -> ArrayD<T> {
    let fan_in = (c_in * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[c_out, c_in, k, k]), |_| {
        T::from_f64(rng.gen_range(-std..std))
    })
}

pub fn kaiming_linear<T: Scalar, R: Rng + ?Sized>(
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) -> ArrayD<T> {
    let std = (2.0 / d_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[d_in, d_out]), |_| T::from_f64(rng.gen_range(-std..std)))
}

pub fn zeros1<T: Scalar>(n: usize) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(&[n]))
}

pub fn ones1<T: Scalar>(n: usize) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[n]), T::one())
}

// ---- fixed (non-learned) feature builders ----

/// Sinusoidal timestep features of even dimension `dim`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Array1<T> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out[i] = T::from_f64(angle.sin());
        out[half + i] = T::from_f64(angle.cos());
    }
    out
}

/// Fixed 2D sinusoidal position features for an h x w token grid,
/// `[h*w, dim]`. Added to attention-site tokens so spatial transport is
/// learnable without positional parameters.
pub fn position_encoding_2d<T: Scalar>(h: usize, w: usize, dim: usize) -> Array2<T> {
    assert!(dim % 4 == 0, "position encoding dim must be divisible by 4");
    let quarter = dim / 4;
    let mut out = Array2::zeros((h * w, dim));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for i in 0..quarter {
                let freq = (100f64).powf(-(i as f64) / quarter as f64) * std::f64::consts::PI;
                let ay = y as f64 / h as f64 * freq * h as f64 / 8.0;
                let ax = x as f64 / w as f64 * freq * w as f64 / 8.0;
                out[[row, i]] = T::from_f64(ay.sin());
                out[[row, quarter + i]] = T::from_f64(ay.cos());
                out[[row, 2 * quarter + i]] = T::from_f64(ax.sin());
                out[[row, 3 * quarter + i]] = T::from_f64(ax.cos());
            }
        }
    }
    out
}

// ---- optimizer ----

/// AdamW with decoupled weight decay. State keys follow parameter names.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    pub step: u64,
    pub moments: BTreeMap<String, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr: T::from_f64(lr),
            beta1: T::from_f64(beta1),
            beta2: T::from_f64(beta2),
            eps: T::from_f64(1e-8),
            weight_decay: T::from_f64(weight_decay),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter present in `grads`. Parameters
    /// without a gradient this step are left untouched.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, ArrayD<T>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (name, grad) in grads {
            let p = params.get_mut(name);
            assert!(p.trainable, "gradient for frozen parameter {name}");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, g| {
                    *m = self.beta1 * *m + (T::one() - self.beta1) * *g;
                    *v = self.beta2 * *v + (T::one() - self.beta2) * *g * *g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *w);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn census_partitions_all_parameters() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store: ParamStore<f32> = ParamStore::new();
        store.insert("base.conv.w", kaiming_conv(4, 2, 3, &mut rng), false);
        store.insert("adapter.w", kaiming_linear(4, 4, &mut rng), true);
        store.insert("base.norm.g", ones1(4), false);
        let c = store.census();
        assert_eq!(c.trainable, vec!["adapter.w"]);
        assert_eq!(c.frozen, vec!["base.conv.w", "base.norm.g"]);
        assert_eq!(c.total_scalars(), 4 * 2 * 9 + 16 + 4);
    }

    #[test]
    fn binder_caches_and_respects_train_mode() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", zeros1(3), true);
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, &store, false);
        let v1 = b.param("w");
        let v2 = b.param("w");
        assert_eq!(v1, v2);
        // inference mode: no gradient flows
        let y = b.g.silu(v1);
        let root = b.g.mean_all(y);
        let grads = g.backward(root);
        assert!(grads.iter().all(|g| g.is_none() || g.as_ref().unwrap().len() == 1));
    }

    #[test]
    fn adamw_moves_params_against_gradient() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[2]), 1.0), true);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[2]), 1.0));
        opt.update(&mut store, &grads);
        let w = &store.get("w").value;
        assert!(w[[0]] < 1.0, "positive gradient must decrease the weight");
        // First Adam step with constant gradient moves by ~lr.
        assert!((w[[0]] - (1.0 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn adamw_weight_decay_shrinks_weights_without_gradient_signal() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[1]), 2.0), true);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.5);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::zeros(IxDyn(&[1])));
        opt.update(&mut store, &grads);
        let w = store.get("w").value[[0]];
        assert!((w - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-9);
    }

    #[test]
    fn timestep_embedding_is_deterministic_and_bounded() {
        let a = timestep_embedding::<f64>(417, 64);
        let b = timestep_embedding::<f64>(417, 64);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        let c = timestep_embedding::<f64>(418, 64);
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn position_encoding_distinguishes_positions() {
        let pe = position_encoding_2d::<f64>(4, 5, 16);
        assert_eq!(pe.dim(), (20, 16));
        for i in 0..20 {
            for j in (i + 1)..20 {
                let diff: f64 = pe
                    .row(i)
                    .iter()
                    .zip(pe.row(j).iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(diff > 1e-6, "rows {i} and {j} identical");
            }
        }
    }
}
