//! Parameters, basic layers and the Adam optimizer.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
    seed: u64,
}

/// One parameter in serialized form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    /// Parameters are initialized from a stream keyed by `(seed, name)`, so a
    /// parameter's initial value does not depend on what else the model holds.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Deterministic generator for the parameter called `name`.
    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name));
        rng
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, Tensor::from_parts(shape.to_vec(), vec![v; n]))
    }

    /// Gaussian init with standard deviation `std`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let mut rng = self.rng_for(name);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| NamedTensor {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites every parameter from `named`; names and shapes must match exactly.
    pub fn load_named(&mut self, named: &[NamedTensor]) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                named.len(),
                self.len()
            )));
        }
        for nt in named {
            let id = self
                .id(&nt.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", nt.name)))?;
            let t = &mut self.tensors[id.0];
            if t.shape() != nt.shape.as_slice() || nt.data.len() != t.len() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", nt.name)));
            }
            t.data_mut().copy_from_slice(&nt.data);
        }
        Ok(())
    }
}

/// Affine map on token rows: `x · W + b` with `W` of shape `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: ps.normal(&format!("{name}.w"), &[d_in, d_out], (1.0 / d_in as f64).sqrt()),
            b: ps.zeros(&format!("{name}.b"), &[d_out]),
        }
    }

    /// Both weight and bias start at zero.
    pub fn zeroed(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: ps.zeros(&format!("{name}.w"), &[d_in, d_out]),
            b: ps.zeros(&format!("{name}.b"), &[d_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Square-kernel convolution on `C × H × W` maps.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let std = (1.0 / (c_in * k * k) as f64).sqrt();
        Self {
            w: ps.normal(&format!("{name}.w"), &[c_out, c_in, k, k], std),
            b: Some(ps.zeros(&format!("{name}.b"), &[c_out])),
            stride,
            pad: (k - 1) / 2,
        }
    }

    /// Bias-free kernel that copies input channel `i mod c_in` to output `i`
    /// (centre tap only), so constants map to constants.
    pub fn identity(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let mut w = Tensor::zeros(&[c_out, c_in, k, k]);
        let c = k / 2;
        for o in 0..c_out {
            w.data_mut()[((o * c_in + o % c_in) * k + c) * k + c] = 1.0;
        }
        Self {
            w: ps.add(&format!("{name}.w"), w),
            b: None,
            stride: 1,
            pad: (k - 1) / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Layer normalization over the channel axis of token rows.
#[derive(Clone, Debug)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            g: ps.filled(&format!("{name}.g"), &[d], 1.0),
            b: ps.zeros(&format!("{name}.b"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gg = g.param(self.g);
        let b = g.param(self.b);
        g.layer_norm(x, gg, b)
    }
}

/// Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(ps: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = ps.ids().map(|id| vec![0.0; ps.get(id).len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one bias-corrected update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn update(&mut self, ps: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in ps.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = ps.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }

    pub fn check_matches(&self, ps: &ParamStore) -> Result<()> {
        let ok = self.m.len() == ps.len()
            && self.v.len() == ps.len()
            && ps
                .ids()
                .all(|id| self.m[id.index()].len() == ps.get(id).len() && self.v[id.index()].len() == ps.get(id).len());
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("optimizer state does not match the parameters".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        b.normal("other", &[5], 1.0);
        let ia = a.normal("layer.w", &[3, 4], 0.5);
        let ib = b.normal("layer.w", &[3, 4], 0.5);
        assert_eq!(a.get(ia), b.get(ib));
        let mut c = ParamStore::new(8);
        let ic = c.normal("layer.w", &[3, 4], 0.5);
        assert_ne!(a.get(ia), c.get(ic));
    }

    #[test]
    fn named_roundtrip() {
        let mut a = ParamStore::new(1);
        a.normal("x", &[2, 2], 1.0);
        a.zeros("y", &[3]);
        let named = a.to_named();
        let mut b = ParamStore::new(2);
        b.zeros("x", &[2, 2]);
        b.zeros("y", &[3]);
        b.load_named(&named).unwrap();
        assert_eq!(b.to_named(), named);
        let mut c = ParamStore::new(2);
        c.zeros("x", &[4]);
        c.zeros("y", &[3]);
        assert!(c.load_named(&named).is_err());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamStore::new(0);
        let id = ps.add("p", Tensor::from_parts(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&ps, 0.1);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&ps);
                let p = g.param(id);
                let z = g.input(Tensor::zeros(&[2]));
                let l = g.mse(p, z);
                g.backward(l)
            };
            opt.update(&mut ps, &grads);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
