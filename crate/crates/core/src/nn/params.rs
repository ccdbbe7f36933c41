use ndarray::{ArrayD, ArrayView1, ArrayView2, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::real::Real;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameter tensors.
///
/// Insertion order is the canonical order for optimizers, hashing and
/// checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<ArrayD<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor.as_standard_layout().into_owned());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.tensors[id.0]
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.tensors[id.0].view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.tensors[id.0].view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grads(&self) -> Grads<F> {
        Grads { tensors: self.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect() }
    }

    /// Replaces a tensor, checking that the shape is unchanged.
    pub fn set(&mut self, id: ParamId, value: ArrayD<F>) -> Result<(), String> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(format!(
                "tensor {} has shape {:?}, got {:?}",
                self.names[id.0],
                cur.shape(),
                value.shape()
            ));
        }
        self.tensors[id.0] = value.as_standard_layout().into_owned();
        Ok(())
    }

    /// All parameters concatenated in canonical order.
    pub fn flat(&self) -> Vec<F> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for t in &mut self.tensors {
            for (dst, src) in t.iter_mut().zip(&flat[off..]) {
                *dst = *src;
            }
            off += t.len();
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for v in t.iter() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| G::lit(v.to_f64_lossless())))
                .collect(),
        }
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<F> {
    tensors: Vec<ArrayD<F>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<F>> {
        self.tensors.iter()
    }

    pub fn global_norm(&self) -> F {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(F::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * s);
        }
    }

    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn flat(&self) -> Vec<F> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gaussian tensor with the given standard deviation. Draws are made in
/// `f64` so both precisions see the same random stream.
pub fn normal_array<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            F::lit(z * std)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}
