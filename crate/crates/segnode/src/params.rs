//! Named parameter collections and the finite-difference gradient oracle.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Ordered, named collection of learnable tensors.
///
/// Iteration follows insertion order, which is what makes optimizer updates
/// and checkpoint layout deterministic.
#[derive(Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> ParamStore<T> {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        self.entries[i].1 = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n, t))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.iter().map(|(n, _)| n)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param_bytes(&self) -> u64 {
        (self.total_params() * T::BYTES) as u64
    }

    /// Concatenates all parameters into one flat vector, in insertion order.
    pub fn flatten(&self) -> Vec<T> {
        let mut flat = Vec::with_capacity(self.total_params());
        for (_, t) in &self.entries {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    /// Rebuilds a store with this store's names and shapes from a flat vector.
    pub fn unflatten(&self, flat: &[T]) -> Result<ParamStore<T>> {
        if flat.len() != self.total_params() {
            return Err(Error::Config(format!(
                "unflatten: expected {} values, got {}",
                self.total_params(),
                flat.len()
            )));
        }
        let mut out = ParamStore::new();
        let mut offset = 0;
        for (name, t) in &self.entries {
            let n = t.numel();
            out.insert(
                name.clone(),
                Tensor::from_vec(t.shape(), flat[offset..offset + n].to_vec()),
            )?;
            offset += n;
        }
        Ok(out)
    }

    /// Subset of the store whose names satisfy `keep`, sharing storage.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, t) in &self.entries {
            if keep(name) {
                out.insert(name.clone(), t.clone()).expect("names stay unique");
            }
        }
        out
    }

    /// Registers every parameter on `tape` and returns the tracked twins.
    pub fn watch_all(&self, tape: &Tape<T>) -> Result<ParamStore<T>> {
        let mut out = ParamStore::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), tape.watch(name, t)?)?;
        }
        Ok(out)
    }

    /// Copy of the store with one coordinate of one parameter shifted by `delta`.
    pub fn perturbed(&self, name: &str, index: usize, delta: T) -> Result<ParamStore<T>> {
        let target = self.get(name)?;
        if index >= target.numel() {
            return Err(Error::Config(format!(
                "coordinate {index} out of range for `{name}` ({} elements)",
                target.numel()
            )));
        }
        let mut data = target.to_vec();
        data[index] += delta;
        let mut out = self.clone();
        out.set(name, Tensor::from_vec(target.shape(), data))?;
        Ok(out)
    }
}

impl<T: Scalar> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ParamStore({} tensors, {} params)",
            self.len(),
            self.total_params()
        )
    }
}

/// One central-difference sample: `d f / d theta[name][index]`.
#[derive(Debug, Clone)]
pub struct FdSample<T> {
    pub name: String,
    pub index: usize,
    pub value: T,
}

/// Central finite differences of a scalar-valued function of the parameters,
/// evaluated at the sampled coordinates. This is the independent oracle the
/// reverse-mode and adjoint paths are checked against.
pub fn finite_diff_grad<T, F>(
    f: &mut F,
    theta: &ParamStore<T>,
    eps: T,
    coords: &[(String, usize)],
) -> Result<Vec<FdSample<T>>>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    assert!(eps > T::zero(), "finite differences need a positive step");
    let mut samples = Vec::with_capacity(coords.len());
    for (name, index) in coords {
        let plus = f(&theta.perturbed(name, *index, eps)?)?;
        let minus = f(&theta.perturbed(name, *index, -eps)?)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite_diff_grad at {name}[{index}]"),
                t: f64::NAN,
            });
        }
        samples.push(FdSample {
            name: name.clone(),
            index: *index,
            value: (plus - minus) / (eps + eps),
        });
    }
    Ok(samples)
}

/// Draws up to `count` distinct (parameter, coordinate) pairs, uniformly over
/// all scalar coordinates of the store.
pub fn sample_coords<T: Scalar>(
    store: &ParamStore<T>,
    count: usize,
    seed: u64,
) -> Vec<(String, usize)> {
    let total = store.total_params();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut picked = std::collections::BTreeSet::new();
    if count >= total {
        for (name, t) in store.iter() {
            for i in 0..t.numel() {
                picked.insert((name.clone(), i));
            }
        }
    } else {
        // Flat index over the concatenation of all parameters.
        let bounds: Vec<(String, usize)> = store
            .iter()
            .map(|(n, t)| (n.clone(), t.numel()))
            .collect();
        while picked.len() < count {
            let mut flat = rng.random_range(0..total);
            for (name, numel) in &bounds {
                if flat < *numel {
                    picked.insert((name.clone(), flat));
                    break;
                }
                flat -= numel;
            }
        }
    }
    picked.into_iter().collect()
}
