//! Tape-based reverse-mode automatic differentiation.
//!
//! Every tracked primitive appends one node holding the ids of its tracked
//! inputs and a closure that pulls a cotangent back through the operation.
//! Nodes are appended in execution order, so ids are topologically sorted
//! and a single reverse sweep visits each node at most once.
//!
//! Closures must capture *detached* tensors only; a captured tracked tensor
//! would hold the tape alive through itself (a reference cycle).

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    self, check_same_shape, is_channel_broadcast, raw_sum_axes, resolve_axes,
    spread_reduced, zip, zip_channel, Tensor,
};

pub(crate) struct Tracked<T: Scalar> {
    pub(crate) tape: Rc<RefCell<TapeInner<T>>>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Tracked<T> {
    fn clone(&self) -> Self {
        Tracked {
            tape: Rc::clone(&self.tape),
            id: self.id,
        }
    }
}

type VjpFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T: Scalar> {
    /// Ids of the tracked inputs; every id precedes this node's own id.
    inputs: Vec<usize>,
    /// Maps the node's output cotangent to one contribution per tracked input.
    vjp: VjpFn<T>,
}

pub(crate) struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaves: Vec<(String, usize, Vec<usize>)>,
    frozen: bool,
}

/// Gradient tape. Single-owner while recording; after the first `backward`
/// or `vjp` call it freezes and can only be replayed.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                leaves: Vec::new(),
                frozen: false,
            })),
        }
    }

    /// Registers `value` as a named differentiable leaf and returns the
    /// tracked handle (same storage).
    pub fn watch(&self, name: &str, value: &Tensor<T>) -> Result<Tensor<T>> {
        let mut inner = self.inner.borrow_mut();
        if inner.frozen {
            return Err(Error::TapeFrozen);
        }
        if inner.leaves.iter().any(|(n, _, _)| n == name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            inputs: Vec::new(),
            vjp: Box::new(|_| Vec::new()),
        });
        inner
            .leaves
            .push((name.to_string(), id, value.shape().to_vec()));
        let mut out = value.detach();
        out.node = Some(Tracked {
            tape: Rc::clone(&self.inner),
            id,
        });
        Ok(out)
    }

    pub fn is_frozen(&self) -> bool {
        self.inner.borrow().frozen
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Gradients of a scalar loss with respect to every tracked leaf.
    /// Freezes the tape.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<GradMap<T>> {
        if !(loss.numel() == 1 && loss.rank() == 0) {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let one = Tensor::scalar(T::one());
        self.vjp(&[loss], &[&one])
    }

    /// Pulls `cotangents` back from `outputs` to every tracked leaf.
    /// Equivalent to `backward(Σ⟨cotangent, output⟩)`. Freezes the tape;
    /// replaying a frozen tape is allowed and deterministic.
    pub fn vjp(&self, outputs: &[&Tensor<T>], cotangents: &[&Tensor<T>]) -> Result<GradMap<T>> {
        if outputs.len() != cotangents.len() {
            return Err(Error::Config(format!(
                "vjp: {} outputs but {} cotangents",
                outputs.len(),
                cotangents.len()
            )));
        }
        self.inner.borrow_mut().frozen = true;
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);

        for (out, cot) in outputs.iter().zip(cotangents) {
            check_same_shape("vjp", out, cot)?;
            let tracked = out.node.as_ref().ok_or(Error::NotOnTape)?;
            if !Rc::ptr_eq(&tracked.tape, &self.inner) {
                return Err(Error::NotOnTape);
            }
            accumulate(&mut grads[tracked.id], cot.detach());
        }

        for id in (0..n).rev() {
            let (before, at) = grads.split_at_mut(id);
            let Some(cot) = at[0].as_ref() else { continue };
            let node = &inner.nodes[id];
            if node.inputs.is_empty() {
                // Leaf: its accumulated gradient is the result, keep it.
                continue;
            }
            let contributions = (node.vjp)(cot);
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (&input_id, contribution) in node.inputs.iter().zip(contributions) {
                debug_assert!(input_id < id);
                accumulate(&mut before[input_id], contribution);
            }
            // This node's cotangent is fully consumed; release it now so the
            // peak of a backward sweep stays proportional to the live
            // frontier, not to the whole tape.
            at[0] = None;
        }

        let mut map = GradMap::new();
        for (name, id, shape) in &inner.leaves {
            let grad = match grads[*id].take() {
                Some(g) => g,
                None => Tensor::zeros(shape),
            };
            map.insert(name.clone(), grad)?;
        }
        Ok(map)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, value: Tensor<T>) {
    *slot = Some(match slot.take() {
        None => value,
        Some(existing) => tensor::raw_add(&existing, &value),
    });
}

/// Named gradients, one entry per tracked leaf, each shaped like its leaf.
#[derive(Debug, Clone, Default)]
pub struct GradMap<T: Scalar> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn new() -> GradMap<T> {
        GradMap {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, grad: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.entries.insert(name, grad);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    /// Moves all entries of `other` in; names must be disjoint.
    pub fn merge(&mut self, other: GradMap<T>) -> Result<()> {
        for (name, grad) in other.entries {
            self.insert(name, grad)?;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> T {
        self.entries
            .values()
            .fold(T::zero(), |acc, g| acc.max(g.max_abs()))
    }
}

// ---------------------------------------------------------------------------
// Recording
// ---------------------------------------------------------------------------

/// Joins the tapes of `inputs` (all tracked inputs must share one tape) and,
/// when recording, appends a node whose VJP is produced by `build`.
///
/// `build` receives a mask of which inputs are tracked and must return a
/// closure yielding one cotangent contribution per tracked input, in input
/// order. Returns `out` with its tape linkage set.
pub(crate) fn record<T, F>(
    op: &'static str,
    inputs: &[&Tensor<T>],
    mut out: Tensor<T>,
    build: F,
) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnOnce(&[bool]) -> VjpFn<T>,
{
    let mut tape: Option<Rc<RefCell<TapeInner<T>>>> = None;
    let mut ids = Vec::new();
    let mut mask = vec![false; inputs.len()];
    for (i, input) in inputs.iter().enumerate() {
        if let Some(tracked) = &input.node {
            match &tape {
                None => tape = Some(Rc::clone(&tracked.tape)),
                Some(existing) => {
                    if !Rc::ptr_eq(existing, &tracked.tape) {
                        return Err(Error::TapeMismatch(op));
                    }
                }
            }
            ids.push(tracked.id);
            mask[i] = true;
        }
    }
    let Some(tape) = tape else { return Ok(out) };
    let mut inner = tape.borrow_mut();
    if inner.frozen {
        return Err(Error::TapeFrozen);
    }
    let vjp = build(&mask);
    let id = inner.nodes.len();
    inner.nodes.push(Node { inputs: ids, vjp });
    drop(inner);
    out.node = Some(Tracked { tape, id });
    Ok(out)
}

/// Filters per-input contributions down to the tracked ones, in input order.
pub(crate) fn keep_tracked<T: Scalar>(
    mask: &[bool],
    contributions: Vec<Tensor<T>>,
) -> Vec<Tensor<T>> {
    debug_assert_eq!(mask.len(), contributions.len());
    contributions
        .into_iter()
        .zip(mask)
        .filter_map(|(c, &m)| m.then_some(c))
        .collect()
}

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives
// ---------------------------------------------------------------------------

fn binary_shape_check<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if is_channel_broadcast(a, b) {
        Ok(true)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Elementwise sum. `b` may be a rank-1 per-channel vector against a rank-4 `a`.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let bcast = binary_shape_check("add", a, b)?;
    let out = if bcast {
        zip_channel(a, b, |x, y| x + y)
    } else {
        zip(a, b, |x, y| x + y)
    };
    record("add", &[a, b], out, |mask| {
        let mask = mask.to_vec();
        Box::new(move |cot| {
            let db = if bcast {
                raw_sum_axes(cot, &[0, 2, 3])
            } else {
                cot.clone()
            };
            keep_tracked(&mask, vec![cot.clone(), db])
        })
    })
}

/// Elementwise difference, with the same broadcast rule as [`add`].
pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let bcast = binary_shape_check("sub", a, b)?;
    let out = if bcast {
        zip_channel(a, b, |x, y| x - y)
    } else {
        zip(a, b, |x, y| x - y)
    };
    record("sub", &[a, b], out, |mask| {
        let mask = mask.to_vec();
        Box::new(move |cot| {
            let db = if bcast {
                raw_sum_axes(cot, &[0, 2, 3]).map(|v| -v)
            } else {
                cot.map(|v| -v)
            };
            keep_tracked(&mask, vec![cot.clone(), db])
        })
    })
}

/// Elementwise product, with the same broadcast rule as [`add`].
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let bcast = binary_shape_check("mul", a, b)?;
    let out = if bcast {
        zip_channel(a, b, |x, y| x * y)
    } else {
        zip(a, b, |x, y| x * y)
    };
    record("mul", &[a, b], out, |mask| {
        let mask = mask.to_vec();
        let a = a.detach();
        let b = b.detach();
        Box::new(move |cot| {
            let (da, db) = if bcast {
                let da = zip_channel(cot, &b, |c, y| c * y);
                let db = raw_sum_axes(&zip(cot, &a, |c, x| c * x), &[0, 2, 3]);
                (da, db)
            } else {
                (zip(cot, &b, |c, y| c * y), zip(cot, &a, |c, x| c * x))
            };
            keep_tracked(&mask, vec![da, db])
        })
    })
}

/// Multiplication by a scalar constant.
pub fn scale<T: Scalar>(a: &Tensor<T>, k: T) -> Result<Tensor<T>> {
    let out = a.map(|x| x * k);
    record("scale", &[a], out, |_| {
        Box::new(move |cot| vec![cot.map(|c| c * k)])
    })
}

/// Rectified linear unit. The derivative at exactly zero is zero.
pub fn relu<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let out = a.map(|x| if x > T::zero() { x } else { T::zero() });
    record("relu", &[a], out, |_| {
        let a = a.detach();
        Box::new(move |cot| {
            vec![zip(cot, &a, |c, x| {
                if x > T::zero() {
                    c
                } else {
                    T::zero()
                }
            })]
        })
    })
}

/// Sum over `axes` (`None` reduces every axis to a scalar).
pub fn sum<T: Scalar>(x: &Tensor<T>, axes: Option<&[usize]>) -> Result<Tensor<T>> {
    let axes = resolve_axes(x, axes)?;
    let out = raw_sum_axes(x, &axes);
    record("sum", &[x], out, |_| {
        let in_shape = x.shape().to_vec();
        Box::new(move |cot| vec![spread_reduced(cot, &in_shape, &axes, T::one())])
    })
}

/// Arithmetic mean over `axes` (`None` reduces every axis).
pub fn mean<T: Scalar>(x: &Tensor<T>, axes: Option<&[usize]>) -> Result<Tensor<T>> {
    let axes = resolve_axes(x, axes)?;
    let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
    let k = T::one() / T::from_usize(count);
    let out = raw_sum_axes(x, &axes).map(|v| v * k);
    record("mean", &[x], out, |_| {
        let in_shape = x.shape().to_vec();
        Box::new(move |cot| vec![spread_reduced(cot, &in_shape, &axes, k)])
    })
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    sum(x, None)
}

pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    mean(x, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[vals.len()], vals.to_vec())
    }

    #[test]
    fn elementwise_values() {
        let a = t1(&[1.0, 2.0]);
        let b = t1(&[3.0, 4.0]);
        assert_eq!(add(&a, &b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(sub(&b, &a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(mul(&a, &b).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(scale(&t1(&[2.0, 4.0]), 0.5).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(relu(&t1(&[-1.0, 0.0, 2.0])).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn elementwise_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        let err = add(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn reduce_values() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sum_all(&x).unwrap().item(), 10.0);
        assert_eq!(mean_all(&x).unwrap().item(), 2.5);
        assert_eq!(sum_all(&Tensor::<f64>::zeros(&[3, 3])).unwrap().item(), 0.0);
    }

    #[test]
    fn reduce_rejects_invalid_axis() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        assert!(sum(&x, Some(&[2])).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape
            .watch("x", &Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 4.0]))
            .unwrap();
        let loss = sum_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(tape.is_frozen());
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.watch("x", &t1(&[1.0, 2.0])).unwrap();
        let loss = sum_all(&mul(&x, &x).unwrap()).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss_on_this_tape() {
        let tape = Tape::new();
        let x = tape.watch("x", &t1(&[1.0, 2.0])).unwrap();
        let y = mul(&x, &x).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(Error::NonScalarLoss(_))
        ));

        let other = Tape::<f64>::new();
        let z = other.watch("z", &Tensor::scalar(1.0)).unwrap();
        let loss = scale(&z, 2.0).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::NotOnTape)));
    }

    #[test]
    fn vjp_of_linear_map_is_the_coefficient() {
        let tape = Tape::new();
        let x = tape.watch("x", &Tensor::scalar(5.0)).unwrap();
        let y = scale(&x, 3.0).unwrap();
        let one = Tensor::scalar(1.0);
        let grads = tape.vjp(&[&y], &[&one]).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 3.0);
    }

    #[test]
    fn vjp_of_zero_cotangent_is_zero() {
        let tape = Tape::new();
        let x = tape.watch("x", &t1(&[1.0, 2.0, 3.0])).unwrap();
        let y = relu(&mul(&x, &x).unwrap()).unwrap();
        let zero = Tensor::zeros(&[3]);
        let grads = tape.vjp(&[&y], &[&zero]).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn replaying_a_frozen_tape_is_bitwise_deterministic() {
        let tape = Tape::new();
        let x = tape.watch("x", &t1(&[0.3, -1.7, 2.9])).unwrap();
        let y = mul(&relu(&x).unwrap(), &x).unwrap();
        let v = t1(&[0.11, 0.23, -0.7]);
        let first = tape.vjp(&[&y], &[&v]).unwrap();
        let second = tape.vjp(&[&y], &[&v]).unwrap();
        assert_eq!(
            first.get("x").unwrap().data(),
            second.get("x").unwrap().data()
        );
    }

    #[test]
    fn frozen_tape_rejects_new_operations() {
        let tape = Tape::new();
        let x = tape.watch("x", &Tensor::scalar(1.0)).unwrap();
        let loss = scale(&x, 2.0).unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(scale(&x, 1.0), Err(Error::TapeFrozen)));
        assert!(matches!(
            tape.watch("y", &Tensor::scalar(0.0)),
            Err(Error::TapeFrozen)
        ));
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let t1_ = Tape::new();
        let t2 = Tape::new();
        let a = t1_.watch("a", &Tensor::scalar(1.0)).unwrap();
        let b = t2.watch("b", &Tensor::scalar(2.0)).unwrap();
        assert!(matches!(add(&a, &b), Err(Error::TapeMismatch("add"))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.watch("x", &t1(&[0.0, -1.0, 1.0])).unwrap();
        let loss = sum_all(&relu(&x).unwrap()).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn unreached_leaves_get_zero_gradients() {
        let tape = Tape::new();
        let x = tape.watch("x", &Tensor::scalar(1.0)).unwrap();
        let _unused = tape.watch("unused", &t1(&[1.0, 2.0])).unwrap();
        let loss = scale(&x, 4.0).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn channel_broadcast_add_and_grad() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.watch("b", &t1(&[10.0, 20.0])).unwrap();
        let y = add(&x, &b).unwrap();
        assert_eq!(y.data(), &[11.0, 12.0, 23.0, 24.0]);
        let v = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 1.0, 1.0, 1.0]);
        let grads = tape.vjp(&[&y], &[&v]).unwrap();
        assert_eq!(grads.get("b").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let (alpha, beta) = (0.37, -1.21);
        let xv = t1(&[0.5, -0.25, 1.75, 2.0]);

        let run = |a: f64, b: f64| -> GradMap<f64> {
            let tape = Tape::new();
            let x = tape.watch("x", &xv).unwrap();
            let l1 = sum_all(&mul(&x, &x).unwrap()).unwrap();
            let l2 = sum_all(&relu(&x).unwrap()).unwrap();
            let loss = add(&scale(&l1, a).unwrap(), &scale(&l2, b).unwrap()).unwrap();
            tape.backward(&loss).unwrap()
        };

        let combined = run(alpha, beta);
        let g1 = run(1.0, 0.0);
        let g2 = run(0.0, 1.0);
        for i in 0..4 {
            let expect = alpha * g1.get("x").unwrap().data()[i] + beta * g2.get("x").unwrap().data()[i];
            let got = combined.get("x").unwrap().data()[i];
            assert!((expect - got).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }
}
