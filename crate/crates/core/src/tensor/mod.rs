//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a row-major f64 buffer plus shape. Operations on tensors
//! record their parents and a backward closure, forming an implicit tape;
//! [`Tensor::backward`] on a scalar walks that tape in reverse topological
//! order. Each backward pass propagates through pass-local buffers and then
//! deposits into every tensor's stored gradient, so repeated passes
//! accumulate additively until [`Tensor::zero_grad`]. Elementwise binary ops
//! broadcast over matching trailing dimensions (a dimension may also be 1 on
//! either side).
//!
//! Storage and accumulation are f64 throughout, which keeps
//! finite-difference gradient checks comfortably inside a 1e-3 relative
//! tolerance at step 1e-4.

pub mod optim;
pub mod store;

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Routes gradient contributions into pass-local buffers during backward.
pub struct GradSink {
    buffers: HashMap<*const Inner, Vec<f64>>,
}

impl GradSink {
    fn new() -> Self {
        GradSink {
            buffers: HashMap::new(),
        }
    }

    fn add(&mut self, t: &Tensor, contrib: &[f64]) {
        if !t.0.requires_grad {
            return;
        }
        let entry = self
            .buffers
            .entry(Rc::as_ptr(&t.0))
            .or_insert_with(|| vec![0.0; t.len()]);
        for (e, c) in entry.iter_mut().zip(contrib) {
            *e += c;
        }
    }

    fn get(&self, t: &Tensor) -> Option<Vec<f64>> {
        self.buffers.get(&Rc::as_ptr(&t.0)).cloned()
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[f64], &mut GradSink)>;

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense multi-dimensional array participating in a gradient tape.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &*self.0.data.borrow())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= d;
    }
    strides
}

/// Shape of the broadcast result, aligning trailing dimensions.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast {a:?} with {b:?} (dim {i}: {da} vs {db})"
            )));
        };
    }
    Ok(out)
}

/// Strides of an operand viewed through the broadcast output shape;
/// broadcast dimensions get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides_for(shape);
    let rank = out_shape.len();
    let offset = rank - shape.len();
    (0..rank)
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

impl Tensor {
    fn make(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Constant (non-trainable) tensor.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, got {} values",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor::make(shape, data, false, vec![], None))
    }

    /// Trainable leaf tensor.
    pub fn param_from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, got {} values",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor::make(shape, data, true, vec![], None))
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor::make(vec![1], vec![x], false, vec![], None)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::make(shape, vec![0.0; n], false, vec![], None)
    }

    /// Trainable tensor with Gaussian-initialized entries.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
        let n = numel(&shape);
        let data = if std == 0.0 {
            vec![0.0; n]
        } else {
            let normal = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| normal.sample(rng)).collect()
        };
        Tensor::make(shape, data, true, vec![], None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn values_ref(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Scalar value; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    /// Overwrite values in place (optimizer updates).
    pub fn set_values(&self, new: &[f64]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), new.len());
        d.copy_from_slice(new);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate_stored_grad(&self, contrib: &[f64]) {
        let mut g = self.0.grad.borrow_mut();
        match g.as_mut() {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    /// Detached copy: same values, no history, no gradient.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.0.shape.clone(), self.values(), false, vec![], None)
    }

    fn any_parent_grad(parents: &[&Tensor]) -> bool {
        parents.iter().any(|p| p.0.requires_grad)
    }

    // ---- elementwise binary ops -------------------------------------------

    fn binary_op(
        &self,
        other: &Tensor,
        fwd: fn(f64, f64) -> f64,
        dfa: fn(f64, f64) -> f64,
        dfb: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let n = numel(&out_shape);
        let sa = broadcast_strides(self.shape(), &out_shape);
        let sb = broadcast_strides(other.shape(), &out_shape);
        let out_strides = strides_for(&out_shape);
        let va = self.0.data.borrow();
        let vb = other.0.data.borrow();

        let same_shape = self.shape() == other.shape();
        let mut data = Vec::with_capacity(n);
        if same_shape {
            for i in 0..n {
                data.push(fwd(va[i], vb[i]));
            }
        } else {
            for i in 0..n {
                let mut rem = i;
                let mut oa = 0;
                let mut ob = 0;
                for (k, &os) in out_strides.iter().enumerate() {
                    let pos = rem / os;
                    rem %= os;
                    oa += pos * sa[k];
                    ob += pos * sb[k];
                }
                data.push(fwd(va[oa], vb[ob]));
            }
        }
        drop(va);
        drop(vb);

        let requires = Tensor::any_parent_grad(&[self, other]);
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            let b = other.clone();
            let out_shape_c = out_shape.clone();
            Some(Box::new(move |out_grad, _out_val, sink| {
                let va = a.0.data.borrow();
                let vb = b.0.data.borrow();
                let sa = broadcast_strides(a.shape(), &out_shape_c);
                let sb = broadcast_strides(b.shape(), &out_shape_c);
                let out_strides = strides_for(&out_shape_c);
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for (i, &go) in out_grad.iter().enumerate() {
                    let mut rem = i;
                    let mut oa = 0;
                    let mut ob = 0;
                    for (k, &os) in out_strides.iter().enumerate() {
                        let pos = rem / os;
                        rem %= os;
                        oa += pos * sa[k];
                        ob += pos * sb[k];
                    }
                    ga[oa] += go * dfa(va[oa], vb[ob]);
                    gb[ob] += go * dfb(va[oa], vb[ob]);
                }
                drop(va);
                drop(vb);
                sink.add(&a, &ga);
                sink.add(&b, &gb);
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone(), other.clone()] } else { vec![] };
        Ok(Tensor::make(out_shape, data, requires, parents, backward))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    // ---- elementwise unary ops --------------------------------------------

    /// `dfn(x, y)` is dy/dx given the input x and the output y.
    fn unary_op(&self, fwd: fn(f64) -> f64, dfn: fn(f64, f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.0.data.borrow().iter().map(|&x| fwd(x)).collect();
        let requires = self.0.requires_grad;
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            Some(Box::new(move |out_grad, out_val, sink| {
                let va = a.0.data.borrow();
                let contrib: Vec<f64> = out_grad
                    .iter()
                    .zip(va.iter().zip(out_val))
                    .map(|(&go, (&x, &y))| go * dfn(x, y))
                    .collect();
                drop(va);
                sink.add(&a, &contrib);
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone()] } else { vec![] };
        Tensor::make(self.0.shape.clone(), data, requires, parents, backward)
    }

    pub fn neg(&self) -> Tensor {
        self.unary_op(|x| -x, |_, _| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary_op(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.unary_op(f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Tensor {
        // Subgradient 0 at the kink.
        self.unary_op(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary_op(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary_op(stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Tensor {
        self.unary_op(stable_softplus, |x, _| stable_sigmoid(x))
    }

    pub fn gelu(&self) -> Tensor {
        self.unary_op(gelu_fwd, gelu_dfn)
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&self, exponent: f64) -> Tensor {
        let data: Vec<f64> = self.0.data.borrow().iter().map(|&x| x.powf(exponent)).collect();
        let requires = self.0.requires_grad;
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            Some(Box::new(move |out_grad, _, sink| {
                let va = a.0.data.borrow();
                let contrib: Vec<f64> = out_grad
                    .iter()
                    .zip(va.iter())
                    .map(|(&go, &x)| go * exponent * x.powf(exponent - 1.0))
                    .collect();
                drop(va);
                sink.add(&a, &contrib);
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone()] } else { vec![] };
        Tensor::make(self.0.shape.clone(), data, requires, parents, backward)
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.0.data.borrow().iter().map(|&x| x * c).collect();
        let requires = self.0.requires_grad;
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            Some(Box::new(move |out_grad, _, sink| {
                let contrib: Vec<f64> = out_grad.iter().map(|&go| go * c).collect();
                sink.add(&a, &contrib);
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone()] } else { vec![] };
        Tensor::make(self.0.shape.clone(), data, requires, parents, backward)
    }

    /// Add a constant.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.0.data.borrow().iter().map(|&x| x + c).collect();
        let requires = self.0.requires_grad;
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            Some(Box::new(move |out_grad, _, sink| {
                sink.add(&a, out_grad);
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone()] } else { vec![] };
        Tensor::make(self.0.shape.clone(), data, requires, parents, backward)
    }

    /// Clamp into `[lo, hi]`; gradient passes where the input lies inside
    /// the range (inclusive) and is blocked outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data: Vec<f64> = self.0.data.borrow().iter().map(|&x| x.clamp(lo, hi)).collect();
        let requires = self.0.requires_grad;
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            Some(Box::new(move |out_grad, _, sink| {
                let va = a.0.data.borrow();
                let contrib: Vec<f64> = out_grad
                    .iter()
                    .zip(va.iter())
                    .map(|(&go, &x)| if (lo..=hi).contains(&x) { go } else { 0.0 })
                    .collect();
                drop(va);
                sink.add(&a, &contrib);
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone()] } else { vec![] };
        Tensor::make(self.0.shape.clone(), data, requires, parents, backward)
    }

    // ---- structural ops ----------------------------------------------------

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.0.shape, shape
            )));
        }
        let data = self.values();
        let requires = self.0.requires_grad;
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            Some(Box::new(move |out_grad, _, sink| {
                sink.add(&a, out_grad);
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone()] } else { vec![] };
        Ok(Tensor::make(shape, data, requires, parents, backward))
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected 2-d tensor, got {other:?}"))),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let v = self.0.data.borrow();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v[i * c + j];
            }
        }
        drop(v);
        let requires = self.0.requires_grad;
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            Some(Box::new(move |out_grad, _, sink| {
                // out is (c, r); transpose the gradient back.
                let (r, c) = (a.0.shape[0], a.0.shape[1]);
                let mut contrib = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        contrib[j * c + i] = out_grad[i * r + j];
                    }
                }
                sink.add(&a, &contrib);
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone()] } else { vec![] };
        Ok(Tensor::make(vec![c, r], data, requires, parents, backward))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, ka) = self.dims2()?;
        let (kb, n) = other.dims2()?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.0.shape, other.0.shape
            )));
        }
        let va = self.0.data.borrow();
        let vb = other.0.data.borrow();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..ka {
                let aik = va[i * ka + k];
                if aik == 0.0 {
                    continue;
                }
                let row_b = &vb[k * n..(k + 1) * n];
                let row_out = &mut data[i * n..(i + 1) * n];
                for (o, &b) in row_out.iter_mut().zip(row_b) {
                    *o += aik * b;
                }
            }
        }
        drop(va);
        drop(vb);
        let requires = Tensor::any_parent_grad(&[self, other]);
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            let b = other.clone();
            Some(Box::new(move |out_grad, _, sink| {
                let (m, k) = (a.0.shape[0], a.0.shape[1]);
                let n = b.0.shape[1];
                if a.0.requires_grad {
                    // dA = dC * B^T
                    let vb = b.0.data.borrow();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let go = out_grad[i * n + j];
                            if go == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                ga[i * k + kk] += go * vb[kk * n + j];
                            }
                        }
                    }
                    drop(vb);
                    sink.add(&a, &ga);
                }
                if b.0.requires_grad {
                    // dB = A^T * dC
                    let va = a.0.data.borrow();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = va[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[kk * n + j] += aik * out_grad[i * n + j];
                            }
                        }
                    }
                    drop(va);
                    sink.add(&b, &gb);
                }
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone(), other.clone()] } else { vec![] };
        Ok(Tensor::make(vec![m, n], data, requires, parents, backward))
    }

    /// Slice along an axis of a 2-d tensor.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let bound = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > bound {
            return Err(Error::Shape(format!(
                "slice axis {axis} range {start}..{end} invalid for shape {:?}",
                self.0.shape
            )));
        }
        let v = self.0.data.borrow();
        let (out_r, out_c) = if axis == 0 { (end - start, c) } else { (r, end - start) };
        let mut data = Vec::with_capacity(out_r * out_c);
        for i in 0..out_r {
            for j in 0..out_c {
                let (si, sj) = if axis == 0 { (start + i, j) } else { (i, start + j) };
                data.push(v[si * c + sj]);
            }
        }
        drop(v);
        let requires = self.0.requires_grad;
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            Some(Box::new(move |out_grad, _, sink| {
                let (r, c) = (a.0.shape[0], a.0.shape[1]);
                let mut contrib = vec![0.0; r * c];
                let (out_r, out_c) = if axis == 0 { (end - start, c) } else { (r, end - start) };
                for i in 0..out_r {
                    for j in 0..out_c {
                        let (si, sj) = if axis == 0 { (start + i, j) } else { (i, start + j) };
                        contrib[si * c + sj] = out_grad[i * out_c + j];
                    }
                }
                sink.add(&a, &contrib);
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone()] } else { vec![] };
        Ok(Tensor::make(vec![out_r, out_c], data, requires, parents, backward))
    }

    // ---- reductions ---------------------------------------------------------

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.0.data.borrow().iter().sum();
        let requires = self.0.requires_grad;
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            Some(Box::new(move |out_grad, _, sink| {
                let contrib = vec![out_grad[0]; a.len()];
                sink.add(&a, &contrib);
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone()] } else { vec![] };
        Tensor::make(vec![1], vec![total], requires, parents, backward)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along one axis of a 2-d tensor, keeping the reduced axis as 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if axis > 1 {
            return Err(Error::Shape(format!("sum_axis axis {axis} out of range")));
        }
        let v = self.0.data.borrow();
        let (out_shape, data) = if axis == 1 {
            let mut data = vec![0.0; r];
            for i in 0..r {
                for j in 0..c {
                    data[i] += v[i * c + j];
                }
            }
            (vec![r, 1], data)
        } else {
            let mut data = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    data[j] += v[i * c + j];
                }
            }
            (vec![1, c], data)
        };
        drop(v);
        let requires = self.0.requires_grad;
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            Some(Box::new(move |out_grad, _, sink| {
                let (r, c) = (a.0.shape[0], a.0.shape[1]);
                let mut contrib = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        contrib[i * c + j] = if axis == 1 { out_grad[i] } else { out_grad[j] };
                    }
                }
                sink.add(&a, &contrib);
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone()] } else { vec![] };
        Ok(Tensor::make(out_shape, data, requires, parents, backward))
    }

    /// Mean along one axis of a 2-d tensor, keeping the reduced axis as 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let n = if axis == 1 { c } else { r } as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    /// Numerically stable softmax along one axis of a 2-d tensor.
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if axis != 1 && axis != 0 {
            return Err(Error::Shape(format!("softmax axis {axis} out of range")));
        }
        let v = self.0.data.borrow();
        let mut data = vec![0.0; r * c];
        let lanes = if axis == 1 { r } else { c };
        let lane_len = if axis == 1 { c } else { r };
        let at = |lane: usize, k: usize| -> usize {
            if axis == 1 {
                lane * c + k
            } else {
                k * c + lane
            }
        };
        for lane in 0..lanes {
            let mut max = f64::NEG_INFINITY;
            for k in 0..lane_len {
                max = max.max(v[at(lane, k)]);
            }
            let mut denom = 0.0;
            for k in 0..lane_len {
                let e = (v[at(lane, k)] - max).exp();
                data[at(lane, k)] = e;
                denom += e;
            }
            for k in 0..lane_len {
                data[at(lane, k)] /= denom;
            }
        }
        drop(v);
        let requires = self.0.requires_grad;
        let backward: Option<BackwardFn> = if requires {
            let a = self.clone();
            Some(Box::new(move |out_grad, out_val, sink| {
                let (r, c) = (a.0.shape[0], a.0.shape[1]);
                let lanes = if axis == 1 { r } else { c };
                let lane_len = if axis == 1 { c } else { r };
                let at = |lane: usize, k: usize| -> usize {
                    if axis == 1 {
                        lane * c + k
                    } else {
                        k * c + lane
                    }
                };
                let mut contrib = vec![0.0; r * c];
                for lane in 0..lanes {
                    let mut dot = 0.0;
                    for k in 0..lane_len {
                        let idx = at(lane, k);
                        dot += out_grad[idx] * out_val[idx];
                    }
                    for k in 0..lane_len {
                        let idx = at(lane, k);
                        contrib[idx] = out_val[idx] * (out_grad[idx] - dot);
                    }
                }
                sink.add(&a, &contrib);
            }))
        } else {
            None
        };
        let parents = if requires { vec![self.clone()] } else { vec![] };
        Ok(Tensor::make(vec![r, c], data, requires, parents, backward))
    }

    // ---- autodiff -------------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients accumulate additively into
    /// every tensor with `requires_grad`; call [`Tensor::zero_grad`] between
    /// steps.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.0.shape
            )));
        }
        // Iterative post-order DFS; reversing it yields a reverse
        // topological order over the recorded graph.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.0));
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.0.parents.len() {
                let child = node.0.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                let ptr = Rc::as_ptr(&child.0);
                if child.0.requires_grad && !visited.contains(&ptr) {
                    visited.insert(ptr);
                    stack.push((child, 0));
                }
            } else {
                topo.push(node);
            }
        }

        let mut sink = GradSink::new();
        sink.add(self, &[1.0]);
        for node in topo.iter().rev() {
            let Some(grad) = sink.get(node) else { continue };
            if let Some(back) = &node.0.backward {
                let val = node.0.data.borrow().clone();
                back(&grad, &val, &mut sink);
            }
        }
        for node in &topo {
            if let Some(grad) = sink.get(node) {
                node.accumulate_stored_grad(&grad);
            }
        }
        Ok(())
    }
}

/// Concatenate 2-d tensors along an axis.
pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    if tensors.is_empty() {
        return Err(Error::Shape("concat of zero tensors".into()));
    }
    let first = tensors[0].dims2()?;
    let mut rows = first.0;
    let mut cols = first.1;
    for t in &tensors[1..] {
        let (r, c) = t.dims2()?;
        match axis {
            0 => {
                if c != cols {
                    return Err(Error::Shape(format!(
                        "concat axis 0 column mismatch: {c} vs {cols}"
                    )));
                }
                rows += r;
            }
            1 => {
                if r != rows {
                    return Err(Error::Shape(format!(
                        "concat axis 1 row mismatch: {r} vs {rows}"
                    )));
                }
                cols += c;
            }
            _ => return Err(Error::Shape(format!("concat axis {axis} out of range"))),
        }
    }
    let requires = tensors.iter().any(|t| t.0.requires_grad);
    let owned: Vec<Tensor> = tensors.iter().map(|&t| t.clone()).collect();
    if axis == 0 {
        let mut data = Vec::with_capacity(rows * cols);
        for t in tensors {
            data.extend_from_slice(&t.0.data.borrow());
        }
        let backward: Option<BackwardFn> = if requires {
            let owned = owned.clone();
            Some(Box::new(move |out_grad, _, sink| {
                let mut offset = 0;
                for t in &owned {
                    let n = t.len();
                    sink.add(t, &out_grad[offset..offset + n]);
                    offset += n;
                }
            }))
        } else {
            None
        };
        let parents = if requires { owned } else { vec![] };
        Ok(Tensor::make(vec![rows, cols], data, requires, parents, backward))
    } else {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for t in tensors {
                let c = t.0.shape[1];
                let v = t.0.data.borrow();
                data.extend_from_slice(&v[i * c..(i + 1) * c]);
            }
        }
        let backward: Option<BackwardFn> = if requires {
            let owned = owned.clone();
            let total_cols = cols;
            Some(Box::new(move |out_grad, _, sink| {
                let rows = owned[0].0.shape[0];
                let mut col_start = 0;
                for t in &owned {
                    let c = t.0.shape[1];
                    let mut contrib = vec![0.0; rows * c];
                    for i in 0..rows {
                        for j in 0..c {
                            contrib[i * c + j] = out_grad[i * total_cols + col_start + j];
                        }
                    }
                    sink.add(t, &contrib);
                    col_start += c;
                }
            }))
        } else {
            None
        };
        let parents = if requires { owned } else { vec![] };
        Ok(Tensor::make(vec![rows, cols], data, requires, parents, backward))
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_dfn(x: f64, _y: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Maximum relative finite-difference error over every element of every
/// leaf, with central differences of step `h`. `build` must be a pure
/// function of the leaf values.
pub fn finite_difference_check<F>(build: F, leaves: &[Tensor], h: f64) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    for leaf in leaves {
        leaf.zero_grad();
    }
    let loss = build(leaves);
    loss.backward().expect("scalar loss");
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let base = leaf.values();
        for ei in 0..base.len() {
            let mut plus = base.clone();
            plus[ei] += h;
            leaf.set_values(&plus);
            let f_plus = build(leaves).item();
            let mut minus = base.clone();
            minus[ei] -= h;
            leaf.set_values(&minus);
            let f_minus = build(leaves).item();
            leaf.set_values(&base);
            let fd = (f_plus - f_minus) / (2.0 * h);
            let ad = grads[li][ei];
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((fd - ad).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::param_from_vec(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let x = t1(&[0.0]);
        assert_eq!(x.gelu().item(), 0.0);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let x = t1(&[0.0]);
        assert!((x.softplus().item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let x = Tensor::param_from_vec(vec![1, 3], vec![0.7, 0.7, 0.7]).unwrap();
        let y = x.softmax_axis(1).unwrap();
        for v in y.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng::stream(5, &[1]);
        for _ in 0..20 {
            let data: Vec<f64> = (0..12).map(|_| r.random_range(-30.0..30.0)).collect();
            let x = Tensor::param_from_vec(vec![3, 4], data).unwrap();
            let y = x.softmax_axis(1).unwrap();
            let v = y.values();
            for i in 0..3 {
                let s: f64 = v[i * 4..(i + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
                assert!(v[i * 4..(i + 1) * 4].iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = t1(&[1.0, 2.0, 3.0]);
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let x = t1(&[2.0, -1.0]);
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, -2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = t1(&[1.0, 2.0]);
        assert!(matches!(x.mul(&x).unwrap().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = t1(&[3.0]);
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::param_from_vec(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::param_from_vec(vec![4], vec![0.0; 4]).unwrap();
        match a.add(&b) {
            Err(Error::Shape(msg)) => {
                assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn broadcasting_row_and_column() {
        let m = Tensor::param_from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let row = Tensor::param_from_vec(vec![1, 3], vec![10., 20., 30.]).unwrap();
        let col = Tensor::param_from_vec(vec![2, 1], vec![100., 200.]).unwrap();
        let out = m.add(&row).unwrap().add(&col).unwrap();
        assert_eq!(out.values(), vec![111., 122., 133., 214., 225., 236.]);
        out.sum().backward().unwrap();
        assert_eq!(row.grad().unwrap(), vec![2., 2., 2.]);
        assert_eq!(col.grad().unwrap(), vec![3., 3.]);
    }

    #[test]
    fn matmul_known_product() {
        let a = Tensor::param_from_vec(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::param_from_vec(vec![2, 2], vec![5., 6., 7., 8.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.values(), vec![19., 22., 43., 50.]);
    }

    #[test]
    fn clamp_gradient_gates_outside_range() {
        let x = t1(&[-2.0, 0.5, 3.0]);
        let y = x.clamp(-1.0, 1.0);
        assert_eq!(y.values(), vec![-1.0, 0.5, 1.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = t1(&[2.0]);
        let d = x.mul(&x).unwrap().detach();
        let loss = d.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        // Only the direct factor contributes: d(4*x)/dx = 4.
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn fd_check_individual_ops() {
        let mut r = rng::stream(99, &[7]);
        let cases: Vec<(&str, Box<dyn Fn(&[Tensor]) -> Tensor>)> = vec![
            ("exp", Box::new(|ls: &[Tensor]| ls[0].exp().sum())),
            ("log", Box::new(|ls: &[Tensor]| ls[0].abs().add_scalar(1.0).log().sum())),
            ("gelu", Box::new(|ls: &[Tensor]| ls[0].gelu().sum())),
            ("softplus", Box::new(|ls: &[Tensor]| ls[0].softplus().sum())),
            ("sigmoid", Box::new(|ls: &[Tensor]| ls[0].sigmoid().sum())),
            ("tanh", Box::new(|ls: &[Tensor]| ls[0].tanh().sum())),
            ("pow2", Box::new(|ls: &[Tensor]| ls[0].powf(2.0).sum())),
            ("softmax", Box::new(|ls: &[Tensor]| {
                let s = ls[0].reshape(vec![2, 3]).unwrap().softmax_axis(1).unwrap();
                s.mul(&s).unwrap().sum()
            })),
            ("mean_axis", Box::new(|ls: &[Tensor]| {
                ls[0].reshape(vec![2, 3]).unwrap().mean_axis(0).unwrap().powf(2.0).sum()
            })),
            ("div", Box::new(|ls: &[Tensor]| {
                let d = ls[0].abs().add_scalar(2.0);
                ls[0].div(&d).unwrap().sum()
            })),
        ];
        for (name, build) in cases {
            let data: Vec<f64> = (0..6).map(|_| r.random_range(0.3..1.5)).collect();
            let leaf = Tensor::param_from_vec(vec![6], data).unwrap();
            let err = finite_difference_check(build.as_ref(), &[leaf], 1e-4);
            assert!(err < 1e-3, "{name}: fd error {err}");
        }
    }

    #[test]
    fn fd_check_abs_away_from_kink() {
        let leaf = t1(&[0.5, -0.75, 1.25]);
        let err = finite_difference_check(|ls| ls[0].abs().sum(), &[leaf], 1e-4);
        assert!(err < 1e-3, "abs fd error {err}");
    }

    #[test]
    fn fd_check_matmul_concat_slice_graph() {
        let mut r = rng::stream(4242, &[0]);
        let a = Tensor::randn(vec![3, 4], 0.5, &mut r);
        let b = Tensor::randn(vec![4, 2], 0.5, &mut r);
        let c = Tensor::randn(vec![3, 2], 0.5, &mut r);
        let build = |ls: &[Tensor]| {
            let prod = ls[0].matmul(&ls[1]).unwrap();
            let joined = concat(&[&prod, &ls[2]], 1).unwrap();
            let sliced = joined.slice_axis(1, 1, 3).unwrap();
            sliced.transpose().unwrap().gelu().mean()
        };
        let err = finite_difference_check(build, &[a, b, c], 1e-4);
        assert!(err < 1e-3, "fd error {err}");
    }

    /// 100 random graphs composed of the smooth op set; autodiff gradients
    /// must match central finite differences.
    #[test]
    fn fd_check_random_graphs() {
        for trial in 0..100u64 {
            let mut r = rng::stream(0xF00D, &[trial]);
            let n_ops = r.random_range(3..9);
            let op_codes: Vec<u8> = (0..n_ops).map(|_| r.random_range(0..12u8)).collect();
            let leaf_a = Tensor::randn(vec![2, 3], 0.6, &mut r);
            let leaf_b = Tensor::randn(vec![2, 3], 0.6, &mut r);
            let leaf_c = Tensor::randn(vec![3, 3], 0.6, &mut r);
            let codes = op_codes.clone();
            let build = move |ls: &[Tensor]| {
                let mut cur = ls[0].clone();
                for &code in &codes {
                    cur = match code {
                        0 => cur.add(&ls[1]).unwrap(),
                        1 => cur.sub(&ls[1]).unwrap(),
                        2 => cur.mul(&ls[1]).unwrap(),
                        3 => cur.matmul(&ls[2]).unwrap(),
                        4 => cur.gelu(),
                        5 => cur.softplus(),
                        6 => cur.sigmoid(),
                        7 => cur.tanh(),
                        8 => cur.softmax_axis(1).unwrap(),
                        9 => cur.scale(0.7).add_scalar(0.1),
                        10 => cur.mul(&cur).unwrap(),
                        11 => {
                            let d = ls[1].mul(&ls[1]).unwrap().add_scalar(1.5);
                            cur.div(&d).unwrap()
                        }
                        _ => unreachable!(),
                    };
                }
                cur.mean()
            };
            let leaves = vec![leaf_a, leaf_b, leaf_c];
            let err = finite_difference_check(&build, &leaves, 1e-4);
            assert!(err < 1e-3, "trial {trial} (ops {op_codes:?}): fd error {err}");
        }
    }

    #[test]
    fn forward_values_are_deterministic() {
        let mk = || {
            let mut r = rng::stream(31, &[2]);
            let a = Tensor::randn(vec![4, 4], 1.0, &mut r);
            let b = Tensor::randn(vec![4, 4], 1.0, &mut r);
            a.matmul(&b).unwrap().gelu().softmax_axis(1).unwrap().values()
        };
        assert_eq!(mk(), mk());
    }
}
