//! Minimal reverse-mode autodiff over dynamically shaped `ndarray` tensors.
//!
//! The model here is small enough (a handful of convolution stages, a few
//! attention vectors) that a define-by-run tape with hand-written backward
//! rules beats pulling in a full deep-learning framework: shapes stay
//! dynamic, f32/f64 are interchangeable through the [`Scalar`] trait, and
//! single-threaded evaluation is bit-reproducible.
//!
//! Usage pattern: create a [`Tape`], insert parameters and inputs as leaves,
//! compose ops (all methods on `Tape`), call [`Tape::backward`] on a scalar
//! loss, then read leaf gradients out of [`Gradients`]. Parameters live
//! outside the tape and are re-bound per forward pass.

mod conv;

pub use conv::PadMode;

use std::cell::{Ref, RefCell};

use ndarray::{ArrayD, Axis, IxDyn};

/// Element type of the engine: f32 for training, f64 for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lossy construction of a scalar from f64.
pub fn fl<F: Scalar>(x: f64) -> F {
    F::from(x).expect("finite f64 converts to Scalar")
}

/// Cast an array between scalar types.
pub fn cast<A: Scalar, B: Scalar>(a: &ArrayD<A>) -> ArrayD<B> {
    a.mapv(|v| B::from(v).expect("scalar cast"))
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<F> = Box<dyn Fn(&[ArrayD<F>], &ArrayD<F>, &mut GradSink<'_, F>)>;

/// Accumulates gradient contributions flowing to parent nodes.
pub struct GradSink<'a, F: Scalar> {
    grads: &'a mut [Option<ArrayD<F>>],
}

impl<F: Scalar> GradSink<'_, F> {
    pub fn add(&mut self, id: usize, contribution: ArrayD<F>) {
        match &mut self.grads[id] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

struct Inner<F: Scalar> {
    values: Vec<ArrayD<F>>,
    backs: Vec<Option<BackFn<F>>>,
}

/// A recording of one forward pass.
pub struct Tape<F: Scalar> {
    inner: RefCell<Inner<F>>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<F: Scalar> {
    by_id: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to a leaf, zeros if the leaf never
    /// influenced the loss.
    pub fn get(&self, v: Var, shape: &[usize]) -> ArrayD<F> {
        match &self.by_id[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn take(&mut self, v: Var, shape: &[usize]) -> ArrayD<F> {
        match self.by_id[v.0].take() {
            Some(g) => g,
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                backs: Vec::new(),
            }),
        }
    }

    pub(crate) fn push(&self, value: ArrayD<F>, back: Option<BackFn<F>>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.backs.push(back);
        Var(inner.values.len() - 1)
    }

    /// Insert a differentiable leaf (parameter or input).
    pub fn leaf(&self, value: ArrayD<F>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> Ref<'_, ArrayD<F>> {
        Ref::map(self.inner.borrow(), |inner| &inner.values[v.0])
    }

    pub fn value_owned(&self, v: Var) -> ArrayD<F> {
        self.inner.borrow().values[v.0].clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().values[v.0].shape().to_vec()
    }

    /// Value of a 0-dim (scalar) node.
    pub fn scalar(&self, v: Var) -> F {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.values[v.0].len(), 1);
        inner.values[v.0].iter().copied().next().unwrap()
    }

    /// Reverse sweep from a scalar root. Gradients for leaves are retained;
    /// interior gradients are freed as soon as they have been propagated.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let mut inner = self.inner.borrow_mut();
        let n = inner.values.len();
        assert_eq!(
            inner.values[root.0].len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(inner.values[root.0].raw_dim()));
        let mut leaves: Vec<Option<ArrayD<F>>> = (0..n).map(|_| None).collect();
        let Inner { values, backs } = &mut *inner;
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &backs[id] {
                Some(back) => {
                    let mut sink = GradSink { grads: &mut grads };
                    back(values, &g, &mut sink);
                }
                None => leaves[id] = Some(g),
            }
        }
        Gradients { by_id: leaves }
    }

    // ---- elementwise binary ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            debug_assert_eq!(inner.values[a.0].shape(), inner.values[b.0].shape());
            &inner.values[a.0] + &inner.values[b.0]
        };
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                sink.add(a.0, g.clone());
                sink.add(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            debug_assert_eq!(inner.values[a.0].shape(), inner.values[b.0].shape());
            &inner.values[a.0] - &inner.values[b.0]
        };
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                sink.add(a.0, g.clone());
                sink.add(b.0, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            debug_assert_eq!(inner.values[a.0].shape(), inner.values[b.0].shape());
            &inner.values[a.0] * &inner.values[b.0]
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                sink.add(a.0, g * &vals[b.0]);
                sink.add(b.0, g * &vals[a.0]);
            })),
        )
    }

    /// Elementwise product with a non-differentiable constant (masks,
    /// indicator weights).
    pub fn mul_const(&self, a: Var, c: ArrayD<F>) -> Var {
        let out = {
            let inner = self.inner.borrow();
            debug_assert_eq!(inner.values[a.0].shape(), c.shape());
            &inner.values[a.0] * &c
        };
        self.push(
            out,
            Some(Box::new(move |_, g, sink| sink.add(a.0, g * &c))),
        )
    }

    // ---- elementwise with plain scalars ----

    pub fn add_scalar(&self, a: Var, s: F) -> Var {
        let out = self.inner.borrow().values[a.0].mapv(|x| x + s);
        self.push(out, Some(Box::new(move |_, g, sink| sink.add(a.0, g.clone()))))
    }

    pub fn mul_scalar(&self, a: Var, s: F) -> Var {
        let out = self.inner.borrow().values[a.0].mapv(|x| x * s);
        self.push(out, Some(Box::new(move |_, g, sink| sink.add(a.0, g * s))))
    }

    /// Multiply a tensor by a 0-dim tape scalar (both differentiable).
    pub fn scale_by(&self, a: Var, s: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            debug_assert_eq!(inner.values[s.0].len(), 1);
            let sv = inner.values[s.0].iter().copied().next().unwrap();
            inner.values[a.0].mapv(|x| x * sv)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let sv = vals[s.0].iter().copied().next().unwrap();
                sink.add(a.0, g * sv);
                let dot = (g * &vals[a.0]).sum();
                sink.add(s.0, ndarray::arr0(dot).into_dyn());
            })),
        )
    }

    // ---- elementwise unary ----

    pub fn relu(&self, a: Var) -> Var {
        let out = self.inner.borrow().values[a.0].mapv(|x| x.max(F::zero()));
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let mut gx = g.clone();
                gx.zip_mut_with(&vals[a.0], |gv, &x| {
                    if x <= F::zero() {
                        *gv = F::zero();
                    }
                });
                sink.add(a.0, gx);
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.inner.borrow().values[a.0]
            .mapv(|x| F::one() / (F::one() + (-x).exp()));
        let id = self.push(out, None);
        self.set_back(
            id,
            Box::new(move |vals, g, sink| {
                let y = &vals[id.0];
                sink.add(a.0, g * &y.mapv(|v| v * (F::one() - v)));
            }),
        );
        id
    }

    pub fn ln(&self, a: Var) -> Var {
        let out = self.inner.borrow().values[a.0].mapv(|x| x.ln());
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                sink.add(a.0, g / &vals[a.0]);
            })),
        )
    }

    /// Clamp to [lo, hi]; gradient passes only through the interior.
    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Var {
        let out = self.inner.borrow().values[a.0].mapv(|x| x.max(lo).min(hi));
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let mut gx = g.clone();
                gx.zip_mut_with(&vals[a.0], |gv, &x| {
                    if x <= lo || x >= hi {
                        *gv = F::zero();
                    }
                });
                sink.add(a.0, gx);
            })),
        )
    }

    /// y = (x + eps)^(-1/2); used for normalization denominators.
    pub fn rsqrt_eps(&self, a: Var, eps: F) -> Var {
        let out = self.inner.borrow().values[a.0]
            .mapv(|x| F::one() / (x + eps).sqrt());
        let id = self.push(out, None);
        self.set_back(
            id,
            Box::new(move |vals, g, sink| {
                let y = &vals[id.0];
                let half = fl::<F>(0.5);
                sink.add(a.0, g * &y.mapv(|v| -half * v * v * v));
            }),
        );
        id
    }

    // ---- reductions and broadcasts ----

    pub fn sum_all(&self, a: Var) -> Var {
        let out = ndarray::arr0(self.inner.borrow().values[a.0].sum()).into_dyn();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let gv = g.iter().copied().next().unwrap();
                sink.add(a.0, ArrayD::from_elem(vals[a.0].raw_dim(), gv));
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.inner.borrow().values[a.0].len();
        let s = self.sum_all(a);
        self.mul_scalar(s, F::one() / fl::<F>(n as f64))
    }

    /// Sum over the spatial axes of a [C, H, W] tensor, yielding [C].
    pub fn spatial_sum(&self, a: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            debug_assert_eq!(v.ndim(), 3);
            v.sum_axis(Axis(2)).sum_axis(Axis(1)).into_dyn()
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let shape = vals[a.0].shape().to_vec();
                let mut gx = ArrayD::zeros(IxDyn(&shape));
                for c in 0..shape[0] {
                    let gc = g[[c]];
                    gx.index_axis_mut(Axis(0), c).fill(gc);
                }
                sink.add(a.0, gx);
            })),
        )
    }

    pub fn spatial_mean(&self, a: Var) -> Var {
        let (h, w) = {
            let inner = self.inner.borrow();
            let s = inner.values[a.0].shape();
            (s[1], s[2])
        };
        let s = self.spatial_sum(a);
        self.mul_scalar(s, F::one() / fl::<F>((h * w) as f64))
    }

    /// Broadcast a [C] vector to [C, H, W].
    pub fn broadcast_spatial(&self, a: Var, h: usize, w: usize) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            debug_assert_eq!(v.ndim(), 1);
            let c = v.len();
            let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
            for (ci, &x) in v.iter().enumerate() {
                out.index_axis_mut(Axis(0), ci).fill(x);
            }
            out
        };
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                let gsum = g.sum_axis(Axis(2)).sum_axis(Axis(1)).into_dyn();
                sink.add(a.0, gsum);
            })),
        )
    }

    /// Per-channel scale of [C, H, W] by a [C] vector.
    pub fn mul_chan(&self, a: Var, s: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            let sv = &inner.values[s.0];
            debug_assert_eq!(v.shape()[0], sv.len());
            let mut out = v.clone();
            for (ci, &x) in sv.iter().enumerate() {
                out.index_axis_mut(Axis(0), ci).mapv_inplace(|y| y * x);
            }
            out
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let sv = &vals[s.0];
                let mut gx = g.clone();
                for (ci, &x) in sv.iter().enumerate() {
                    gx.index_axis_mut(Axis(0), ci).mapv_inplace(|y| y * x);
                }
                sink.add(a.0, gx);
                let prod = g * &vals[a.0];
                sink.add(s.0, prod.sum_axis(Axis(2)).sum_axis(Axis(1)).into_dyn());
            })),
        )
    }

    /// Per-channel shift of [C, H, W] by a [C] vector.
    pub fn add_chan(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            let bv = &inner.values[b.0];
            debug_assert_eq!(v.shape()[0], bv.len());
            let mut out = v.clone();
            for (ci, &x) in bv.iter().enumerate() {
                out.index_axis_mut(Axis(0), ci).mapv_inplace(|y| y + x);
            }
            out
        };
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                sink.add(a.0, g.clone());
                sink.add(b.0, g.sum_axis(Axis(2)).sum_axis(Axis(1)).into_dyn());
            })),
        )
    }

    /// Concatenate [C_i, H, W] tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (out, sizes) = {
            let inner = self.inner.borrow();
            let views: Vec<_> = parts.iter().map(|p| inner.values[p.0].view()).collect();
            let sizes: Vec<usize> = views.iter().map(|v| v.shape()[0]).collect();
            let out = ndarray::concatenate(Axis(0), &views).expect("channel concat");
            (out, sizes)
        };
        let parts = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                let mut offset = 0;
                for (p, &c) in parts.iter().zip(&sizes) {
                    let slice = g
                        .slice_axis(Axis(0), ndarray::Slice::from(offset..offset + c))
                        .to_owned();
                    sink.add(p.0, slice);
                    offset += c;
                }
            })),
        )
    }

    /// Concatenate two 1-d vectors.
    pub fn concat_vec(&self, a: Var, b: Var) -> Var {
        let (out, na) = {
            let inner = self.inner.borrow();
            let av = &inner.values[a.0];
            let bv = &inner.values[b.0];
            debug_assert_eq!(av.ndim(), 1);
            debug_assert_eq!(bv.ndim(), 1);
            let mut v = Vec::with_capacity(av.len() + bv.len());
            v.extend(av.iter().copied());
            v.extend(bv.iter().copied());
            let na = av.len();
            (ArrayD::from_shape_vec(IxDyn(&[v.len()]), v).unwrap(), na)
        };
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                let flat = g.as_slice().expect("contiguous grad");
                sink.add(
                    a.0,
                    ArrayD::from_shape_vec(IxDyn(&[na]), flat[..na].to_vec()).unwrap(),
                );
                sink.add(
                    b.0,
                    ArrayD::from_shape_vec(IxDyn(&[flat.len() - na]), flat[na..].to_vec())
                        .unwrap(),
                );
            })),
        )
    }

    /// View an [H, W] map as [1, H, W].
    pub fn unsqueeze0(&self, a: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            debug_assert_eq!(v.ndim(), 2);
            let (h, w) = (v.shape()[0], v.shape()[1]);
            v.clone().into_shape_with_order(IxDyn(&[1, h, w])).unwrap()
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let shape = vals[a.0].shape().to_vec();
                sink.add(
                    a.0,
                    g.clone().into_shape_with_order(IxDyn(&shape)).unwrap(),
                );
            })),
        )
    }

    /// View a [1, H, W] map as [H, W].
    pub fn squeeze0(&self, a: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let v = &inner.values[a.0];
            debug_assert_eq!(v.ndim(), 3);
            debug_assert_eq!(v.shape()[0], 1);
            let (h, w) = (v.shape()[1], v.shape()[2]);
            v.clone().into_shape_with_order(IxDyn(&[h, w])).unwrap()
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let shape = vals[a.0].shape().to_vec();
                sink.add(
                    a.0,
                    g.clone().into_shape_with_order(IxDyn(&shape)).unwrap(),
                );
            })),
        )
    }

    /// Fully connected layer on a vector: y = W x + b with W: [M, N].
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let xv = inner.values[x.0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let wv = inner.values[w.0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let bv = inner.values[b.0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
            (wv.dot(&xv) + &bv).into_dyn()
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let xv = vals[x.0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let wv = vals[w.0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let (m, n) = wv.dim();
                let mut gw = ndarray::Array2::<F>::zeros((m, n));
                for i in 0..m {
                    for j in 0..n {
                        gw[[i, j]] = gv[i] * xv[j];
                    }
                }
                sink.add(w.0, gw.into_dyn());
                sink.add(x.0, wv.t().dot(&gv).into_dyn());
                sink.add(b.0, g.clone());
            })),
        )
    }

    /// Cosine similarity between every cell of a [C, H, W] feature map and a
    /// [C] vector, yielding [H, W]. A zero-norm feature cell or a zero-norm
    /// vector produces similarity 0 with zero gradient at that site.
    pub fn cosine_map(&self, feat: Var, vec: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let f = &inner.values[feat.0];
            let v = &inner.values[vec.0];
            debug_assert_eq!(f.ndim(), 3);
            debug_assert_eq!(f.shape()[0], v.len());
            cosine_forward(f, v)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let f = &vals[feat.0];
                let v = &vals[vec.0];
                let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
                let nv = v.iter().fold(F::zero(), |acc, &x| acc + x * x).sqrt();
                let mut gf = ArrayD::<F>::zeros(f.raw_dim());
                let mut gv = ArrayD::<F>::zeros(v.raw_dim());
                if nv == F::zero() {
                    sink.add(feat.0, gf);
                    sink.add(vec.0, gv);
                    return;
                }
                for y in 0..h {
                    for x in 0..w {
                        let mut dot = F::zero();
                        let mut nf2 = F::zero();
                        for ci in 0..c {
                            let fv = f[[ci, y, x]];
                            dot += fv * v[[ci]];
                            nf2 += fv * fv;
                        }
                        let nf = nf2.sqrt();
                        if nf == F::zero() {
                            continue;
                        }
                        let s = dot / (nf * nv);
                        let gc = g[[y, x]];
                        for ci in 0..c {
                            let fv = f[[ci, y, x]];
                            gf[[ci, y, x]] +=
                                gc * (v[[ci]] / (nf * nv) - s * fv / nf2);
                            gv[[ci]] += gc * (fv / (nf * nv) - s * v[[ci]] / (nv * nv));
                        }
                    }
                }
                sink.add(feat.0, gf);
                sink.add(vec.0, gv);
            })),
        )
    }

    fn set_back(&self, v: Var, back: BackFn<F>) {
        self.inner.borrow_mut().backs[v.0] = Some(back);
    }
}

fn cosine_forward<F: Scalar>(f: &ArrayD<F>, v: &ArrayD<F>) -> ArrayD<F> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let nv = v.iter().fold(F::zero(), |acc, &x| acc + x * x).sqrt();
    let mut out = ArrayD::<F>::zeros(IxDyn(&[h, w]));
    if nv == F::zero() {
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            let mut dot = F::zero();
            let mut nf2 = F::zero();
            for ci in 0..c {
                let fv = f[[ci, y, x]];
                dot += fv * v[[ci]];
                nf2 += fv * fv;
            }
            let nf = nf2.sqrt();
            if nf > F::zero() {
                out[[y, x]] = dot / (nf * nv);
            }
        }
    }
    out
}

/// A set of named parameter arrays with a stable flattening order.
///
/// The order of `for_each` / `for_each_mut` visits defines the layout used
/// by the optimizer, the checkpoint format, and finite-difference probes.
pub trait ParamSet<F: Scalar> {
    fn for_each(&self, f: &mut dyn FnMut(&str, &ArrayD<F>));
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<F>));

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, a| n += a.len());
        n
    }

    fn clone_arrays(&self) -> Vec<ArrayD<F>> {
        let mut out = Vec::new();
        self.for_each(&mut |_, a| out.push(a.clone()));
        out
    }

    /// Add `delta` to the i-th scalar in flattening order.
    fn nudge(&mut self, index: usize, delta: F) {
        let mut seen = 0;
        self.for_each_mut(&mut |_, a| {
            if index >= seen && index < seen + a.len() {
                let flat = a.as_slice_mut().expect("contiguous param array");
                flat[index - seen] += delta;
            }
            seen += a.len();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use ndarray::{arr0, ArrayD, IxDyn};
    use rand::Rng;

    fn randd(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::rng_from(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Finite-difference check of a single-input op.
    fn check_unary(
        shape: &[usize],
        seed: u64,
        build: impl Fn(&Tape<f64>, Var) -> Var,
    ) {
        let x0 = randd(shape, seed);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&tape, x);
        let loss = tape.mean_all(y);
        let mut grads = tape.backward(loss);
        let analytic = grads.take(x, shape);

        let fd = gradcheck::central_diff(&x0, 1e-6, |arr| {
            let t = Tape::new();
            let v = t.leaf(arr.clone());
            let y = build(&t, v);
            let l = t.mean_all(y);
            t.scalar(l)
        });
        let err = gradcheck::max_relative_error(&analytic, &fd);
        assert!(err < 1e-6, "unary op grad mismatch: {err}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check_unary(&[3, 4], 1, |t, x| t.relu(t.add_scalar(x, 0.3)));
        check_unary(&[3, 4], 2, |t, x| t.sigmoid(x));
        check_unary(&[5], 3, |t, x| t.ln(t.add_scalar(x, 2.0)));
        check_unary(&[5], 4, |t, x| t.clamp(x, -0.5, 0.5));
        check_unary(&[5], 5, |t, x| t.rsqrt_eps(t.relu(x), 0.1));
        check_unary(&[2, 3, 4], 6, |t, x| t.spatial_mean(x));
        check_unary(&[4], 7, |t, x| t.broadcast_spatial(x, 3, 2));
        check_unary(&[3, 2, 2], 8, |t, x| {
            let m = randd(&[3, 2, 2], 99);
            t.mul_const(x, m)
        });
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let a0 = randd(&[3, 3], 10);
        let b0 = randd(&[3, 3], 11);
        for mode in 0..3 {
            let run = |av: &ArrayD<f64>, bv: &ArrayD<f64>| {
                let t = Tape::<f64>::new();
                let a = t.leaf(av.clone());
                let b = t.leaf(bv.clone());
                let y = match mode {
                    0 => t.add(a, b),
                    1 => t.sub(a, b),
                    _ => t.mul(a, b),
                };
                let l = t.mean_all(y);
                (t.scalar(l), t, a, b, l)
            };
            let (_, tape, a, b, l) = run(&a0, &b0);
            let mut grads = tape.backward(l);
            let ga = grads.take(a, &[3, 3]);
            let gb = grads.take(b, &[3, 3]);
            let fa = gradcheck::central_diff(&a0, 1e-6, |arr| run(arr, &b0).0);
            let fb = gradcheck::central_diff(&b0, 1e-6, |arr| run(&a0, arr).0);
            assert!(gradcheck::max_relative_error(&ga, &fa) < 1e-6);
            assert!(gradcheck::max_relative_error(&gb, &fb) < 1e-6);
        }
    }

    #[test]
    fn channel_ops_match_finite_differences() {
        let x0 = randd(&[3, 4, 2], 20);
        let s0 = randd(&[3], 21);
        let run = |xv: &ArrayD<f64>, sv: &ArrayD<f64>, mode: usize| {
            let t = Tape::<f64>::new();
            let x = t.leaf(xv.clone());
            let s = t.leaf(sv.clone());
            let y = match mode {
                0 => t.mul_chan(x, s),
                _ => t.add_chan(x, s),
            };
            let l = t.mean_all(y);
            (t.scalar(l), t, x, s, l)
        };
        for mode in 0..2 {
            let (_, tape, x, s, l) = run(&x0, &s0, mode);
            let mut grads = tape.backward(l);
            let gx = grads.take(x, &[3, 4, 2]);
            let gs = grads.take(s, &[3]);
            let fx = gradcheck::central_diff(&x0, 1e-6, |a| run(a, &s0, mode).0);
            let fs = gradcheck::central_diff(&s0, 1e-6, |a| run(&x0, a, mode).0);
            assert!(gradcheck::max_relative_error(&gx, &fx) < 1e-6);
            assert!(gradcheck::max_relative_error(&gs, &fs) < 1e-6);
        }
    }

    #[test]
    fn affine_and_scale_match_finite_differences() {
        let x0 = randd(&[4], 30);
        let w0 = randd(&[3, 4], 31);
        let b0 = randd(&[3], 32);
        let run = |xv: &ArrayD<f64>, wv: &ArrayD<f64>, bv: &ArrayD<f64>| {
            let t = Tape::<f64>::new();
            let x = t.leaf(xv.clone());
            let w = t.leaf(wv.clone());
            let b = t.leaf(bv.clone());
            let y = t.affine(x, w, b);
            let l = t.mean_all(y);
            (t.scalar(l), t, [x, w, b], l)
        };
        let (_, tape, vars, l) = run(&x0, &w0, &b0);
        let mut grads = tape.backward(l);
        let shapes: [&[usize]; 3] = [&[4], &[3, 4], &[3]];
        let analytic: Vec<_> = vars
            .iter()
            .zip(shapes)
            .map(|(v, s)| grads.take(*v, s))
            .collect();
        let fx = gradcheck::central_diff(&x0, 1e-6, |a| run(a, &w0, &b0).0);
        let fw = gradcheck::central_diff(&w0, 1e-6, |a| run(&x0, a, &b0).0);
        let fb = gradcheck::central_diff(&b0, 1e-6, |a| run(&x0, &w0, a).0);
        assert!(gradcheck::max_relative_error(&analytic[0], &fx) < 1e-6);
        assert!(gradcheck::max_relative_error(&analytic[1], &fw) < 1e-6);
        assert!(gradcheck::max_relative_error(&analytic[2], &fb) < 1e-6);

        // scale_by: tensor times learnable scalar
        let s0 = arr0(0.37).into_dyn();
        let run2 = |xv: &ArrayD<f64>, sv: &ArrayD<f64>| {
            let t = Tape::<f64>::new();
            let x = t.leaf(xv.clone());
            let s = t.leaf(sv.clone());
            let y = t.scale_by(x, s);
            let l = t.mean_all(y);
            (t.scalar(l), t, x, s, l)
        };
        let (_, tape, x, s, l) = run2(&x0, &s0);
        let mut grads = tape.backward(l);
        let gx = grads.take(x, &[4]);
        let gs = grads.take(s, &[]);
        let fx = gradcheck::central_diff(&x0, 1e-6, |a| run2(a, &s0).0);
        let fs = gradcheck::central_diff(&s0, 1e-6, |a| run2(&x0, a).0);
        assert!(gradcheck::max_relative_error(&gx, &fx) < 1e-6);
        assert!(gradcheck::max_relative_error(&gs, &fs) < 1e-6);
    }

    #[test]
    fn concat_and_cosine_match_finite_differences() {
        let a0 = randd(&[2, 3, 3], 40);
        let b0 = randd(&[3, 3, 3], 41);
        let run = |av: &ArrayD<f64>, bv: &ArrayD<f64>| {
            let t = Tape::<f64>::new();
            let a = t.leaf(av.clone());
            let b = t.leaf(bv.clone());
            let y = t.concat_channels(&[a, b]);
            let l = t.mean_all(t.mul(y, y));
            (t.scalar(l), t, a, b, l)
        };
        let (_, tape, a, b, l) = run(&a0, &b0);
        let mut grads = tape.backward(l);
        let ga = grads.take(a, &[2, 3, 3]);
        let gb = grads.take(b, &[3, 3, 3]);
        let fa = gradcheck::central_diff(&a0, 1e-6, |x| run(x, &b0).0);
        let fb = gradcheck::central_diff(&b0, 1e-6, |x| run(&a0, x).0);
        assert!(gradcheck::max_relative_error(&ga, &fa) < 1e-6);
        assert!(gradcheck::max_relative_error(&gb, &fb) < 1e-6);

        let f0 = randd(&[3, 4, 4], 42).mapv(|v| v + 0.1);
        let v0 = randd(&[3], 43).mapv(|v| v + 0.2);
        let run2 = |fv: &ArrayD<f64>, vv: &ArrayD<f64>| {
            let t = Tape::<f64>::new();
            let f = t.leaf(fv.clone());
            let v = t.leaf(vv.clone());
            let y = t.cosine_map(f, v);
            let l = t.mean_all(y);
            (t.scalar(l), t, f, v, l)
        };
        let (_, tape, f, v, l) = run2(&f0, &v0);
        let mut grads = tape.backward(l);
        let gf = grads.take(f, &[3, 4, 4]);
        let gv = grads.take(v, &[3]);
        let ff = gradcheck::central_diff(&f0, 1e-6, |x| run2(x, &v0).0);
        let fv = gradcheck::central_diff(&v0, 1e-6, |x| run2(&f0, x).0);
        assert!(gradcheck::max_relative_error(&gf, &ff) < 1e-5);
        assert!(gradcheck::max_relative_error(&gv, &fv) < 1e-5);
    }

    #[test]
    fn cosine_map_zero_norm_convention() {
        let t = Tape::<f64>::new();
        let f = t.leaf(ArrayD::zeros(IxDyn(&[3, 2, 2])));
        let v = t.leaf(ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let y = t.cosine_map(f, v);
        assert!(t.value(y).iter().all(|&s| s == 0.0));
        let v0 = t.leaf(ArrayD::zeros(IxDyn(&[3])));
        let f1 = t.leaf(ArrayD::from_elem(IxDyn(&[3, 2, 2]), 1.0));
        let y2 = t.cosine_map(f1, v0);
        assert!(t.value(y2).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        // y = x*x + x: dy/dx = 2x + 1
        let t = Tape::<f64>::new();
        let x = t.leaf(arr0(3.0).into_dyn());
        let y = t.add(t.mul(x, x), x);
        let mut grads = t.backward(y);
        let g = grads.take(x, &[]);
        assert!((g[[]] - 7.0).abs() < 1e-12);
    }
}
