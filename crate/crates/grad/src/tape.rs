//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass in execution order.
//! Each node stores its forward value plus, per parent, a closure that maps
//! the upstream gradient to that parent's gradient contribution. Backward
//! visits nodes in exact reverse execution order and accumulates gradients
//! additively across fan-out.
//!
//! Conventions baked in here:
//! - everything is f64;
//! - shape errors panic with a message naming both shapes;
//! - max/min (axis and segment variants) route the gradient to the first
//!   element attaining the extremum;
//! - std is the population standard deviation; its backward uses
//!   `sqrt(var + STD_EPS)` in the denominator so the gradient is exactly
//!   zero at zero variance;
//! - a tape is confined to one thread; independent tapes may run
//!   concurrently.

use crate::tensor::Tensor;
use std::cell::RefCell;
use std::rc::Rc;

/// Epsilon added under the square root in std backward rules.
pub const STD_EPS: f64 = 1e-8;
/// Epsilon inside layer normalization's variance term.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Epsilon added to the squared modulus when normalizing rotation pairs.
pub const ROTATE_EPS: f64 = 1e-8;

type GradFn = Box<dyn Fn(&Tensor) -> Tensor>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<(usize, GradFn)>,
}

/// Records a forward computation for later reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Reduction kinds shared by axis and segment reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
    Min,
    Std,
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or a zero tensor of its shape when the loss does
    /// not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros_like(&var.value()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf value. Leaves have no parents; gradients flow into
    /// them but not past them.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new())
    }

    /// Alias for [`Tape::var`] used for values that are data rather than
    /// parameters; the tape treats them identically.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.var(value)
    }

    fn push(&self, value: Tensor, parents: Vec<(usize, GradFn)>) -> Var<'_> {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced on tape (shape {:?})",
            value.shape()
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Runs the backward pass from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(
            std::ptr::eq(root.tape, self),
            "backward root belongs to a different tape"
        );
        let nodes = self.nodes.borrow();
        assert!(
            nodes[root.id].value.len() == 1,
            "backward requires a scalar root, got shape {:?}",
            nodes[root.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut seed = Tensor::zeros_like(&nodes[root.id].value);
        seed.data_mut()[0] = 1.0;
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            for (parent, f) in &nodes[id].parents {
                let contribution = f(&grad);
                match &mut grads[*parent] {
                    Some(existing) => existing.accumulate(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

fn same_tape<'t>(a: Var<'t>, b: Var<'t>) {
    assert!(
        std::ptr::eq(a.tape, b.tape),
        "variables come from different tapes"
    );
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    // -- elementwise binary ------------------------------------------------
    // method forms are kept alongside the operator impls below so chained
    // expressions read left to right

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        same_tape(self, other);
        let a = self.value();
        let b = other.value();
        assert!(
            a.shape() == b.shape(),
            "shape mismatch in add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape.push(
            out,
            vec![
                (self.id, Box::new(|g: &Tensor| g.clone())),
                (other.id, Box::new(|g: &Tensor| g.clone())),
            ],
        )
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        same_tape(self, other);
        let a = self.value();
        let b = other.value();
        assert!(
            a.shape() == b.shape(),
            "shape mismatch in sub: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.push(
            out,
            vec![
                (self.id, Box::new(|g: &Tensor| g.clone())),
                (other.id, Box::new(|g: &Tensor| g.map(|v| -v))),
            ],
        )
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        same_tape(self, other);
        let a = self.value();
        let b = other.value();
        assert!(
            a.shape() == b.shape(),
            "shape mismatch in mul: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let out = a.zip_map(&b, |x, y| x * y);
        let a2 = Rc::clone(&a);
        let b2 = Rc::clone(&b);
        self.tape.push(
            out,
            vec![
                (self.id, Box::new(move |g: &Tensor| g.zip_map(&b2, |g, y| g * y))),
                (other.id, Box::new(move |g: &Tensor| g.zip_map(&a2, |g, x| g * x))),
            ],
        )
    }

    // -- elementwise unary -------------------------------------------------

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Var<'t> {
        let out = self.value().map(|v| -v);
        self.tape
            .push(out, vec![(self.id, Box::new(|g: &Tensor| g.map(|v| -v)))])
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.tape
            .push(out, vec![(self.id, Box::new(move |g: &Tensor| g.map(|v| v * c)))])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.tape
            .push(out, vec![(self.id, Box::new(|g: &Tensor| g.clone()))])
    }

    pub fn cos(self) -> Var<'t> {
        let a = self.value();
        let out = a.map(f64::cos);
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| g.zip_map(&a, |g, x| -g * x.sin())),
            )],
        )
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        let out = a.map(|v| v.max(0.0));
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| g.zip_map(&a, |g, x| if x > 0.0 { g } else { 0.0 })),
            )],
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let s = Rc::new(out.clone());
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| g.zip_map(&s, |g, s| g * s * (1.0 - s))),
            )],
        )
    }

    pub fn log(self) -> Var<'t> {
        let a = self.value();
        let out = a.map(f64::ln);
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| g.zip_map(&a, |g, x| g / x)),
            )],
        )
    }

    pub fn sqrt(self) -> Var<'t> {
        let a = self.value();
        let out = a.map(f64::sqrt);
        let s = Rc::new(out.clone());
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| g.zip_map(&s, |g, s| g / (2.0 * s))),
            )],
        )
    }

    /// Clamp to `[lo, hi]`; the gradient passes only where the input was
    /// strictly inside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        assert!(lo < hi, "clamp bounds out of order: {} >= {}", lo, hi);
        let a = self.value();
        let out = a.map(|v| v.clamp(lo, hi));
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    g.zip_map(&a, |g, x| if x > lo && x < hi { g } else { 0.0 })
                }),
            )],
        )
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        same_tape(self, other);
        let a = self.value();
        let b = other.value();
        let out = a.matmul2(&b);
        let a2 = Rc::clone(&a);
        let b2 = Rc::clone(&b);
        self.tape.push(
            out,
            vec![
                (
                    self.id,
                    Box::new(move |g: &Tensor| g.matmul2(&b2.transpose2())),
                ),
                (
                    other.id,
                    Box::new(move |g: &Tensor| a2.transpose2().matmul2(g)),
                ),
            ],
        )
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.value().transpose2();
        self.tape.push(
            out,
            vec![(self.id, Box::new(|g: &Tensor| g.transpose2()))],
        )
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        let a = self.value();
        let expect: usize = shape.iter().product();
        assert!(
            expect == a.len(),
            "shape mismatch in reshape: {:?} vs {:?}",
            a.shape(),
            shape
        );
        let old_shape = a.shape().to_vec();
        let out = Tensor::new(shape, a.data().to_vec());
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| Tensor::new(old_shape.clone(), g.data().to_vec())),
            )],
        )
    }

    // -- concatenation and broadcasting -------------------------------------

    /// Concatenate along the last axis. Rank-1 inputs concatenate into a
    /// longer vector; rank-2 inputs must share a row count.
    pub fn concat_cols(self, other: Var<'t>) -> Var<'t> {
        same_tape(self, other);
        let a = self.value();
        let b = other.value();
        assert!(
            a.rank() == b.rank(),
            "shape mismatch in concat_cols: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        match a.rank() {
            1 => {
                let mut data = a.data().to_vec();
                data.extend_from_slice(b.data());
                let (la, lb) = (a.len(), b.len());
                self.tape.push(
                    Tensor::vector(data),
                    vec![
                        (
                            self.id,
                            Box::new(move |g: &Tensor| Tensor::vector(g.data()[..la].to_vec())),
                        ),
                        (
                            other.id,
                            Box::new(move |g: &Tensor| {
                                Tensor::vector(g.data()[la..la + lb].to_vec())
                            }),
                        ),
                    ],
                )
            }
            2 => {
                assert!(
                    a.rows() == b.rows(),
                    "shape mismatch in concat_cols: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
                let (n, ca, cb) = (a.rows(), a.cols(), b.cols());
                let mut data = Vec::with_capacity(n * (ca + cb));
                for i in 0..n {
                    data.extend_from_slice(a.row(i));
                    data.extend_from_slice(b.row(i));
                }
                self.tape.push(
                    Tensor::matrix(n, ca + cb, data),
                    vec![
                        (
                            self.id,
                            Box::new(move |g: &Tensor| {
                                Tensor::from_fn(n, ca, |i, j| g.get2(i, j))
                            }),
                        ),
                        (
                            other.id,
                            Box::new(move |g: &Tensor| {
                                Tensor::from_fn(n, cb, |i, j| g.get2(i, ca + j))
                            }),
                        ),
                    ],
                )
            }
            r => panic!("concat_cols on rank-{} tensor", r),
        }
    }

    /// Concatenate rank-2 tensors along rows.
    pub fn concat_rows(self, other: Var<'t>) -> Var<'t> {
        same_tape(self, other);
        let a = self.value();
        let b = other.value();
        assert!(
            a.rank() == 2 && b.rank() == 2 && a.cols() == b.cols(),
            "shape mismatch in concat_rows: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let (ra, rb, c) = (a.rows(), b.rows(), a.cols());
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        self.tape.push(
            Tensor::matrix(ra + rb, c, data),
            vec![
                (
                    self.id,
                    Box::new(move |g: &Tensor| {
                        Tensor::matrix(ra, c, g.data()[..ra * c].to_vec())
                    }),
                ),
                (
                    other.id,
                    Box::new(move |g: &Tensor| {
                        Tensor::matrix(rb, c, g.data()[ra * c..].to_vec())
                    }),
                ),
            ],
        )
    }

    /// Repeat a rank-1 vector as `n` identical rows.
    pub fn broadcast_row(self, n: usize) -> Var<'t> {
        let v = self.value();
        assert!(
            v.rank() == 1,
            "broadcast_row expects a vector, got shape {:?}",
            v.shape()
        );
        let d = v.len();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        self.tape.push(
            Tensor::matrix(n, d, data),
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    let mut acc = vec![0.0; d];
                    for i in 0..n {
                        for (a, &gv) in acc.iter_mut().zip(g.row(i)) {
                            *a += gv;
                        }
                    }
                    Tensor::vector(acc)
                }),
            )],
        )
    }

    /// Add a rank-1 bias vector to every row of a rank-2 tensor.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        same_tape(self, bias);
        let a = self.value();
        let b = bias.value();
        assert!(
            a.rank() == 2 && b.rank() == 1 && a.cols() == b.len(),
            "shape mismatch in add_row: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let (n, d) = (a.rows(), a.cols());
        let mut data = a.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += b.data()[j];
            }
        }
        self.tape.push(
            Tensor::matrix(n, d, data),
            vec![
                (self.id, Box::new(|g: &Tensor| g.clone())),
                (
                    bias.id,
                    Box::new(move |g: &Tensor| {
                        let mut acc = vec![0.0; d];
                        for i in 0..n {
                            for (a, &gv) in acc.iter_mut().zip(g.row(i)) {
                                *a += gv;
                            }
                        }
                        Tensor::vector(acc)
                    }),
                ),
            ],
        )
    }

    /// Scale row `i` of a rank-2 tensor by `factors[i]`.
    pub fn scale_rows(self, factors: Var<'t>) -> Var<'t> {
        same_tape(self, factors);
        let a = self.value();
        let f = factors.value();
        assert!(
            a.rank() == 2 && f.rank() == 1 && a.rows() == f.len(),
            "shape mismatch in scale_rows: {:?} vs {:?}",
            a.shape(),
            f.shape()
        );
        let (n, d) = (a.rows(), a.cols());
        let mut data = a.data().to_vec();
        for i in 0..n {
            let c = f.data()[i];
            for v in &mut data[i * d..(i + 1) * d] {
                *v *= c;
            }
        }
        let a2 = Rc::clone(&a);
        let f2 = Rc::clone(&f);
        self.tape.push(
            Tensor::matrix(n, d, data),
            vec![
                (
                    self.id,
                    Box::new(move |g: &Tensor| {
                        Tensor::from_fn(n, d, |i, j| g.get2(i, j) * f2.data()[i])
                    }),
                ),
                (
                    factors.id,
                    Box::new(move |g: &Tensor| {
                        let acc = (0..n)
                            .map(|i| {
                                g.row(i)
                                    .iter()
                                    .zip(a2.row(i))
                                    .map(|(&gv, &av)| gv * av)
                                    .sum()
                            })
                            .collect();
                        Tensor::vector(acc)
                    }),
                ),
            ],
        )
    }

    // -- indexing ------------------------------------------------------------

    /// Gather rows of a rank-2 tensor by index; indices may repeat.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let a = self.value();
        assert!(
            a.rank() == 2,
            "gather_rows expects a matrix, got shape {:?}",
            a.shape()
        );
        let (n, d) = (a.rows(), a.cols());
        for &i in idx {
            assert!(i < n, "gather_rows index {} out of range for {} rows", i, n);
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(a.row(i));
        }
        let idx2 = idx.to_vec();
        self.tape.push(
            Tensor::matrix(idx.len(), d, data),
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    let mut acc = Tensor::zeros(vec![n, d]);
                    for (k, &i) in idx2.iter().enumerate() {
                        let dst = &mut acc.data_mut()[i * d..(i + 1) * d];
                        for (a, &gv) in dst.iter_mut().zip(g.row(k)) {
                            *a += gv;
                        }
                    }
                    acc
                }),
            )],
        )
    }

    /// `out = self; out[idx[k]] += src[k]` over rows.
    pub fn scatter_add_rows(self, idx: &[usize], src: Var<'t>) -> Var<'t> {
        same_tape(self, src);
        let base = self.value();
        let s = src.value();
        assert!(
            base.rank() == 2 && s.rank() == 2 && base.cols() == s.cols(),
            "shape mismatch in scatter_add_rows: {:?} vs {:?}",
            base.shape(),
            s.shape()
        );
        assert!(
            idx.len() == s.rows(),
            "scatter_add_rows got {} indices for {} source rows",
            idx.len(),
            s.rows()
        );
        let (n, d) = (base.rows(), base.cols());
        for &i in idx {
            assert!(i < n, "scatter_add_rows index {} out of range for {} rows", i, n);
        }
        let mut data = base.data().to_vec();
        for (k, &i) in idx.iter().enumerate() {
            for (a, &v) in data[i * d..(i + 1) * d].iter_mut().zip(s.row(k)) {
                *a += v;
            }
        }
        let idx2 = idx.to_vec();
        let k_rows = s.rows();
        self.tape.push(
            Tensor::matrix(n, d, data),
            vec![
                (self.id, Box::new(|g: &Tensor| g.clone())),
                (
                    src.id,
                    Box::new(move |g: &Tensor| {
                        let mut out = Vec::with_capacity(k_rows * d);
                        for &i in &idx2 {
                            out.extend_from_slice(g.row(i));
                        }
                        Tensor::matrix(k_rows, d, out)
                    }),
                ),
            ],
        )
    }

    // -- merging -------------------------------------------------------------

    /// Complex rotation merge: consecutive element pairs of `self` are
    /// rotated by the matching pairs of `phase`, normalized per pair to unit
    /// modulus (with [`ROTATE_EPS`] inside the square root).
    pub fn rotate(self, phase: Var<'t>) -> Var<'t> {
        same_tape(self, phase);
        let h = self.value();
        let w = phase.value();
        assert!(
            h.shape() == w.shape(),
            "shape mismatch in rotate: {:?} vs {:?}",
            h.shape(),
            w.shape()
        );
        let last = *h.shape().last().unwrap_or(&0);
        assert!(
            last.is_multiple_of(2),
            "rotate requires an even last dimension, got shape {:?}",
            h.shape()
        );
        let n = h.len();
        let mut out = vec![0.0; n];
        for p in (0..n).step_by(2) {
            let (a, b) = (h.data()[p], h.data()[p + 1]);
            let (c, d) = (w.data()[p], w.data()[p + 1]);
            let m = (c * c + d * d + ROTATE_EPS).sqrt();
            let (u, v) = (c / m, d / m);
            out[p] = a * u - b * v;
            out[p + 1] = a * v + b * u;
        }
        let h2 = Rc::clone(&h);
        let w2 = Rc::clone(&w);
        let w3 = Rc::clone(&w);
        self.tape.push(
            Tensor::new(h.shape().to_vec(), out),
            vec![
                (
                    self.id,
                    Box::new(move |g: &Tensor| {
                        let mut out = Tensor::zeros_like(g);
                        for p in (0..g.len()).step_by(2) {
                            let (c, d) = (w3.data()[p], w3.data()[p + 1]);
                            let m = (c * c + d * d + ROTATE_EPS).sqrt();
                            let (u, v) = (c / m, d / m);
                            let (gr, gi) = (g.data()[p], g.data()[p + 1]);
                            out.data_mut()[p] = gr * u + gi * v;
                            out.data_mut()[p + 1] = -gr * v + gi * u;
                        }
                        out
                    }),
                ),
                (
                    phase.id,
                    Box::new(move |g: &Tensor| {
                        let mut out = Tensor::zeros_like(g);
                        for p in (0..g.len()).step_by(2) {
                            let (a, b) = (h2.data()[p], h2.data()[p + 1]);
                            let (c, d) = (w2.data()[p], w2.data()[p + 1]);
                            let m2 = c * c + d * d + ROTATE_EPS;
                            let m3 = m2 * m2.sqrt();
                            let (gr, gi) = (g.data()[p], g.data()[p + 1]);
                            let d2e = d * d + ROTATE_EPS;
                            let c2e = c * c + ROTATE_EPS;
                            let dre_dc = (a * d2e + b * c * d) / m3;
                            let dre_dd = (-a * c * d - b * c2e) / m3;
                            let dim_dc = (-a * c * d + b * d2e) / m3;
                            let dim_dd = (a * c2e - b * c * d) / m3;
                            out.data_mut()[p] = gr * dre_dc + gi * dim_dc;
                            out.data_mut()[p + 1] = gr * dre_dd + gi * dim_dd;
                        }
                        out
                    }),
                ),
            ],
        )
    }

    // -- normalization ---------------------------------------------------------

    /// Layer normalization over the last axis of a rank-2 tensor, with
    /// learnable gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Var<'t> {
        same_tape(self, gain);
        same_tape(self, bias);
        let x = self.value();
        let gm = gain.value();
        let bm = bias.value();
        assert!(
            x.rank() == 2 && gm.rank() == 1 && bm.rank() == 1,
            "layer_norm expects matrix + two vectors, got {:?}, {:?}, {:?}",
            x.shape(),
            gm.shape(),
            bm.shape()
        );
        assert!(
            x.cols() == gm.len() && x.cols() == bm.len(),
            "shape mismatch in layer_norm: {:?} vs gain {:?} / bias {:?}",
            x.shape(),
            gm.shape(),
            bm.shape()
        );
        let (n, d) = (x.rows(), x.cols());
        let mut normalized = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                normalized[i * d + j] = (row[j] - mean) * is;
            }
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = normalized[i * d + j] * gm.data()[j] + bm.data()[j];
            }
        }
        let normalized = Rc::new(Tensor::matrix(n, d, normalized));
        let norm_x = Rc::clone(&normalized);
        let norm_g = Rc::clone(&normalized);
        let gain_v = Rc::clone(&gm);
        let inv_std = Rc::new(inv_std);
        self.tape.push(
            Tensor::matrix(n, d, out),
            vec![
                (
                    self.id,
                    Box::new(move |g: &Tensor| {
                        // dx = inv_std * (gy - mean(gy) - x_hat * mean(gy * x_hat))
                        // with gy = g * gain, all means over the row.
                        let mut out = Tensor::zeros(vec![n, d]);
                        for i in 0..n {
                            let mut mean_gy = 0.0;
                            let mut mean_gy_xhat = 0.0;
                            for j in 0..d {
                                let gy = g.get2(i, j) * gain_v.data()[j];
                                mean_gy += gy;
                                mean_gy_xhat += gy * norm_x.get2(i, j);
                            }
                            mean_gy /= d as f64;
                            mean_gy_xhat /= d as f64;
                            for j in 0..d {
                                let gy = g.get2(i, j) * gain_v.data()[j];
                                out.data_mut()[i * d + j] = inv_std[i]
                                    * (gy - mean_gy - norm_x.get2(i, j) * mean_gy_xhat);
                            }
                        }
                        out
                    }),
                ),
                (
                    gain.id,
                    Box::new(move |g: &Tensor| {
                        let mut acc = vec![0.0; d];
                        for i in 0..n {
                            for (j, a) in acc.iter_mut().enumerate() {
                                *a += g.get2(i, j) * norm_g.get2(i, j);
                            }
                        }
                        Tensor::vector(acc)
                    }),
                ),
                (
                    bias.id,
                    Box::new(move |g: &Tensor| {
                        let mut acc = vec![0.0; d];
                        for i in 0..n {
                            for (j, a) in acc.iter_mut().enumerate() {
                                *a += g.get2(i, j);
                            }
                        }
                        Tensor::vector(acc)
                    }),
                ),
            ],
        )
    }

    // -- reductions --------------------------------------------------------------

    /// Reduce over `axis` of a rank-1/2 tensor, or over all elements when
    /// `axis` is `None` (scalar output).
    pub fn reduce(self, op: Reduce, axis: Option<usize>) -> Var<'t> {
        let a = self.value();
        let groups = reduction_groups(&a, axis);
        let out_shape = match (a.rank(), axis) {
            (_, None) => vec![],
            (1, Some(0)) => vec![],
            (2, Some(0)) => vec![a.cols()],
            (2, Some(1)) => vec![a.rows()],
            (r, Some(ax)) => panic!("reduce axis {} invalid for rank-{} tensor", ax, r),
        };
        let (values, back) = reduce_groups(&a, &groups, op);
        let out = Tensor::new(out_shape, values);
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| back(g)),
            )],
        )
    }

    /// Per-segment reduction over the rows of a rank-2 tensor. Empty
    /// segments produce zero rows and receive no gradient.
    pub fn segment_reduce(self, op: Reduce, segments: &[usize], num_segments: usize) -> Var<'t> {
        let a = self.value();
        assert!(
            a.rank() == 2,
            "segment_reduce expects a matrix, got shape {:?}",
            a.shape()
        );
        assert!(
            segments.len() == a.rows(),
            "segment_reduce got {} segment ids for {} rows",
            segments.len(),
            a.rows()
        );
        for &s in segments {
            assert!(
                s < num_segments,
                "segment id {} out of range for {} segments",
                s,
                num_segments
            );
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_segments];
        for (row, &s) in segments.iter().enumerate() {
            groups[s].push(row);
        }
        let d = a.cols();
        let groups: Vec<Vec<Vec<usize>>> = groups
            .into_iter()
            .map(|rows| {
                (0..d)
                    .map(|j| rows.iter().map(|&r| r * d + j).collect())
                    .collect()
            })
            .collect();
        let flat_groups: Vec<Vec<usize>> = groups.into_iter().flatten().collect();
        let (values, back) = reduce_groups(&a, &flat_groups, op);
        let out = Tensor::matrix(num_segments, d, values);
        self.tape
            .push(out, vec![(self.id, Box::new(move |g: &Tensor| back(g)))])
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, other: Var<'t>) -> Var<'t> {
        Var::add(self, other)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, other: Var<'t>) -> Var<'t> {
        Var::sub(self, other)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, other: Var<'t>) -> Var<'t> {
        Var::mul(self, other)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

/// Flat-index groups for an axis reduction: one group per output element.
fn reduction_groups(a: &Tensor, axis: Option<usize>) -> Vec<Vec<usize>> {
    match (a.rank(), axis) {
        (_, None) => vec![(0..a.len()).collect()],
        (1, Some(0)) => vec![(0..a.len()).collect()],
        (2, Some(0)) => {
            let (r, c) = (a.rows(), a.cols());
            (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect()
        }
        (2, Some(1)) => {
            let (r, c) = (a.rows(), a.cols());
            (0..r).map(|i| (0..c).map(|j| i * c + j).collect()).collect()
        }
        (r, Some(ax)) => panic!("reduce axis {} invalid for rank-{} tensor", ax, r),
    }
}

/// Shared kernel for axis and segment reductions. Returns forward values
/// (one per group, 0.0 for empty groups) plus the backward closure.
#[allow(clippy::type_complexity)]
fn reduce_groups(
    a: &Tensor,
    groups: &[Vec<usize>],
    op: Reduce,
) -> (Vec<f64>, Box<dyn Fn(&Tensor) -> Tensor>) {
    let data = a.data();
    let in_shape = a.shape().to_vec();
    let in_len = a.len();
    let mut values = Vec::with_capacity(groups.len());
    // Per-group payload for backward: indices plus whatever the rule needs.
    enum Back {
        Spread { idx: Vec<usize>, w: f64 },
        RouteTo(Option<usize>),
        StdRule { idx: Vec<usize>, coef: Vec<f64> },
    }
    let mut backs = Vec::with_capacity(groups.len());
    for group in groups {
        let n = group.len();
        match op {
            Reduce::Sum => {
                values.push(group.iter().map(|&i| data[i]).sum());
                backs.push(Back::Spread {
                    idx: group.clone(),
                    w: 1.0,
                });
            }
            Reduce::Mean => {
                if n == 0 {
                    values.push(0.0);
                    backs.push(Back::Spread { idx: vec![], w: 0.0 });
                } else {
                    values.push(group.iter().map(|&i| data[i]).sum::<f64>() / n as f64);
                    backs.push(Back::Spread {
                        idx: group.clone(),
                        w: 1.0 / n as f64,
                    });
                }
            }
            Reduce::Max => {
                let mut best: Option<usize> = None;
                for &i in group {
                    // strict comparison keeps the first attaining element
                    if best.is_none_or(|b| data[i] > data[b]) {
                        best = Some(i);
                    }
                }
                values.push(best.map_or(0.0, |b| data[b]));
                backs.push(Back::RouteTo(best));
            }
            Reduce::Min => {
                let mut best: Option<usize> = None;
                for &i in group {
                    if best.is_none_or(|b| data[i] < data[b]) {
                        best = Some(i);
                    }
                }
                values.push(best.map_or(0.0, |b| data[b]));
                backs.push(Back::RouteTo(best));
            }
            Reduce::Std => {
                if n == 0 {
                    values.push(0.0);
                    backs.push(Back::StdRule {
                        idx: vec![],
                        coef: vec![],
                    });
                } else {
                    let mean = group.iter().map(|&i| data[i]).sum::<f64>() / n as f64;
                    let var = group
                        .iter()
                        .map(|&i| (data[i] - mean) * (data[i] - mean))
                        .sum::<f64>()
                        / n as f64;
                    values.push(var.sqrt());
                    // exact gradient away from the nondifferentiable point;
                    // variances at or below STD_EPS count as zero variance
                    // and get gradient 0
                    let coef = if var > STD_EPS {
                        let denom = n as f64 * var.sqrt();
                        group.iter().map(|&i| (data[i] - mean) / denom).collect()
                    } else {
                        vec![0.0; n]
                    };
                    backs.push(Back::StdRule {
                        idx: group.clone(),
                        coef,
                    });
                }
            }
        }
    }
    let back = Box::new(move |g: &Tensor| {
        let mut out = vec![0.0; in_len];
        for (gi, back) in backs.iter().enumerate() {
            let gv = g.data()[gi];
            match back {
                Back::Spread { idx, w } => {
                    for &i in idx {
                        out[i] += gv * w;
                    }
                }
                Back::RouteTo(Some(i)) => out[*i] += gv,
                Back::RouteTo(None) => {}
                Back::StdRule { idx, coef } => {
                    for (&i, &c) in idx.iter().zip(coef) {
                        out[i] += gv * c;
                    }
                }
            }
        }
        Tensor::new(in_shape.clone(), out)
    });
    (values, back)
}

/// Stack rank-1 vectors of equal length into a matrix, one per row.
pub fn stack_rows<'t>(tape: &'t Tape, rows: &[Var<'t>]) -> Var<'t> {
    assert!(!rows.is_empty(), "stack_rows needs at least one row");
    let d = rows[0].value().len();
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut parents: Vec<(usize, GradFn)> = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        let v = row.value();
        assert!(
            v.rank() == 1 && v.len() == d,
            "shape mismatch in stack_rows: {:?} vs [{}]",
            v.shape(),
            d
        );
        data.extend_from_slice(v.data());
        parents.push((
            row.id,
            Box::new(move |g: &Tensor| Tensor::vector(g.row(k).to_vec())),
        ));
    }
    tape.push(Tensor::matrix(rows.len(), d, data), parents)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_forward_and_grads_match_product_rule() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.var(Tensor::vector(vec![3.0, 4.0]));
        let z = x.mul(y).reduce(Reduce::Sum, None);
        assert_eq!(x.mul(y).value().data(), &[3.0, 8.0]);
        let grads = tape.backward(z);
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.0));
        let s = x.sigmoid();
        assert_eq!(s.item(), 0.5);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn std_of_constant_vector_is_zero_with_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![5.0, 5.0, 5.0]));
        let s = x.reduce(Reduce::Std, None);
        assert_eq!(s.item(), 0.0);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // Using a tensor twice must yield the sum of both branch gradients.
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let double = x.add(x);
        let grads = tape.backward(double);
        assert_eq!(grads.get(x).unwrap().item(), 2.0);

        let tape2 = Tape::new();
        let y = tape2.var(Tensor::scalar(3.0));
        let single = y.scale(2.0);
        let grads2 = tape2.backward(single);
        assert_eq!(grads2.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn max_routes_gradient_to_first_attaining_element() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![2.0, 7.0, 7.0, 1.0]));
        let m = x.reduce(Reduce::Max, None);
        assert_eq!(m.item(), 7.0);
        let grads = tape.backward(m);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn segment_reduce_handles_empty_segments() {
        let tape = Tape::new();
        let x = tape.var(Tensor::matrix(2, 2, vec![1.0, 3.0, 5.0, 7.0]));
        let seg = [2usize, 2];
        let sum = x.segment_reduce(Reduce::Sum, &seg, 3);
        assert_eq!(sum.value().data(), &[0.0, 0.0, 0.0, 0.0, 6.0, 10.0]);
        let mean = x.segment_reduce(Reduce::Mean, &seg, 3);
        assert_eq!(mean.value().data(), &[0.0, 0.0, 0.0, 0.0, 3.0, 5.0]);
    }

    #[test]
    fn pna_statistics_on_two_messages() {
        // mean ‖ max ‖ min ‖ std of {[1,3],[5,7]} = [3,5, 5,7, 1,3, 2,2]
        let tape = Tape::new();
        let msgs = tape.var(Tensor::matrix(2, 2, vec![1.0, 3.0, 5.0, 7.0]));
        let seg = [0usize, 0];
        let mean = msgs.segment_reduce(Reduce::Mean, &seg, 1);
        let max = msgs.segment_reduce(Reduce::Max, &seg, 1);
        let min = msgs.segment_reduce(Reduce::Min, &seg, 1);
        let std = msgs.segment_reduce(Reduce::Std, &seg, 1);
        let cat = mean.concat_cols(max).concat_cols(min).concat_cols(std);
        assert_eq!(
            cat.value().data(),
            &[3.0, 5.0, 5.0, 7.0, 1.0, 3.0, 2.0, 2.0]
        );
    }

    #[test]
    fn rotate_quarter_turn() {
        let tape = Tape::new();
        let h = tape.var(Tensor::vector(vec![1.0, 0.0]));
        let w = tape.var(Tensor::vector(vec![0.0, 1.0]));
        let out = h.rotate(w);
        let v = out.value();
        assert!((v.data()[0] - 0.0).abs() < 1e-8);
        assert!((v.data()[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn matmul_gradients() {
        let tape = Tape::new();
        let a = tape.var(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.var(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let loss = a.matmul(b).reduce(Reduce::Sum, None);
        let grads = tape.backward(loss);
        // d(sum(AB))/dA = ones * B^T
        assert_eq!(grads.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch in add: [2] vs [3]")]
    fn add_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.var(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let _ = x.add(y);
    }

    #[test]
    fn scatter_gather_round_trip() {
        let tape = Tape::new();
        let base = tape.var(Tensor::zeros(vec![3, 2]));
        let src = tape.var(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let h = base.scatter_add_rows(&[1], src);
        assert_eq!(h.value().data(), &[0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
        let picked = h.gather_rows(&[1, 1]);
        let loss = picked.reduce(Reduce::Sum, None);
        let grads = tape.backward(loss);
        // both gathered copies feed back into the single source row
        assert_eq!(grads.get(src).unwrap().data(), &[2.0, 2.0]);
    }
}
