//! Minimal reverse-mode automatic differentiation over `Array2<f64>`.
//!
//! The model forward passes are built as expression tapes; calling
//! [`Tape::backward`] on a scalar (1x1) node returns gradients for every
//! leaf parameter. Values are reference-counted so binding model
//! parameters into a tape is cheap.
//!
//! All values are matrices. Row vectors are `1xN`, column vectors `Nx1`,
//! scalars `1x1`. Gradients are accumulated in double precision with a
//! fixed traversal order, so repeated runs are bit-identical.

use ndarray::{Array2, Axis};
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var(usize);

/// Sink receiving (parent index, local gradient) contributions.
type GradSink<'a> = dyn FnMut(usize, Array2<f64>) + 'a;
type BackwardFn = Box<dyn Fn(&Array2<f64>, &mut GradSink)>;

struct Node {
    value: Arc<Array2<f64>>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Expression tape. Create one per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

impl Tape {
    /// Tape that records backward closures (training mode).
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256), recording: true }
    }

    /// Tape that only evaluates forward values. Backward closures are
    /// dropped, so `backward` must not be called.
    pub fn inference() -> Self {
        Tape { nodes: Vec::with_capacity(256), recording: false }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Array2<f64>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array2<f64>, needs_grad: bool, backward: Option<BackwardFn>) -> Var {
        let backward = if self.recording && needs_grad { backward } else { None };
        self.nodes.push(Node { value: Arc::new(value), needs_grad, backward });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (model parameter).
    pub fn leaf(&mut self, value: Arc<Array2<f64>>) -> Var {
        self.nodes.push(Node { value, needs_grad: true, backward: None });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input (data, masks, constants).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, false, None)
    }

    // ── elementwise and affine ops ──────────────────────────────────────

    /// `k * a + c` elementwise with scalar `k`, `c`.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let av = self.value_arc(a);
        let out = av.mapv(|x| k * x + c);
        let needs = self.needs(a);
        let pa = a.0;
        self.push(out, needs, Some(Box::new(move |g, sink| sink(pa, g.mapv(|x| k * x)))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(av.dim(), bv.dim(), "add: shape mismatch");
        let out = &*av + &*bv;
        let (na, nb) = (self.needs(a), self.needs(b));
        let (pa, pb) = (a.0, b.0);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink(pa, g.clone());
                }
                if nb {
                    sink(pb, g.clone());
                }
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(av.dim(), bv.dim(), "sub: shape mismatch");
        let out = &*av - &*bv;
        let (na, nb) = (self.needs(a), self.needs(b));
        let (pa, pb) = (a.0, b.0);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink(pa, g.clone());
                }
                if nb {
                    sink(pb, g.mapv(|x| -x));
                }
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(av.dim(), bv.dim(), "mul: shape mismatch");
        let out = &*av * &*bv;
        let (na, nb) = (self.needs(a), self.needs(b));
        let (pa, pb) = (a.0, b.0);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink(pa, g * &*bv);
                }
                if nb {
                    sink(pb, g * &*av);
                }
            })),
        )
    }

    /// Broadcast add of a `1xC` row vector onto each row of `RxC`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(bv.nrows(), 1, "add_row: b must be 1xC");
        assert_eq!(av.ncols(), bv.ncols(), "add_row: width mismatch");
        let out = &*av + &bv.row(0);
        let (na, nb) = (self.needs(a), self.needs(b));
        let (pa, pb) = (a.0, b.0);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink(pa, g.clone());
                }
                if nb {
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    sink(pb, col_sum);
                }
            })),
        )
    }

    /// Broadcast multiply of a `1xC` row vector onto each row of `RxC`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(bv.nrows(), 1, "mul_row: b must be 1xC");
        assert_eq!(av.ncols(), bv.ncols(), "mul_row: width mismatch");
        let out = &*av * &bv.row(0);
        let (na, nb) = (self.needs(a), self.needs(b));
        let (pa, pb) = (a.0, b.0);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink(pa, g * &bv.row(0));
                }
                if nb {
                    let gb = (g * &*av).sum_axis(Axis(0)).insert_axis(Axis(0));
                    sink(pb, gb);
                }
            })),
        )
    }

    /// Broadcast multiply of an `Rx1` column vector onto each column of `RxC`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(bv.ncols(), 1, "mul_col: b must be Rx1");
        assert_eq!(av.nrows(), bv.nrows(), "mul_col: height mismatch");
        let out = &*av * &bv.column(0).insert_axis(Axis(1));
        let (na, nb) = (self.needs(a), self.needs(b));
        let (pa, pb) = (a.0, b.0);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink(pa, g * &bv.column(0).insert_axis(Axis(1)));
                }
                if nb {
                    let gb = (g * &*av).sum_axis(Axis(1)).insert_axis(Axis(1));
                    sink(pb, gb);
                }
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let av = self.value_arc(a);
        let out = av.mapv(|x| if x > 0.0 { x } else { slope * x });
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let mut ga = g.clone();
                ga.zip_mut_with(&av, |gi, &x| {
                    if x <= 0.0 {
                        *gi *= slope;
                    }
                });
                sink(pa, ga);
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn tanh_(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let out = Arc::new(av.mapv(f64::tanh));
        let needs = self.needs(a);
        let pa = a.0;
        let out_b = Arc::clone(&out);
        let node = Node {
            value: out,
            needs_grad: needs,
            backward: if self.recording && needs {
                Some(Box::new(move |g: &Array2<f64>, sink: &mut GradSink| {
                    sink(pa, g * &out_b.mapv(|y| 1.0 - y * y));
                }))
            } else {
                None
            },
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let out = Arc::new(av.mapv(|x| 1.0 / (1.0 + (-x).exp())));
        let needs = self.needs(a);
        let pa = a.0;
        let out_b = Arc::clone(&out);
        let node = Node {
            value: out,
            needs_grad: needs,
            backward: if self.recording && needs {
                Some(Box::new(move |g: &Array2<f64>, sink: &mut GradSink| {
                    sink(pa, g * &out_b.mapv(|y| y * (1.0 - y)));
                }))
            } else {
                None
            },
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn exp_(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let out = Arc::new(av.mapv(f64::exp));
        let needs = self.needs(a);
        let pa = a.0;
        let out_b = Arc::clone(&out);
        let node = Node {
            value: out,
            needs_grad: needs,
            backward: if self.recording && needs {
                Some(Box::new(move |g: &Array2<f64>, sink: &mut GradSink| {
                    sink(pa, g * &*out_b);
                }))
            } else {
                None
            },
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Elementwise square root. Subgradient 0 at exactly 0.
    pub fn sqrt_(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let out = Arc::new(av.mapv(f64::sqrt));
        let needs = self.needs(a);
        let pa = a.0;
        let out_b = Arc::clone(&out);
        let node = Node {
            value: out,
            needs_grad: needs,
            backward: if self.recording && needs {
                Some(Box::new(move |g: &Array2<f64>, sink: &mut GradSink| {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&out_b, |gi, &y| {
                        *gi = if y > 0.0 { *gi * 0.5 / y } else { 0.0 };
                    });
                    sink(pa, ga);
                }))
            } else {
                None
            },
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Elementwise `x^p` for strictly positive inputs.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let av = self.value_arc(a);
        let out = av.mapv(|x| x.powf(p));
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink(pa, g * &av.mapv(|x| p * x.powf(p - 1.0)));
            })),
        )
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let av = self.value_arc(a);
        let out = av.mapv(|x| x.clamp(lo, hi));
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let mut ga = g.clone();
                ga.zip_mut_with(&av, |gi, &x| {
                    if x <= lo || x >= hi {
                        *gi = 0.0;
                    }
                });
                sink(pa, ga);
            })),
        )
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims");
        let out = av.dot(&*bv);
        let (na, nb) = (self.needs(a), self.needs(b));
        let (pa, pb) = (a.0, b.0);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink(pa, g.dot(&bv.t()));
                }
                if nb {
                    sink(pb, av.t().dot(g));
                }
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let out = av.t().to_owned();
        let needs = self.needs(a);
        let pa = a.0;
        self.push(out, needs, Some(Box::new(move |g, sink| sink(pa, g.t().to_owned()))))
    }

    /// Row-major reshape preserving element count.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value_arc(a);
        let old = av.dim();
        assert_eq!(old.0 * old.1, rows * cols, "reshape: element count");
        let out = Array2::from_shape_vec((rows, cols), av.iter().copied().collect())
            .expect("checked shape");
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let ga = Array2::from_shape_vec(old, g.iter().copied().collect())
                    .expect("checked shape");
                sink(pa, ga);
            })),
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let dim = av.dim();
        let out = Array2::from_elem((1, 1), av.sum());
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink(pa, Array2::from_elem(dim, g[[0, 0]]));
            })),
        )
    }

    /// Sum over rows: `RxC -> 1xC`.
    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let rows = av.nrows();
        let out = av.sum_axis(Axis(0)).insert_axis(Axis(0));
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros((rows, g.ncols()));
                for mut r in ga.rows_mut() {
                    r.assign(&g.row(0));
                }
                sink(pa, ga);
            })),
        )
    }

    /// Sum over columns: `RxC -> Rx1`.
    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let cols = av.ncols();
        let out = av.sum_axis(Axis(1)).insert_axis(Axis(1));
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros((g.nrows(), cols));
                for (i, mut r) in ga.rows_mut().into_iter().enumerate() {
                    r.fill(g[[i, 0]]);
                }
                sink(pa, ga);
            })),
        )
    }

    /// Mean over rows: `RxC -> 1xC`.
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let rows = self.value(a).nrows() as f64;
        let s = self.sum_axis0(a);
        self.affine(s, 1.0 / rows, 0.0)
    }

    /// Columnwise max: `RxC -> 1xC`. Ties resolve to the lowest row index;
    /// the gradient routes to that row only.
    pub fn max_axis0(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let (rows, cols) = av.dim();
        assert!(rows >= 1, "max_axis0: empty");
        let mut argmax = vec![0usize; cols];
        let mut out = Array2::zeros((1, cols));
        for c in 0..cols {
            let mut best = av[[0, c]];
            let mut bi = 0;
            for r in 1..rows {
                if av[[r, c]] > best {
                    best = av[[r, c]];
                    bi = r;
                }
            }
            out[[0, c]] = best;
            argmax[c] = bi;
        }
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros((rows, cols));
                for c in 0..cols {
                    ga[[argmax[c], c]] = g[[0, c]];
                }
                sink(pa, ga);
            })),
        )
    }

    /// Row-wise softmax with the max-subtraction trick.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let (rows, cols) = av.dim();
        let mut out = Array2::zeros((rows, cols));
        for r in 0..rows {
            let row = av.row(r);
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let mut denom = 0.0;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                out[[r, c]] = e;
                denom += e;
            }
            for c in 0..cols {
                out[[r, c]] /= denom;
            }
        }
        let out = Arc::new(out);
        let needs = self.needs(a);
        let pa = a.0;
        let y = Arc::clone(&out);
        let node = Node {
            value: out,
            needs_grad: needs,
            backward: if self.recording && needs {
                Some(Box::new(move |g: &Array2<f64>, sink: &mut GradSink| {
                    let mut ga = Array2::zeros((rows, cols));
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += g[[r, c]] * y[[r, c]];
                        }
                        for c in 0..cols {
                            ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    sink(pa, ga);
                }))
            } else {
                None
            },
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    // ── structural ops ──────────────────────────────────────────────────

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols: row mismatch");
        let (ca, cb) = (av.ncols(), bv.ncols());
        let mut out = Array2::zeros((av.nrows(), ca + cb));
        out.slice_mut(ndarray::s![.., ..ca]).assign(&av);
        out.slice_mut(ndarray::s![.., ca..]).assign(&bv);
        let (na, nb) = (self.needs(a), self.needs(b));
        let (pa, pb) = (a.0, b.0);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink(pa, g.slice(ndarray::s![.., ..ca]).to_owned());
                }
                if nb {
                    sink(pb, g.slice(ndarray::s![.., ca..]).to_owned());
                }
            })),
        )
    }

    /// Gather rows by index.
    pub fn rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value_arc(a);
        let (rows, cols) = av.dim();
        let idx: Vec<usize> = idx.to_vec();
        let mut out = Array2::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&av.row(i));
        }
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros((rows, cols));
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = ga.row_mut(i);
                    dst += &g.row(r);
                }
                sink(pa, ga);
            })),
        )
    }

    /// Induced square submatrix: `out[r, c] = a[idx[r], idx[c]]`.
    pub fn submatrix(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value_arc(a);
        let n = av.nrows();
        assert_eq!(n, av.ncols(), "submatrix: input must be square");
        let idx: Vec<usize> = idx.to_vec();
        let k = idx.len();
        let mut out = Array2::zeros((k, k));
        for r in 0..k {
            for c in 0..k {
                out[[r, c]] = av[[idx[r], idx[c]]];
            }
        }
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros((n, n));
                for r in 0..k {
                    for c in 0..k {
                        ga[[idx[r], idx[c]]] += g[[r, c]];
                    }
                }
                sink(pa, ga);
            })),
        )
    }

    /// All-pairs row sums: for `u, v` of shape `MxD`, the output row
    /// `i*M + j` is `u[i] + v[j]`.
    pub fn pairwise_row_sum(&mut self, u: Var, v: Var) -> Var {
        let (uv, vv) = (self.value_arc(u), self.value_arc(v));
        assert_eq!(uv.dim(), vv.dim(), "pairwise_row_sum: shape mismatch");
        let (m, d) = uv.dim();
        let mut out = Array2::zeros((m * m, d));
        for i in 0..m {
            for j in 0..m {
                let mut row = out.row_mut(i * m + j);
                row.assign(&uv.row(i));
                row += &vv.row(j);
            }
        }
        let (nu, nv) = (self.needs(u), self.needs(v));
        let (pu, pv) = (u.0, v.0);
        self.push(
            out,
            nu || nv,
            Some(Box::new(move |g, sink| {
                if nu {
                    let mut gu = Array2::zeros((m, d));
                    for i in 0..m {
                        for j in 0..m {
                            let mut r = gu.row_mut(i);
                            r += &g.row(i * m + j);
                        }
                    }
                    sink(pu, gu);
                }
                if nv {
                    let mut gv = Array2::zeros((m, d));
                    for i in 0..m {
                        for j in 0..m {
                            let mut r = gv.row_mut(j);
                            r += &g.row(i * m + j);
                        }
                    }
                    sink(pv, gv);
                }
            })),
        )
    }

    /// Threshold to {0,1} at `t`. With `straight_through` the gradient is
    /// passed to the kept (mask = 1) entries; otherwise the output is a
    /// constant and no gradient flows.
    pub fn binarize(&mut self, a: Var, t: f64, straight_through: bool) -> Var {
        let av = self.value_arc(a);
        let out = av.mapv(|x| if x >= t { 1.0 } else { 0.0 });
        if !straight_through {
            return self.constant(out);
        }
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let mut ga = g.clone();
                ga.zip_mut_with(&av, |gi, &x| {
                    if x < t {
                        *gi = 0.0;
                    }
                });
                sink(pa, ga);
            })),
        )
    }

    /// Causal im2col for time-major input `(B*seg_len) x C` holding `B`
    /// stacked segments: within each segment, output row `t` is the
    /// concatenation over taps `s = 0..kernel` of `x[t - (kernel-1-s)*dilation]`,
    /// zero-padded on the left. Tap `kernel-1` is the current timestep and
    /// taps never cross a segment boundary.
    pub fn causal_im2col(&mut self, a: Var, kernel: usize, dilation: usize, seg_len: usize) -> Var {
        let av = self.value_arc(a);
        let (rows, c) = av.dim();
        assert!(seg_len > 0 && rows % seg_len == 0, "rows must be a multiple of seg_len");
        let mut out = Array2::zeros((rows, kernel * c));
        for seg in (0..rows).step_by(seg_len) {
            for t in 0..seg_len {
                for s in 0..kernel {
                    let src = t as isize - ((kernel - 1 - s) * dilation) as isize;
                    if src >= 0 {
                        let src = seg + src as usize;
                        for ch in 0..c {
                            out[[seg + t, s * c + ch]] = av[[src, ch]];
                        }
                    }
                }
            }
        }
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros((rows, c));
                for seg in (0..rows).step_by(seg_len) {
                    for t in 0..seg_len {
                        for s in 0..kernel {
                            let src = t as isize - ((kernel - 1 - s) * dilation) as isize;
                            if src >= 0 {
                                let src = seg + src as usize;
                                for ch in 0..c {
                                    ga[[src, ch]] += g[[seg + t, s * c + ch]];
                                }
                            }
                        }
                    }
                }
                sink(pa, ga);
            })),
        )
    }

    /// Mean over each segment of `seg_len` consecutive rows:
    /// `(B*seg_len) x C -> B x C`.
    pub fn segment_mean_rows(&mut self, a: Var, seg_len: usize) -> Var {
        let av = self.value_arc(a);
        let (rows, c) = av.dim();
        assert!(seg_len > 0 && rows % seg_len == 0, "rows must be a multiple of seg_len");
        let b = rows / seg_len;
        let mut out = Array2::zeros((b, c));
        for s in 0..b {
            for t in 0..seg_len {
                for ch in 0..c {
                    out[[s, ch]] += av[[s * seg_len + t, ch]];
                }
            }
        }
        out.mapv_inplace(|v| v / seg_len as f64);
        let needs = self.needs(a);
        let pa = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros((rows, c));
                let inv = 1.0 / seg_len as f64;
                for s in 0..b {
                    for t in 0..seg_len {
                        for ch in 0..c {
                            ga[[s * seg_len + t, ch]] = g[[s, ch]] * inv;
                        }
                    }
                }
                sink(pa, ga);
            })),
        )
    }

    /// Vertical stack of same-width nodes.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows of nothing");
        let values: Vec<Arc<Array2<f64>>> = parts.iter().map(|&v| self.value_arc(v)).collect();
        let cols = values[0].ncols();
        let heights: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!(v.ncols(), cols, "stack_rows: width mismatch");
                v.nrows()
            })
            .collect();
        let total: usize = heights.iter().sum();
        let mut out = Array2::zeros((total, cols));
        let mut r = 0;
        for v in &values {
            out.slice_mut(ndarray::s![r..r + v.nrows(), ..]).assign(v);
            r += v.nrows();
        }
        let needs_any = parts.iter().any(|&v| self.needs(v));
        let meta: Vec<(usize, bool)> = parts.iter().map(|&v| (v.0, self.needs(v))).collect();
        self.push(
            out,
            needs_any,
            Some(Box::new(move |g, sink| {
                let mut r = 0;
                for ((pid, needs), h) in meta.iter().zip(heights.iter()) {
                    if *needs {
                        sink(*pid, g.slice(ndarray::s![r..r + h, ..]).to_owned());
                    }
                    r += h;
                }
            })),
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(self.recording, "backward on an inference tape");
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be 1x1");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].backward {
                back(&g, &mut |pid, contrib| {
                    debug_assert!(pid < i, "gradient pushed forward");
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                });
            }
            if self.nodes[i].needs_grad && self.nodes[i].backward.is_none() {
                // Leaf: keep its accumulated gradient.
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` w.r.t. one input matrix.
    fn fd_grad(
        x: &Array2<f64>,
        h: f64,
        f: impl Fn(&Array2<f64>) -> f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let fp = f(&xp);
            let mut xm = x.clone();
            xm[idx] -= h;
            let fm = f(&xm);
            g[idx] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let mut worst = 0.0f64;
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            worst = worst.max((x - y).abs() / denom);
        }
        worst
    }

    /// Builds a scalar from a single differentiable input via `build`,
    /// checks tape gradient against central differences.
    fn check_unary(x: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(Arc::new(x.clone()));
        let out = build(&mut tape, v);
        let root = tape.sum_all(out);
        let grads = tape.backward(root);
        let analytic = grads.get(v).expect("missing grad");

        let fd = fd_grad(&x, 1e-6, |xp| {
            let mut t = Tape::new();
            let v = t.leaf(Arc::new(xp.clone()));
            let out = build(&mut t, v);
            t.value(out).sum()
        });
        assert!(
            max_rel_err(analytic, &fd) < 1e-6,
            "gradient mismatch: analytic={analytic:?} fd={fd:?}"
        );
    }

    #[test]
    fn grad_elementwise_ops() {
        let x = array![[0.3, -1.2, 0.7], [2.0, -0.4, 0.1]];
        check_unary(x.clone(), |t, v| t.affine(v, 2.5, -1.0));
        check_unary(x.clone(), |t, v| t.leaky_relu(v, 0.2));
        check_unary(x.clone(), |t, v| t.tanh_(v));
        check_unary(x.clone(), |t, v| t.sigmoid(v));
        check_unary(x.clone(), |t, v| t.exp_(v));
        check_unary(x.clone(), |t, v| {
            let y = t.mul(v, v);
            t.affine(y, 1.0, 0.5)
        });
        check_unary(x.mapv(|v| v.abs() + 0.5), |t, v| t.sqrt_(v));
        check_unary(x.mapv(|v| v.abs() + 0.5), |t, v| t.powf(v, -0.5));
        check_unary(x.clone(), |t, v| t.clamp(v, -1.0, 1.0));
    }

    #[test]
    fn grad_reductions_and_softmax() {
        let x = array![[0.3, -1.2, 0.7], [2.0, -0.4, 0.1]];
        check_unary(x.clone(), |t, v| t.sum_axis0(v));
        check_unary(x.clone(), |t, v| t.sum_axis1(v));
        check_unary(x.clone(), |t, v| t.mean_axis0(v));
        check_unary(x.clone(), |t, v| t.max_axis0(v));
        check_unary(x.clone(), |t, v| {
            let s = t.softmax_rows(v);
            t.mul(s, s) // nontrivial downstream so the Jacobian matters
        });
    }

    #[test]
    fn grad_matmul_and_broadcast() {
        let x = array![[0.3, -1.2], [2.0, -0.4], [0.5, 0.9]];
        let w = array![[1.0, 0.2, -0.3], [-0.7, 0.5, 0.8]];
        // grad w.r.t. left operand
        check_unary(x.clone(), |t, v| {
            let wc = t.constant(w.clone());
            t.matmul(v, wc)
        });
        // grad w.r.t. right operand
        check_unary(w.clone(), |t, v| {
            let xc = t.constant(x.clone());
            t.matmul(xc, v)
        });
        check_unary(x.clone(), |t, v| t.transpose(v));
        let row = array![[0.4, -0.2]];
        check_unary(row.clone(), |t, v| {
            let a = t.constant(x.clone());
            t.add_row(a, v)
        });
        check_unary(row, |t, v| {
            let a = t.constant(x.clone());
            let y = t.mul_row(a, v);
            t.mul(y, y)
        });
        let col = array![[0.4], [-0.2], [1.1]];
        check_unary(col, |t, v| {
            let a = t.constant(x.clone());
            let y = t.mul_col(a, v);
            t.mul(y, y)
        });
    }

    #[test]
    fn grad_structural_ops() {
        let x = array![[0.3, -1.2], [2.0, -0.4], [0.5, 0.9]];
        check_unary(x.clone(), |t, v| t.rows(v, &[2, 0, 0]));
        check_unary(x.clone(), |t, v| {
            let c = t.constant(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
            let y = t.concat_cols(v, c);
            t.mul(y, y)
        });
        let sq = array![[0.3, -1.2, 0.1], [2.0, -0.4, 0.6], [0.5, 0.9, -0.2]];
        check_unary(sq, |t, v| t.submatrix(v, &[2, 0]));
        check_unary(x.clone(), |t, v| {
            let y = t.pairwise_row_sum(v, v);
            t.mul(y, y)
        });
        check_unary(x.clone(), |t, v| {
            let y = t.causal_im2col(v, 2, 2, 3);
            t.mul(y, y)
        });
        // segmented: two segments of 3 rows stacked
        let x6 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        check_unary(x6.clone(), |t, v| {
            let y = t.causal_im2col(v, 2, 1, 3);
            t.mul(y, y)
        });
        check_unary(x6, |t, v| t.segment_mean_rows(v, 3));
        check_unary(x, |t, v| {
            let c = t.constant(array![[1.0, 2.0]]);
            let s = t.stack_rows(&[v, c, v]);
            t.mul(s, s)
        });
    }

    #[test]
    fn binarize_modes() {
        let x = array![[0.6, 0.4], [0.1, 0.9]];
        let mut tape = Tape::new();
        let v = tape.leaf(Arc::new(x.clone()));
        let b = tape.binarize(v, 0.5, false);
        assert_eq!(tape.value(b), &array![[1.0, 0.0], [0.0, 1.0]]);
        // Detached: no gradient path back to the input.
        let s = tape.sum_all(b);
        assert!(!tape.needs(s));

        let mut tape = Tape::new();
        let v = tape.leaf(Arc::new(x));
        let b = tape.binarize(v, 0.5, true);
        let s = tape.sum_all(b);
        let grads = tape.backward(s);
        // Straight-through: unit gradient on kept entries only.
        assert_eq!(grads.get(v).unwrap(), &array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn shared_parent_accumulates() {
        // f(x) = x*x + x => f' = 2x + 1
        let x = array![[3.0]];
        let mut tape = Tape::new();
        let v = tape.leaf(Arc::new(x));
        let sq = tape.mul(v, v);
        let y = tape.add(sq, v);
        let root = tape.sum_all(y);
        let grads = tape.backward(root);
        assert_eq!(grads.get(v).unwrap()[[0, 0]], 7.0);
    }

    #[test]
    fn inference_tape_skips_closures() {
        let mut tape = Tape::inference();
        let v = tape.leaf(Arc::new(array![[1.0, 2.0]]));
        let y = tape.tanh_(v);
        assert!((tape.value(y)[[0, 0]] - 1.0f64.tanh()).abs() < 1e-15);
        assert!(tape.nodes[y.0].backward.is_none());
    }
}
