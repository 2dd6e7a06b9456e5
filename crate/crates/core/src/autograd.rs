//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every value on the tape is a dense `f64` matrix (vectors are `1×d`,
//! scalars `1×1`). Operations append a node holding the forward value and a
//! pullback closure; [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints.
//!
//! The op set is deliberately small and shaped around what the models in
//! this crate need: dense linear algebra, pointwise activations, a few
//! reductions, blocked row shifts for dilated causal convolutions, and two
//! straight-through operators whose backward pass is the identity.

use ndarray::{s, Array2, Axis, Zip};
use std::cell::RefCell;

pub type Mat = Array2<f64>;

type Pullback = Box<dyn Fn(&Mat, &[&Mat], &Mat) -> Vec<Mat>>;

struct Node {
    value: Mat,
    parents: Vec<usize>,
    pullback: Option<Pullback>,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Adjoints produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros if `var` does not
    /// influence the root.
    pub fn wrt(&self, var: Var<'_>) -> Mat {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Mat::zeros(self.shapes[var.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf node. Parameters and data both enter the tape this way.
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(value, Vec::new(), None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Mat::from_elem((1, 1), value))
    }

    fn push(&self, value: Mat, parents: Vec<usize>, pullback: Option<Pullback>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, parents, pullback });
        Var { tape: self, id }
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.dim(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Mat::ones((1, 1)));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(pb) = &node.pullback {
                let parent_vals: Vec<&Mat> = node.parents.iter().map(|&p| &nodes[p].value).collect();
                let parent_grads = pb(&g, &parent_vals, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(pg.dim(), nodes[p].value.dim(), "pullback shape mismatch");
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.dim()).collect();
        Gradients { grads, shapes }
    }
}

fn unary<'t>(x: Var<'t>, value: Mat, pb: impl Fn(&Mat, &Mat, &Mat) -> Mat + 'static) -> Var<'t> {
    x.tape.push(value, vec![x.id], Some(Box::new(move |g, ps, y| vec![pb(g, ps[0], y)])))
}

// Arithmetic stays as named methods so every recorded op is explicit at the
// call site.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Mat {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Mat) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(|v| v.dim())
    }

    /// Value of a `1×1` node.
    pub fn item(&self) -> f64 {
        self.with_value(|v| {
            debug_assert_eq!(v.dim(), (1, 1));
            v[[0, 0]]
        })
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let v = self.with_value(|a| rhs.with_value(|b| a + b));
        self.tape.push(v, vec![self.id, rhs.id], Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])))
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let v = self.with_value(|a| rhs.with_value(|b| a - b));
        self.tape.push(v, vec![self.id, rhs.id], Some(Box::new(|g, _, _| vec![g.clone(), -g])))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let v = self.with_value(|a| rhs.with_value(|b| a * b));
        self.tape.push(v, vec![self.id, rhs.id], Some(Box::new(|g, ps, _| vec![g * ps[1], g * ps[0]])))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(self, c: &Mat) -> Var<'t> {
        let v = self.with_value(|a| a * c);
        let c = c.clone();
        unary(self, v, move |g, _, _| g * &c)
    }

    pub fn add_const(self, c: &Mat) -> Var<'t> {
        let v = self.with_value(|a| a + c);
        unary(self, v, |g, _, _| g.clone())
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let v = self.with_value(|a| a * k);
        unary(self, v, move |g, _, _| g * k)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let v = self.with_value(|a| a + k);
        unary(self, v, |g, _, _| g.clone())
    }

    /// `k - self`, computed entrywise.
    pub fn rsub_scalar(self, k: f64) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(|x| k - x));
        unary(self, v, |g, _, _| -g)
    }

    /// Multiply every entry by a `1×1` variable.
    pub fn mul_scalar(self, k: Var<'t>) -> Var<'t> {
        self.same_tape(&k);
        let kv = k.item();
        let v = self.with_value(|a| a * kv);
        self.tape.push(
            v,
            vec![self.id, k.id],
            Some(Box::new(|g, ps, _| {
                let kv = ps[1][[0, 0]];
                let dk = (g * ps[0]).sum();
                vec![g * kv, Mat::from_elem((1, 1), dk)]
            })),
        )
    }

    pub fn recip(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(|x| 1.0 / x));
        unary(self, v, |g, _, y| g * &y.mapv(|v| -v * v))
    }

    /// Adds a `1×C` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.same_tape(&row);
        let v = self.with_value(|a| {
            row.with_value(|r| {
                assert_eq!(r.nrows(), 1, "add_row expects a 1×C row");
                a + r
            })
        });
        self.tape.push(v, vec![self.id, row.id], Some(Box::new(|g, _, _| vec![g.clone(), g.sum_axis(Axis(0)).insert_axis(Axis(0))])))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let v = self.with_value(|a| {
            rhs.with_value(|b| {
                assert_eq!(a.ncols(), b.nrows(), "matmul: {:?} x {:?}", a.dim(), b.dim());
                a.dot(b)
            })
        });
        self.tape.push(v, vec![self.id, rhs.id], Some(Box::new(|g, ps, _| vec![g.dot(&ps[1].t()), ps[0].t().dot(g)])))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.with_value(|a| a.t().to_owned());
        unary(self, v, |g, _, _| g.t().to_owned())
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(|x| if x > 0.0 { x } else { slope * x }));
        unary(self, v, move |g, x, _| {
            let mut out = g.clone();
            Zip::from(&mut out).and(x).for_each(|o, &xv| {
                if xv <= 0.0 {
                    *o *= slope;
                }
            });
            out
        })
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(f64::tanh));
        unary(self, v, |g, _, y| g * &y.mapv(|t| 1.0 - t * t))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(f64::exp));
        unary(self, v, |g, _, y| g * y)
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(f64::ln));
        unary(self, v, |g, x, _| g / x)
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(softplus));
        unary(self, v, |g, x, _| g * &x.mapv(sigmoid))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(|x| x * x));
        unary(self, v, |g, x, _| g * &(x * 2.0))
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(f64::abs));
        unary(self, v, |g, x, _| {
            g * &x.mapv(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
        })
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.with_value(|a| Mat::from_elem((1, 1), a.sum()));
        unary(self, v, |g, x, _| Mat::from_elem(x.dim(), g[[0, 0]]))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(|a| a.len()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums: `R×C → R×1`.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.with_value(|a| a.sum_axis(Axis(1)).insert_axis(Axis(1)));
        unary(self, v, |g, x, _| {
            let mut out = Mat::zeros(x.dim());
            for (mut row, gv) in out.rows_mut().into_iter().zip(g.column(0)) {
                row.fill(*gv);
            }
            out
        })
    }

    /// `Σ self ⊙ weights` as a scalar.
    pub fn weighted_sum(self, weights: &Mat) -> Var<'t> {
        let v = self.with_value(|a| Mat::from_elem((1, 1), (a * weights).sum()));
        let w = weights.clone();
        unary(self, v, move |g, _, _| &w * g[[0, 0]])
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let v = self.with_value(|a| a.slice(s![.., start..end]).to_owned());
        unary(self, v, move |g, x, _| {
            let mut out = Mat::zeros(x.dim());
            out.slice_mut(s![.., start..end]).assign(g);
            out
        })
    }

    pub fn select_rows(self, rows: &[usize]) -> Var<'t> {
        let v = self.with_value(|a| a.select(Axis(0), rows));
        let rows = rows.to_vec();
        unary(self, v, move |g, x, _| {
            let mut out = Mat::zeros(x.dim());
            for (gi, &r) in rows.iter().enumerate() {
                let mut dst = out.row_mut(r);
                dst += &g.row(gi);
            }
            out
        })
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let v = self.with_value(|a| {
            let flat: Vec<f64> = a.iter().copied().collect();
            Mat::from_shape_vec((rows, cols), flat).expect("reshape: element count mismatch")
        });
        unary(self, v, |g, x, _| {
            let flat: Vec<f64> = g.iter().copied().collect();
            Mat::from_shape_vec(x.dim(), flat).expect("reshape pullback")
        })
    }

    /// Stack row blocks vertically.
    pub fn vstack(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "vstack of nothing");
        let tape = parts[0].tape;
        let nodes = tape.nodes.borrow();
        let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("vstack: column mismatch");
        let heights: Vec<usize> = views.iter().map(|m| m.nrows()).collect();
        drop(views);
        drop(nodes);
        tape.push(
            v,
            parts.iter().map(|p| p.id).collect(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(heights.len());
                let mut r = 0;
                for &h in &heights {
                    out.push(g.slice(s![r..r + h, ..]).to_owned());
                    r += h;
                }
                out
            })),
        )
    }

    /// Row-wise log-softmax. Entries where `mask` is false are excluded from
    /// the normalizer, produce 0 in the output and receive no gradient.
    pub fn log_softmax_rows(self, mask: Option<&Array2<bool>>) -> Var<'t> {
        let mask = self.with_value(|a| mask.cloned().unwrap_or_else(|| Array2::from_elem(a.dim(), true)));
        let v = self.with_value(|a| {
            let mut out = Mat::zeros(a.dim());
            for ((row, mrow), mut orow) in a.rows().into_iter().zip(mask.rows()).zip(out.rows_mut()) {
                let max = row.iter().zip(mrow).filter(|(_, &m)| m).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let lse = max + row.iter().zip(mrow).filter(|(_, &m)| m).map(|(&x, _)| (x - max).exp()).sum::<f64>().ln();
                for ((o, &x), &m) in orow.iter_mut().zip(row).zip(mrow) {
                    if m {
                        *o = x - lse;
                    }
                }
            }
            out
        });
        unary(self, v, move |g, _, y| {
            let mut out = Mat::zeros(y.dim());
            for (((grow, yrow), mrow), mut orow) in g.rows().into_iter().zip(y.rows()).zip(mask.rows()).zip(out.rows_mut()) {
                let gsum: f64 = grow.iter().zip(mrow).filter(|(_, &m)| m).map(|(&x, _)| x).sum();
                for (((o, &gv), &yv), &m) in orow.iter_mut().zip(grow).zip(yrow).zip(mrow) {
                    if m {
                        *o = gv - yv.exp() * gsum;
                    }
                }
            }
            out
        })
    }

    /// Scale each row to unit Euclidean norm; all-zero rows map to zero.
    pub fn normalize_rows(self) -> Var<'t> {
        let norms: Vec<f64> = self.with_value(|a| a.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect());
        let v = self.with_value(|a| {
            let mut out = a.clone();
            for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
                if n > 0.0 {
                    row /= n;
                } else {
                    row.fill(0.0);
                }
            }
            out
        });
        unary(self, v, move |g, _, y| {
            let mut out = Mat::zeros(y.dim());
            for (((grow, yrow), mut orow), &n) in g.rows().into_iter().zip(y.rows()).zip(out.rows_mut()).zip(&norms) {
                if n > 0.0 {
                    let proj = grow.dot(&yrow);
                    Zip::from(&mut orow).and(&grow).and(&yrow).for_each(|o, &gv, &yv| *o = (gv - proj * yv) / n);
                }
            }
            out
        })
    }

    /// `row[k] - row[k-1]` for k ≥ 1: `R×C → (R-1)×C`.
    pub fn row_diff(self) -> Var<'t> {
        let v = self.with_value(|a| {
            let n = a.nrows();
            &a.slice(s![1..n, ..]) - &a.slice(s![0..n - 1, ..])
        });
        unary(self, v, |g, x, _| {
            let n = x.nrows();
            let mut out = Mat::zeros(x.dim());
            {
                let mut hi = out.slice_mut(s![1..n, ..]);
                hi += g;
            }
            {
                let mut lo = out.slice_mut(s![0..n - 1, ..]);
                lo -= g;
            }
            out
        })
    }

    /// Within each block of `block` consecutive rows, move rows down by
    /// `shift` and zero-fill the top. This is the causal delay used by the
    /// dilated convolutions, applied to a batch stacked along rows.
    pub fn shift_rows(self, shift: usize, block: usize) -> Var<'t> {
        if shift == 0 {
            return self;
        }
        let v = self.with_value(|a| shift_blocked(a, shift, block, false));
        unary(self, v, move |g, _, _| shift_blocked(g, shift, block, true))
    }

    /// Mean over each block of `block` consecutive rows: `(B·L)×C → B×C`.
    pub fn block_mean(self, block: usize) -> Var<'t> {
        let v = self.with_value(|a| {
            assert_eq!(a.nrows() % block, 0, "block_mean: rows not a multiple of block");
            let b = a.nrows() / block;
            let mut out = Mat::zeros((b, a.ncols()));
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let m = a.slice(s![i * block..(i + 1) * block, ..]).mean_axis(Axis(0)).unwrap();
                row.assign(&m);
            }
            out
        });
        unary(self, v, move |g, x, _| {
            let mut out = Mat::zeros(x.dim());
            let inv = 1.0 / block as f64;
            for (i, grow) in g.rows().into_iter().enumerate() {
                for r in i * block..(i + 1) * block {
                    out.row_mut(r).scaled_add(inv, &grow);
                }
            }
            out
        })
    }

    /// Nearest-neighbour temporal upsampling of blocked rows: block `b` of
    /// `in_block` rows becomes `out_block` rows, output row `t` copying input
    /// row `min(t / factor, in_block - 1)`.
    pub fn block_upsample(self, in_block: usize, factor: usize, out_block: usize) -> Var<'t> {
        let (rows, cols) = self.shape();
        assert_eq!(rows % in_block, 0);
        let nb = rows / in_block;
        let src = move |b: usize, t: usize| b * in_block + (t / factor).min(in_block - 1);
        let v = self.with_value(|a| {
            let mut out = Mat::zeros((nb * out_block, cols));
            for b in 0..nb {
                for t in 0..out_block {
                    out.row_mut(b * out_block + t).assign(&a.row(src(b, t)));
                }
            }
            out
        });
        unary(self, v, move |g, x, _| {
            let mut out = Mat::zeros(x.dim());
            for b in 0..nb {
                for t in 0..out_block {
                    let mut dst = out.row_mut(src(b, t));
                    dst += &g.row(b * out_block + t);
                }
            }
            out
        })
    }

    /// Forward `1(x > threshold)`, backward identity.
    pub fn ste_threshold(self, threshold: f64) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(|x| if x > threshold { 1.0 } else { 0.0 }));
        unary(self, v, |g, _, _| g.clone())
    }

    /// Forward clamp to `[lo, hi]`, backward identity.
    pub fn clamp_ste(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(|x| x.clamp(lo, hi)));
        unary(self, v, |g, _, _| g.clone())
    }

    /// Edge-to-edge broadcast. With `row_term` and `col_term` both `N×C` and
    /// `bias` `1×C`, produces `N×(C·N)` where entry `(i, c·N + j)` equals
    /// `row_term[i,c] + col_term[j,c] + bias[c]`.
    pub fn e2e_broadcast(self, col_term: Var<'t>, bias: Var<'t>) -> Var<'t> {
        self.same_tape(&col_term);
        self.same_tape(&bias);
        let (n, c) = self.shape();
        assert_eq!(col_term.shape(), (n, c));
        assert_eq!(bias.shape(), (1, c));
        let v = self.with_value(|r| {
            col_term.with_value(|q| {
                bias.with_value(|b| {
                    let mut out = Mat::zeros((n, c * n));
                    for i in 0..n {
                        for ch in 0..c {
                            let base = r[[i, ch]] + b[[0, ch]];
                            for j in 0..n {
                                out[[i, ch * n + j]] = base + q[[j, ch]];
                            }
                        }
                    }
                    out
                })
            })
        });
        self.tape.push(
            v,
            vec![self.id, col_term.id, bias.id],
            Some(Box::new(move |g, _, _| {
                let mut dr = Mat::zeros((n, c));
                let mut dq = Mat::zeros((n, c));
                let mut db = Mat::zeros((1, c));
                for i in 0..n {
                    for ch in 0..c {
                        for j in 0..n {
                            let gv = g[[i, ch * n + j]];
                            dr[[i, ch]] += gv;
                            dq[[j, ch]] += gv;
                            db[[0, ch]] += gv;
                        }
                    }
                }
                vec![dr, dq, db]
            })),
        )
    }
}

fn shift_blocked(a: &Mat, shift: usize, block: usize, reverse: bool) -> Mat {
    assert_eq!(a.nrows() % block, 0, "shift_rows: rows not a multiple of block");
    let mut out = Mat::zeros(a.dim());
    if shift >= block {
        return out;
    }
    for b in 0..a.nrows() / block {
        let base = b * block;
        if reverse {
            out.slice_mut(s![base..base + block - shift, ..]).assign(&a.slice(s![base + shift..base + block, ..]));
        } else {
            out.slice_mut(s![base + shift..base + block, ..]).assign(&a.slice(s![base..base + block - shift, ..]));
        }
    }
    out
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
