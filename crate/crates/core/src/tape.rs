//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is a per-forward-pass arena of nodes recorded in topological
//! order. [`Var`] is a copyable handle into the arena; operations on vars
//! record a backward function that maps the upstream gradient to per-parent
//! gradient contributions. [`Tape::backward`] walks the arena in reverse and
//! accumulates gradients for every node that influences the loss.
//!
//! The tape is rebuilt on every forward pass; trainable parameters live in a
//! [`crate::blocks::ParamStore`] and enter the tape as leaves.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

/// Arena of recorded operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`, if `v` influences the loss.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.by_node.get(v.idx).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Differentiable leaf (parameters, inputs under test).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None)
    }

    /// Non-trainable input. Identical to [`Tape::leaf`] mechanically; the
    /// distinction is documentation at call sites.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.idx].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.idx).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[idx];
            if let Some(back) = &node.backward {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &nodes[p].value).collect();
                let contributions = back(&g, &parent_vals, &node.value);
                debug_assert_eq!(contributions.len(), node.parents.len());
                for (&p, c) in node.parents.iter().zip(contributions) {
                    debug_assert!(c.all_finite(), "non-finite gradient at node {}", idx);
                    match &mut grads[p] {
                        Some(acc) => acc.add_in_place(&c),
                        slot => *slot = Some(c),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Grads { by_node: grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn item(self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    fn with_value<R>(self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.idx].value)
    }

    fn unary(self, value: Tensor, back: BackFn) -> Var<'t> {
        self.tape.push(value, vec![self.idx], Some(back))
    }

    fn binary(self, other: Var<'t>, value: Tensor, back: BackFn) -> Var<'t> {
        self.tape.push(value, vec![self.idx, other.idx], Some(back))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let value = self.with_value(|a| other.with_value(|b| a.zip(b, |x, y| x + y)));
        self.binary(other, value, Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let value = self.with_value(|a| other.with_value(|b| a.zip(b, |x, y| x - y)));
        self.binary(
            other,
            value,
            Box::new(|g, _, _| vec![g.clone(), g.map(|v| -v)]),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let value = self.with_value(|a| other.with_value(|b| a.zip(b, |x, y| x * y)));
        self.binary(
            other,
            value,
            Box::new(|g, p, _| vec![g.zip(p[1], |gv, b| gv * b), g.zip(p[0], |gv, a| gv * a)]),
        )
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let value = self.with_value(|a| other.with_value(|b| a.zip(b, |x, y| x / y)));
        self.binary(
            other,
            value,
            Box::new(|g, p, _| {
                let ga = g.zip(p[1], |gv, b| gv / b);
                let mut gb = g.zip(p[0], |gv, a| -gv * a);
                for (v, b) in gb.data_mut().iter_mut().zip(p[1].data()) {
                    *v /= b * b;
                }
                vec![ga, gb]
            }),
        )
    }

    /// Matrix plus a broadcast row vector (bias add).
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let value = self.with_value(|a| {
            row.with_value(|r| {
                assert_eq!(a.cols(), r.len(), "add_row width mismatch");
                let cols = a.cols();
                let mut out = a.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v += r.data()[i % cols];
                }
                out
            })
        });
        self.binary(
            row,
            value,
            Box::new(|g, p, _| {
                let cols = p[1].len();
                let mut gr = vec![0.0; cols];
                for (i, &gv) in g.data().iter().enumerate() {
                    gr[i % cols] += gv;
                }
                vec![g.clone(), Tensor::vector(gr)]
            }),
        )
    }

    /// Matrix times a broadcast row vector (elementwise gain).
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let value = self.with_value(|a| {
            row.with_value(|r| {
                assert_eq!(a.cols(), r.len(), "mul_row width mismatch");
                let cols = a.cols();
                let mut out = a.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v *= r.data()[i % cols];
                }
                out
            })
        });
        self.binary(
            row,
            value,
            Box::new(|g, p, _| {
                let cols = p[1].len();
                let mut gx = g.clone();
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    *v *= p[1].data()[i % cols];
                }
                let mut gr = vec![0.0; cols];
                for (i, &gv) in g.data().iter().enumerate() {
                    gr[i % cols] += gv * p[0].data()[i];
                }
                vec![gx, Tensor::vector(gr)]
            }),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.with_value(|a| a.map(|v| v * c));
        self.unary(value, Box::new(move |g, _, _| vec![g.map(|v| v * c)]))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.with_value(|a| a.map(|v| v + c));
        self.unary(value, Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        let value = self.with_value(|a| a.map(|v| v.max(0.0)));
        self.unary(
            value,
            Box::new(|g, p, _| vec![g.zip(p[0], |gv, x| if x > 0.0 { gv } else { 0.0 })]),
        )
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.with_value(|a| a.map(f64::exp));
        self.unary(value, Box::new(|g, _, out| vec![g.zip(out, |gv, y| gv * y)]))
    }

    pub fn ln(self) -> Var<'t> {
        let value = self.with_value(|a| a.map(f64::ln));
        self.unary(value, Box::new(|g, p, _| vec![g.zip(p[0], |gv, x| gv / x)]))
    }

    pub fn sqrt(self) -> Var<'t> {
        let value = self.with_value(|a| a.map(f64::sqrt));
        self.unary(
            value,
            Box::new(|g, _, out| vec![g.zip(out, |gv, y| gv / (2.0 * y))]),
        )
    }

    pub fn square(self) -> Var<'t> {
        let value = self.with_value(|a| a.map(|v| v * v));
        self.unary(
            value,
            Box::new(|g, p, _| vec![g.zip(p[0], |gv, x| 2.0 * gv * x)]),
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let value = self.with_value(|a| other.with_value(|b| a.matmul(b)));
        self.binary(
            other,
            value,
            Box::new(|g, p, _| {
                let (m, k) = (p[0].rows(), p[0].cols());
                let n = p[1].cols();
                let g2 = g.clone().reshape(vec![m, n]);
                let a2 = p[0].clone().reshape(vec![m, k]);
                let ga = g2.matmul(&p[1].transposed()).reshape(p[0].shape().to_vec());
                let gb = a2.transposed().matmul(&g2);
                vec![ga, gb]
            }),
        )
    }

    pub fn t(self) -> Var<'t> {
        let value = self.with_value(|a| a.transposed());
        self.unary(value, Box::new(|g, _, _| vec![g.transposed()]))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        let value = self.with_value(|a| a.clone().reshape(shape.clone()));
        self.unary(
            value,
            Box::new(|g, p, _| vec![g.clone().reshape(p[0].shape().to_vec())]),
        )
    }

    /// View a vector as a single-row matrix.
    pub fn as_row(self) -> Var<'t> {
        let n = self.with_value(|a| a.len());
        self.reshape(vec![1, n])
    }

    /// View a single-row matrix as a vector.
    pub fn squeeze(self) -> Var<'t> {
        let n = self.with_value(|a| a.len());
        self.reshape(vec![n])
    }

    pub fn sum(self) -> Var<'t> {
        let value = self.with_value(|a| Tensor::scalar(a.data().iter().sum()));
        self.unary(
            value,
            Box::new(|g, p, _| vec![Tensor::full(p[0].shape(), g.item())]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(|a| a.len());
        self.sum().scale(1.0 / n as f64)
    }

    /// Column sums: `[m, n] -> [n]`.
    pub fn sum_rows(self) -> Var<'t> {
        let value = self.with_value(|a| {
            let (m, n) = (a.rows(), a.cols());
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, &v) in out.iter_mut().zip(a.row_slice(i)) {
                    *o += v;
                }
            }
            Tensor::vector(out)
        });
        self.unary(
            value,
            Box::new(|g, p, _| {
                let (m, n) = (p[0].rows(), p[0].cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    out[i * n..(i + 1) * n].copy_from_slice(g.data());
                }
                vec![Tensor::new(p[0].shape().to_vec(), out)]
            }),
        )
    }

    /// Column means: `[m, n] -> [n]`.
    pub fn mean_rows(self) -> Var<'t> {
        let m = self.with_value(|a| a.rows());
        self.sum_rows().scale(1.0 / m as f64)
    }

    /// Row-wise stable softmax. An optional boolean mask (row-major, true =
    /// kept) zeroes out masked positions; every row must keep at least one.
    pub fn softmax(self, mask: Option<Rc<Vec<bool>>>) -> Var<'t> {
        let value = self.with_value(|a| softmax_forward(a, mask.as_deref()));
        self.unary(
            value,
            Box::new(move |g, _, out| {
                let (m, n) = (out.rows(), out.cols());
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let y = out.row_slice(i);
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        gx[i * n + j] = (gr[j] - dot) * y[j];
                    }
                }
                vec![Tensor::new(out.shape().to_vec(), gx)]
            }),
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Var<'t> {
        let value = self.with_value(|a| {
            let mut out = a.clone();
            let (m, n) = (a.rows(), a.cols());
            for i in 0..m {
                let row = &mut out.data_mut()[i * n..(i + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        });
        self.unary(
            value,
            Box::new(|g, _, out| {
                let (m, n) = (out.rows(), out.cols());
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let logp = out.row_slice(i);
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        gx[i * n + j] = gr[j] - logp[j].exp() * gsum;
                    }
                }
                vec![Tensor::new(out.shape().to_vec(), gx)]
            }),
        )
    }

    /// Row-wise normalization to zero mean and unit variance (epsilon in the
    /// denominator); applied to a vector it normalizes the whole vector.
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let value = self.with_value(|a| {
            let (m, n) = (a.rows(), a.cols());
            let mut out = a.clone();
            for i in 0..m {
                let row = &mut out.data_mut()[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            out
        });
        self.unary(
            value,
            Box::new(move |g, p, out| {
                let (m, n) = (p[0].rows(), p[0].cols());
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let x = p[0].row_slice(i);
                    let y = out.row_slice(i);
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let mean = x.iter().sum::<f64>() / n as f64;
                    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean: f64 = gr.iter().sum::<f64>() / n as f64;
                    let gy_dot: f64 =
                        gr.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[i * n + j] = inv * (gr[j] - g_mean - y[j] * gy_dot);
                    }
                }
                vec![Tensor::new(p[0].shape().to_vec(), gx)]
            }),
        )
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::new();
        for v in &values {
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            row_counts.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let total: usize = row_counts.iter().sum();
        let value = Tensor::new(vec![total, cols], data);
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        tape.push(
            value,
            idxs,
            Some(Box::new(move |g, p, _| {
                let cols = g.cols();
                let mut out = Vec::with_capacity(p.len());
                let mut offset = 0;
                for parent in p {
                    let r = parent.rows();
                    let chunk = g.data()[offset * cols..(offset + r) * cols].to_vec();
                    out.push(Tensor::new(parent.shape().to_vec(), chunk));
                    offset += r;
                }
                out
            })),
        )
    }

    /// Horizontal concatenation of matrices with equal row counts; rank-1
    /// operands are treated as single rows.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (v, &w) in values.iter().zip(&widths) {
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                data[i * total + offset..i * total + offset + w].copy_from_slice(v.row_slice(i));
            }
            offset += w;
        }
        let rank1 = values[0].rank() == 1 && parts.len() > 0;
        let shape = if rows == 1 && rank1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let value = Tensor::new(shape, data);
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        tape.push(
            value,
            idxs,
            Some(Box::new(move |g, p, _| {
                let rows = p[0].rows();
                let total = g.cols();
                let mut out = Vec::with_capacity(p.len());
                let mut offset = 0;
                for parent in p {
                    let w = parent.cols();
                    let mut chunk = vec![0.0; rows * w];
                    for i in 0..rows {
                        chunk[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    out.push(Tensor::new(parent.shape().to_vec(), chunk));
                    offset += w;
                }
                out
            })),
        )
    }

    pub fn slice_rows(self, r0: usize, r1: usize) -> Var<'t> {
        let value = self.with_value(|a| {
            let n = a.cols();
            Tensor::new(vec![r1 - r0, n], a.data()[r0 * n..r1 * n].to_vec())
        });
        self.unary(
            value,
            Box::new(move |g, p, _| {
                let mut out = Tensor::zeros(p[0].shape());
                let n = p[0].cols();
                out.data_mut()[r0 * n..r1 * n].copy_from_slice(g.data());
                vec![out]
            }),
        )
    }

    pub fn slice_cols(self, c0: usize, c1: usize) -> Var<'t> {
        let value = self.with_value(|a| {
            let m = a.rows();
            let mut data = Vec::with_capacity(m * (c1 - c0));
            for i in 0..m {
                data.extend_from_slice(&a.row_slice(i)[c0..c1]);
            }
            Tensor::new(vec![m, c1 - c0], data)
        });
        self.unary(
            value,
            Box::new(move |g, p, _| {
                let (m, n) = (p[0].rows(), p[0].cols());
                let w = c1 - c0;
                let mut out = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    out.data_mut()[i * n + c0..i * n + c1]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![out.reshape(p[0].shape().to_vec())]
            }),
        )
    }

    /// Extract row `i` of a matrix as a vector.
    pub fn row(self, i: usize) -> Var<'t> {
        self.slice_rows(i, i + 1).squeeze()
    }

    /// Gather rows of an embedding table: `[v, d]` with `ids` of length `t`
    /// yields `[t, d]`. Gradients scatter-add back into the table.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t> {
        let ids: Rc<Vec<usize>> = Rc::new(ids.to_vec());
        let value = self.with_value(|a| {
            let d = a.cols();
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids.iter() {
                data.extend_from_slice(a.row_slice(i));
            }
            Tensor::new(vec![ids.len(), d], data)
        });
        self.unary(
            value,
            Box::new(move |g, p, _| {
                let d = p[0].cols();
                let mut out = Tensor::zeros(p[0].shape());
                for (t, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        out.data_mut()[i * d + j] += g.data()[t * d + j];
                    }
                }
                vec![out]
            }),
        )
    }

    /// Extract element `i` of a vector as a scalar.
    pub fn pick(self, i: usize) -> Var<'t> {
        let value = self.with_value(|a| Tensor::scalar(a.data()[i]));
        self.unary(
            value,
            Box::new(move |g, p, _| {
                let mut out = Tensor::zeros(p[0].shape());
                out.data_mut()[i] = g.item();
                vec![out]
            }),
        )
    }

    /// Inverted dropout with a precomputed keep mask.
    pub fn dropout_masked(self, keep: Rc<Vec<bool>>, rate: f64) -> Var<'t> {
        let inv = 1.0 / (1.0 - rate);
        let value = self.with_value(|a| {
            assert_eq!(a.len(), keep.len());
            let mut out = a.clone();
            for (v, &k) in out.data_mut().iter_mut().zip(keep.iter()) {
                *v = if k { *v * inv } else { 0.0 };
            }
            out
        });
        self.unary(
            value,
            Box::new(move |g, _, _| {
                let mut out = g.clone();
                for (v, &k) in out.data_mut().iter_mut().zip(keep.iter()) {
                    *v = if k { *v * inv } else { 0.0 };
                }
                vec![out]
            }),
        )
    }

    /// Dot product of two equal-length vectors.
    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        self.mul(other).sum()
    }
}

fn softmax_forward(a: &Tensor, mask: Option<&Vec<bool>>) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    if let Some(mask) = mask {
        assert_eq!(mask.len(), m * n, "mask size mismatch");
    }
    let mut out = a.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let keep = |j: usize| mask.map_or(true, |mk| mk[i * n + j]);
        let max = (0..n)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max.is_finite(), "softmax row {} fully masked", i);
        let mut total = 0.0;
        for j in 0..n {
            row[j] = if keep(j) { (row[j] - max).exp() } else { 0.0 };
            total += row[j];
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut hi = x.to_vec();
                let mut lo = x.to_vec();
                hi[i] += h;
                lo[i] -= h;
                (f(&hi) - f(&lo)) / (2.0 * h)
            })
            .collect()
    }

    fn check_unary(op: impl Fn(Var<'_>) -> Var<'_> + Copy, x: Vec<f64>, shape: Vec<usize>) {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::new(shape.clone(), x.clone()));
        let loss = op(v).square().sum();
        let grads = tape.backward(loss);
        let ad = grads.wrt(v).unwrap().data().to_vec();
        let fd = finite_diff(
            |xs| {
                let t = Tape::new();
                let v = t.leaf(Tensor::new(shape.clone(), xs.to_vec()));
                op(v).square().sum().item()
            },
            &x,
        );
        for (a, f) in ad.iter().zip(&fd) {
            assert!((a - f).abs() < 1e-5, "ad {} vs fd {}", a, f);
        }
    }

    #[test]
    fn backward_matches_finite_differences_elementwise() {
        let x = vec![0.3, -0.7, 1.2, 0.5, -0.1, 2.0];
        check_unary(|v| v.relu(), x.clone(), vec![2, 3]);
        check_unary(|v| v.exp(), x.clone(), vec![6]);
        check_unary(|v| v.scale(3.0).add_scalar(1.0), x.clone(), vec![6]);
        check_unary(|v| v.softmax(None), x.clone(), vec![2, 3]);
        check_unary(|v| v.log_softmax(), x.clone(), vec![2, 3]);
        check_unary(|v| v.layer_norm(1e-5), x.clone(), vec![2, 3]);
        check_unary(|v| v.sum_rows(), x.clone(), vec![2, 3]);
        check_unary(|v| v.t(), x.clone(), vec![2, 3]);
        check_unary(|v| v.slice_cols(1, 3), x.clone(), vec![2, 3]);
        check_unary(|v| v.mean(), x, vec![6]);
    }

    #[test]
    fn backward_matches_finite_differences_matmul() {
        let a_data = vec![0.5, -1.0, 0.25, 2.0, 1.5, -0.5];
        let b = Tensor::matrix(3, 2, vec![1.0, 0.5, -0.2, 0.8, 0.3, -1.1]);
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, a_data.clone()));
        let bv = tape.constant(b.clone());
        let loss = a.matmul(bv).square().sum();
        let grads = tape.backward(loss);
        let ad = grads.wrt(a).unwrap().data().to_vec();
        let fd = finite_diff(
            |xs| {
                let t = Tape::new();
                let a = t.leaf(Tensor::matrix(2, 3, xs.to_vec()));
                let bv = t.constant(b.clone());
                a.matmul(bv).square().sum().item()
            },
            &a_data,
        );
        for (x, y) in ad.iter().zip(&fd) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_mask_holds() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![5.0, 1.0, 3.0, 0.0, 0.0, 0.0]));
        let mask = Rc::new(vec![true, false, true, true, true, false]);
        let y = x.softmax(Some(mask)).value();
        for i in 0..2 {
            let s: f64 = y.row_slice(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert_eq!(y.at(0, 1), 0.0);
        assert_eq!(y.at(1, 2), 0.0);
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let tape = Tape::new();
        let table = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = table.gather_rows(&[2, 0, 2]);
        let loss = picked.sum();
        let grads = tape.backward(loss);
        let g = grads.wrt(table).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_splits_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let cat = Var::concat_rows(&[a, b]);
        assert_eq!(cat.shape(), vec![3, 2]);
        let loss = cat.scale(2.0).sum();
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn shift_invariance_of_softmax() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.4, -1.0, 2.2]));
        let shifted = x.add_scalar(7.5);
        let a = x.as_row().softmax(None).value();
        let b = shifted.as_row().softmax(None).value();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
