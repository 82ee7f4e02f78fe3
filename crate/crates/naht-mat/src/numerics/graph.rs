//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Each operation builds a [`GradNode`] holding the forward value plus
//! closures that map the node's output gradient to contributions for each
//! parent. [`GradNode::backward`] walks the graph in reverse topological
//! order and accumulates gradients into every reachable node.
//!
//! Contract: `backward` must run before any in-place parameter update
//! (pullbacks read parent values through the graph, not snapshots).
//! Repeated `backward` calls without zeroing accumulate, which is what the
//! optimizer loop wants.

use std::cell::RefCell;
use std::rc::Rc;

use crate::numerics::tensor::Tensor;
use crate::numerics::NumericsError;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

type Pullback = Box<dyn Fn(&Tensor) -> Tensor>;

struct NodeInner {
    value: RefCell<Tensor>,
    grad: RefCell<Option<Tensor>>,
    parents: Vec<(GradNode, Pullback)>,
}

/// A node in the computation graph: a tensor value plus enough structure
/// to backpropagate through the operation that produced it.
#[derive(Clone)]
pub struct GradNode(Rc<NodeInner>);

impl std::fmt::Debug for GradNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradNode")
            .field("shape", &self.shape())
            .field("parents", &self.0.parents.len())
            .finish()
    }
}

impl GradNode {
    /// A leaf node (parameter or constant input).
    pub fn leaf(value: Tensor) -> Self {
        GradNode(Rc::new(NodeInner {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            parents: Vec::new(),
        }))
    }

    fn from_op(value: Tensor, parents: Vec<(GradNode, Pullback)>) -> Self {
        GradNode(Rc::new(NodeInner {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            parents,
        }))
    }

    pub fn value(&self) -> Tensor {
        self.0.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.borrow().numel()
    }

    pub fn item(&self) -> f64 {
        self.0.value.borrow().item()
    }

    /// Evaluate `f` against the node's value without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.0.value.borrow())
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite a leaf's value in place (optimizer step, checkpoint load,
    /// finite-difference probes). Must not run while a graph built on this
    /// leaf still needs a backward pass.
    pub fn set_value(&self, value: Tensor) {
        assert_eq!(
            self.0.value.borrow().shape(),
            value.shape(),
            "set_value must preserve shape"
        );
        *self.0.value.borrow_mut() = value;
    }

    pub fn nudge_value(&self, index: usize, delta: f64) {
        self.0.value.borrow_mut().data_mut()[index] += delta;
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Backpropagate from a one-element node. Gradients accumulate into
    /// every reachable node; callers zero leaves between optimizer steps.
    pub fn backward(&self) -> Result<(), NumericsError> {
        if self.numel() != 1 {
            return Err(NumericsError::NonScalarBackward {
                shape: self.shape(),
            });
        }
        // Post-order DFS, then reverse: children before parents.
        let mut order: Vec<GradNode> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(GradNode, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.0.parents.len() {
                let parent = node.0.parents[child_idx].0.clone();
                stack.push((node, child_idx + 1));
                if visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        // Interior gradients are per-pass scratch; only leaves accumulate
        // across backward calls.
        for node in &order {
            if !node.0.parents.is_empty() {
                *node.0.grad.borrow_mut() = None;
            }
        }
        self.accumulate_grad(&Tensor::full(&self.shape(), 1.0));
        for node in order.iter().rev() {
            let grad = match node.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            for (parent, pullback) in &node.0.parents {
                let contribution = pullback(&grad);
                parent.accumulate_grad(&contribution);
            }
        }
        Ok(())
    }

    fn accumulate_grad(&self, delta: &Tensor) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => g.add_assign(delta),
            None => *slot = Some(delta.clone()),
        }
    }

    /// Install a gradient tensor directly (tests, gradient clipping).
    pub(crate) fn accumulate_raw(&self, g: Tensor) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => existing.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    // ----- elementwise arithmetic -------------------------------------

    pub fn add(&self, other: &GradNode) -> GradNode {
        let value = self.with_value(|a| other.with_value(|b| a.zip_map(b, |x, y| x + y)));
        GradNode::from_op(
            value,
            vec![
                (self.clone(), Box::new(|g: &Tensor| g.clone())),
                (other.clone(), Box::new(|g: &Tensor| g.clone())),
            ],
        )
    }

    pub fn sub(&self, other: &GradNode) -> GradNode {
        let value = self.with_value(|a| other.with_value(|b| a.zip_map(b, |x, y| x - y)));
        GradNode::from_op(
            value,
            vec![
                (self.clone(), Box::new(|g: &Tensor| g.clone())),
                (other.clone(), Box::new(|g: &Tensor| g.map(|v| -v))),
            ],
        )
    }

    pub fn mul(&self, other: &GradNode) -> GradNode {
        let value = self.with_value(|a| other.with_value(|b| a.zip_map(b, |x, y| x * y)));
        let a_handle = self.clone();
        let b_handle = other.clone();
        GradNode::from_op(
            value,
            vec![
                (
                    self.clone(),
                    Box::new(move |g: &Tensor| b_handle.with_value(|b| g.zip_map(b, |gv, bv| gv * bv))),
                ),
                (
                    other.clone(),
                    Box::new(move |g: &Tensor| a_handle.with_value(|a| g.zip_map(a, |gv, av| gv * av))),
                ),
            ],
        )
    }

    pub fn scale(&self, c: f64) -> GradNode {
        let value = self.with_value(|a| a.map(|v| v * c));
        GradNode::from_op(
            value,
            vec![(self.clone(), Box::new(move |g: &Tensor| g.map(|v| v * c)))],
        )
    }

    /// Add a constant tensor (no gradient flows to it).
    pub fn add_const(&self, t: &Tensor) -> GradNode {
        let value = self.with_value(|a| a.zip_map(t, |x, y| x + y));
        GradNode::from_op(value, vec![(self.clone(), Box::new(|g: &Tensor| g.clone()))])
    }

    pub fn exp(&self) -> GradNode {
        let value = self.with_value(|a| a.map(f64::exp));
        let y = value.clone();
        GradNode::from_op(
            value,
            vec![(
                self.clone(),
                Box::new(move |g: &Tensor| g.zip_map(&y, |gv, yv| gv * yv)),
            )],
        )
    }

    pub fn gelu(&self) -> GradNode {
        let value = self.with_value(|a| a.map(gelu_scalar));
        let x_handle = self.clone();
        GradNode::from_op(
            value,
            vec![(
                self.clone(),
                Box::new(move |g: &Tensor| {
                    x_handle.with_value(|x| g.zip_map(x, |gv, xv| gv * gelu_grad_scalar(xv)))
                }),
            )],
        )
    }

    /// Elementwise clamp. Gradient passes wherever the input is inside the
    /// closed interval, zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> GradNode {
        let value = self.with_value(|a| a.map(|v| v.clamp(lo, hi)));
        let x_handle = self.clone();
        GradNode::from_op(
            value,
            vec![(
                self.clone(),
                Box::new(move |g: &Tensor| {
                    x_handle.with_value(|x| {
                        g.zip_map(x, |gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 })
                    })
                }),
            )],
        )
    }

    /// Elementwise minimum. Ties route the gradient to `self`.
    pub fn minimum(&self, other: &GradNode) -> GradNode {
        let value = self.with_value(|a| other.with_value(|b| a.zip_map(b, f64::min)));
        let a_handle = self.clone();
        let b_handle = other.clone();
        let a_for_b = self.clone();
        let b_for_a = other.clone();
        GradNode::from_op(
            value,
            vec![
                (
                    self.clone(),
                    Box::new(move |g: &Tensor| {
                        a_handle.with_value(|a| {
                            b_for_a.with_value(|b| {
                                let mut out = g.clone();
                                for ((o, &av), &bv) in
                                    out.data_mut().iter_mut().zip(a.data()).zip(b.data())
                                {
                                    if av > bv {
                                        *o = 0.0;
                                    }
                                }
                                out
                            })
                        })
                    }),
                ),
                (
                    other.clone(),
                    Box::new(move |g: &Tensor| {
                        a_for_b.with_value(|a| {
                            b_handle.with_value(|b| {
                                let mut out = g.clone();
                                for ((o, &av), &bv) in
                                    out.data_mut().iter_mut().zip(a.data()).zip(b.data())
                                {
                                    if av <= bv {
                                        *o = 0.0;
                                    }
                                }
                                out
                            })
                        })
                    }),
                ),
            ],
        )
    }

    // ----- linear algebra ---------------------------------------------

    pub fn matmul(&self, other: &GradNode) -> Result<GradNode, NumericsError> {
        let value = self.with_value(|a| other.with_value(|b| a.matmul(b)))?;
        let a_handle = self.clone();
        let b_handle = other.clone();
        Ok(GradNode::from_op(
            value,
            vec![
                (
                    self.clone(),
                    Box::new(move |g: &Tensor| {
                        b_handle.with_value(|b| g.matmul_nt(b).expect("matmul backward"))
                    }),
                ),
                (
                    other.clone(),
                    Box::new(move |g: &Tensor| {
                        a_handle.with_value(|a| a.matmul_tn(g).expect("matmul backward"))
                    }),
                ),
            ],
        ))
    }

    /// `self [m,k] x other^T` where other is `[n,k]`.
    pub fn matmul_nt(&self, other: &GradNode) -> Result<GradNode, NumericsError> {
        let value = self.with_value(|a| other.with_value(|b| a.matmul_nt(b)))?;
        let a_handle = self.clone();
        let b_handle = other.clone();
        Ok(GradNode::from_op(
            value,
            vec![
                (
                    self.clone(),
                    Box::new(move |g: &Tensor| {
                        b_handle.with_value(|b| g.matmul(b).expect("matmul_nt backward"))
                    }),
                ),
                (
                    other.clone(),
                    Box::new(move |g: &Tensor| {
                        a_handle.with_value(|a| g.matmul_tn(a).expect("matmul_nt backward"))
                    }),
                ),
            ],
        ))
    }

    /// Broadcast a 1-D bias over every row of a 2-D tensor.
    pub fn add_row(&self, bias: &GradNode) -> GradNode {
        let value = self.with_value(|x| {
            bias.with_value(|b| {
                let (rows, cols) = x.dims2();
                assert_eq!(b.numel(), cols, "bias length must match columns");
                let mut out = x.clone();
                for i in 0..rows {
                    for (o, &bv) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(b.data())
                    {
                        *o += bv;
                    }
                }
                out
            })
        });
        GradNode::from_op(
            value,
            vec![
                (self.clone(), Box::new(|g: &Tensor| g.clone())),
                (
                    bias.clone(),
                    Box::new(|g: &Tensor| {
                        let (rows, cols) = g.dims2();
                        let mut out = Tensor::zeros(&[cols]);
                        for i in 0..rows {
                            for (o, &gv) in out.data_mut().iter_mut().zip(g.row(i)) {
                                *o += gv;
                            }
                        }
                        out
                    }),
                ),
            ],
        )
    }

    // ----- reductions ---------------------------------------------------

    pub fn sum_all(&self) -> GradNode {
        let value = Tensor::scalar(self.with_value(|x| x.sum()));
        let shape = self.shape();
        GradNode::from_op(
            value,
            vec![(
                self.clone(),
                Box::new(move |g: &Tensor| Tensor::full(&shape, g.item())),
            )],
        )
    }

    pub fn mean_all(&self) -> GradNode {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Row sums of a 2-D tensor: `[L,d] -> [L]`.
    pub fn sum_rows(&self) -> GradNode {
        let value = self.with_value(|x| {
            let (rows, _) = x.dims2();
            let mut out = Tensor::zeros(&[rows]);
            for i in 0..rows {
                out.data_mut()[i] = x.row(i).iter().sum();
            }
            out
        });
        let shape = self.shape();
        GradNode::from_op(
            value,
            vec![(
                self.clone(),
                Box::new(move |g: &Tensor| {
                    let (rows, cols) = (shape[0], shape[1]);
                    let mut out = Tensor::zeros(&[rows, cols]);
                    for i in 0..rows {
                        let gv = g.data()[i];
                        for o in &mut out.data_mut()[i * cols..(i + 1) * cols] {
                            *o = gv;
                        }
                    }
                    out
                }),
            )],
        )
    }

    /// Column means of a 2-D tensor: `[L,d] -> [1,d]`.
    pub fn mean_axis0(&self) -> GradNode {
        let value = self.with_value(|x| {
            let (rows, cols) = x.dims2();
            let mut out = Tensor::zeros(&[1, cols]);
            for i in 0..rows {
                for (o, &v) in out.data_mut().iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            out.scale_assign(1.0 / rows as f64);
            out
        });
        let shape = self.shape();
        GradNode::from_op(
            value,
            vec![(
                self.clone(),
                Box::new(move |g: &Tensor| {
                    let (rows, cols) = (shape[0], shape[1]);
                    let inv = 1.0 / rows as f64;
                    let mut out = Tensor::zeros(&[rows, cols]);
                    for i in 0..rows {
                        for (o, &gv) in out.data_mut()[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(g.data())
                        {
                            *o = gv * inv;
                        }
                    }
                    out
                }),
            )],
        )
    }

    // ----- indexing and reshaping ----------------------------------------

    /// Gather rows of a 2-D tensor by index: `out[i] = self[ids[i]]`.
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&self, ids: &[usize]) -> GradNode {
        let ids_owned: Vec<usize> = ids.to_vec();
        let value = self.with_value(|x| {
            let (rows, cols) = x.dims2();
            let mut out = Tensor::zeros(&[ids_owned.len(), cols]);
            for (i, &id) in ids_owned.iter().enumerate() {
                assert!(id < rows, "gather_rows index {id} out of range {rows}");
                out.data_mut()[i * cols..(i + 1) * cols].copy_from_slice(x.row(id));
            }
            out
        });
        let shape = self.shape();
        GradNode::from_op(
            value,
            vec![(
                self.clone(),
                Box::new(move |g: &Tensor| {
                    let (rows, cols) = (shape[0], shape[1]);
                    let mut out = Tensor::zeros(&[rows, cols]);
                    for (i, &id) in ids_owned.iter().enumerate() {
                        for (o, &gv) in out.data_mut()[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(g.row(i))
                        {
                            *o += gv;
                        }
                    }
                    out
                }),
            )],
        )
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> GradNode {
        let value = self.with_value(|x| {
            let (rows, cols) = x.dims2();
            assert!(start + len <= cols, "slice_cols out of range");
            let mut out = Tensor::zeros(&[rows, len]);
            for i in 0..rows {
                out.data_mut()[i * len..(i + 1) * len]
                    .copy_from_slice(&x.row(i)[start..start + len]);
            }
            out
        });
        let shape = self.shape();
        GradNode::from_op(
            value,
            vec![(
                self.clone(),
                Box::new(move |g: &Tensor| {
                    let (rows, cols) = (shape[0], shape[1]);
                    let mut out = Tensor::zeros(&[rows, cols]);
                    for i in 0..rows {
                        for (j, &gv) in g.row(i).iter().enumerate() {
                            out.data_mut()[i * cols + start + j] = gv;
                        }
                    }
                    out
                }),
            )],
        )
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat_cols(parts: &[GradNode]) -> GradNode {
        assert!(!parts.is_empty());
        let rows = parts[0].shape()[0];
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut value = Tensor::zeros(&[rows, total]);
        let mut offset = 0;
        for (part, &w) in parts.iter().zip(&widths) {
            part.with_value(|x| {
                assert_eq!(x.shape()[0], rows, "concat_cols row mismatch");
                for i in 0..rows {
                    value.data_mut()[i * total + offset..i * total + offset + w]
                        .copy_from_slice(x.row(i));
                }
            });
            offset += w;
        }
        let mut parents: Vec<(GradNode, Pullback)> = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (part, &w) in parts.iter().zip(&widths) {
            let start = offset;
            parents.push((
                part.clone(),
                Box::new(move |g: &Tensor| {
                    let (rows, cols) = g.dims2();
                    let mut out = Tensor::zeros(&[rows, w]);
                    for i in 0..rows {
                        out.data_mut()[i * w..(i + 1) * w]
                            .copy_from_slice(&g.row(i)[start..start + w]);
                    }
                    let _ = cols;
                    out
                }),
            ));
            offset += w;
        }
        GradNode::from_op(value, parents)
    }

    /// Pick `(row, col)` entries of a 2-D tensor into a 1-D vector.
    pub fn select_entries(&self, entries: &[(usize, usize)]) -> GradNode {
        let entries_owned: Vec<(usize, usize)> = entries.to_vec();
        let value = self.with_value(|x| {
            let mut out = Tensor::zeros(&[entries_owned.len()]);
            for (i, &(r, c)) in entries_owned.iter().enumerate() {
                out.data_mut()[i] = x.at2(r, c);
            }
            out
        });
        let shape = self.shape();
        GradNode::from_op(
            value,
            vec![(
                self.clone(),
                Box::new(move |g: &Tensor| {
                    let mut out = Tensor::zeros(&shape);
                    let cols = shape[1];
                    for (i, &(r, c)) in entries_owned.iter().enumerate() {
                        out.data_mut()[r * cols + c] += g.data()[i];
                    }
                    out
                }),
            )],
        )
    }

    /// Sum a list of same-shape nodes.
    pub fn sum_list(nodes: &[GradNode]) -> GradNode {
        assert!(!nodes.is_empty());
        let mut value = nodes[0].value();
        for node in &nodes[1..] {
            node.with_value(|t| value.add_assign(t));
        }
        let parents = nodes
            .iter()
            .map(|n| {
                (
                    n.clone(),
                    Box::new(|g: &Tensor| g.clone()) as Pullback,
                )
            })
            .collect();
        GradNode::from_op(value, parents)
    }

    // ----- softmax family -------------------------------------------------

    /// Row-wise softmax of a 2-D tensor, computed with max subtraction.
    pub fn softmax_rows(&self) -> GradNode {
        let value = self.with_value(softmax_rows_tensor);
        let y = value.clone();
        GradNode::from_op(
            value,
            vec![(
                self.clone(),
                Box::new(move |g: &Tensor| {
                    let (rows, cols) = y.dims2();
                    let mut out = Tensor::zeros(&[rows, cols]);
                    for i in 0..rows {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            out.data_mut()[i * cols + j] = y.at2(i, j) * (g.at2(i, j) - dot);
                        }
                    }
                    out
                }),
            )],
        )
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax_rows(&self) -> GradNode {
        let value = self.with_value(|x| {
            let (rows, cols) = x.dims2();
            let mut out = x.clone();
            for i in 0..rows {
                let row = &mut out.data_mut()[i * cols..(i + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                for v in row.iter_mut() {
                    *v -= log_z;
                }
            }
            out
        });
        let y = value.clone();
        GradNode::from_op(
            value,
            vec![(
                self.clone(),
                Box::new(move |g: &Tensor| {
                    let (rows, cols) = y.dims2();
                    let mut out = Tensor::zeros(&[rows, cols]);
                    for i in 0..rows {
                        let gsum: f64 = g.row(i).iter().sum();
                        for j in 0..cols {
                            out.data_mut()[i * cols + j] =
                                g.at2(i, j) - y.at2(i, j).exp() * gsum;
                        }
                    }
                    out
                }),
            )],
        )
    }

    /// Layer normalization over the last axis of a 2-D tensor, followed by
    /// a learned elementwise affine.
    pub fn layer_norm(&self, gain: &GradNode, bias: &GradNode, eps: f64) -> GradNode {
        let (normalized, inv_std) = self.with_value(|x| {
            let (rows, cols) = x.dims2();
            let mut normed = Tensor::zeros(&[rows, cols]);
            let mut inv_std = vec![0.0; rows];
            for i in 0..rows {
                let row = x.row(i);
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[i] = istd;
                for (o, &v) in normed.data_mut()[i * cols..(i + 1) * cols]
                    .iter_mut()
                    .zip(row)
                {
                    *o = (v - mean) * istd;
                }
            }
            (normed, inv_std)
        });
        let value = gain.with_value(|gn| {
            bias.with_value(|b| {
                let (rows, cols) = normalized.dims2();
                let mut out = normalized.clone();
                for i in 0..rows {
                    for (j, o) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                        *o = *o * gn.data()[j] + b.data()[j];
                    }
                }
                out
            })
        });

        let normed_for_x = normalized.clone();
        let istd_for_x = inv_std.clone();
        let gain_for_x = gain.clone();
        let normed_for_gain = normalized;
        GradNode::from_op(
            value,
            vec![
                (
                    self.clone(),
                    Box::new(move |g: &Tensor| {
                        let (rows, cols) = g.dims2();
                        let mut out = Tensor::zeros(&[rows, cols]);
                        gain_for_x.with_value(|gn| {
                            for i in 0..rows {
                                // dL/dx through the row statistics.
                                let ghat: Vec<f64> = g
                                    .row(i)
                                    .iter()
                                    .zip(gn.data())
                                    .map(|(&gv, &gnv)| gv * gnv)
                                    .collect();
                                let mean_ghat = ghat.iter().sum::<f64>() / cols as f64;
                                let mean_ghat_x: f64 = ghat
                                    .iter()
                                    .zip(normed_for_x.row(i))
                                    .map(|(&a, &b)| a * b)
                                    .sum::<f64>()
                                    / cols as f64;
                                for j in 0..cols {
                                    out.data_mut()[i * cols + j] = istd_for_x[i]
                                        * (ghat[j]
                                            - mean_ghat
                                            - normed_for_x.at2(i, j) * mean_ghat_x);
                                }
                            }
                        });
                        out
                    }),
                ),
                (
                    gain.clone(),
                    Box::new(move |g: &Tensor| {
                        let (rows, cols) = g.dims2();
                        let mut out = Tensor::zeros(&[cols]);
                        for i in 0..rows {
                            for (j, o) in out.data_mut().iter_mut().enumerate() {
                                *o += g.at2(i, j) * normed_for_gain.at2(i, j);
                            }
                        }
                        out
                    }),
                ),
                (
                    bias.clone(),
                    Box::new(|g: &Tensor| {
                        let (rows, cols) = g.dims2();
                        let mut out = Tensor::zeros(&[cols]);
                        for i in 0..rows {
                            for (j, o) in out.data_mut().iter_mut().enumerate() {
                                *o += g.at2(i, j);
                            }
                        }
                        out
                    }),
                ),
            ],
        )
    }
}

/// Plain-tensor row softmax with max subtraction, shared by the graph op
/// and by callers that only need values.
pub fn softmax_rows_tensor(x: &Tensor) -> Tensor {
    let (rows, cols) = x.dims2();
    let mut out = x.clone();
    for i in 0..rows {
        let row = &mut out.data_mut()[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
