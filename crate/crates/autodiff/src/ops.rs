use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::graph::Var;
use crate::Tensor;

/// Sums `a` down to `shape` following right-aligned broadcasting rules.
fn reduce_to(a: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = a.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn standard(a: Tensor) -> Tensor {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn reshape_value(a: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    assert_eq!(
        n,
        a.len(),
        "cannot reshape {:?} into {:?}",
        a.shape(),
        shape
    );
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape of standard layout array")
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let value = self.value() + other.value();
        Var::op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, inputs, _| {
                vec![
                    Some(g.sum_to(inputs[0].shape())),
                    Some(g.sum_to(inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.value() - other.value();
        Var::op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, inputs, _| {
                vec![
                    Some(g.sum_to(inputs[0].shape())),
                    Some(g.neg().sum_to(inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.value() * other.value();
        Var::op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, inputs, _| {
                vec![
                    inputs[0]
                        .requires_grad()
                        .then(|| g.mul(&inputs[1]).sum_to(inputs[0].shape())),
                    inputs[1]
                        .requires_grad()
                        .then(|| g.mul(&inputs[0]).sum_to(inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = self.value() / other.value();
        Var::op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, inputs, out| {
                vec![
                    inputs[0]
                        .requires_grad()
                        .then(|| g.div(&inputs[1]).sum_to(inputs[0].shape())),
                    inputs[1].requires_grad().then(|| {
                        g.mul(out)
                            .div(&inputs[1])
                            .neg()
                            .sum_to(inputs[1].shape())
                    }),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = self.value() * c;
        Var::op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.scale(c))]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.value() + c;
        Var::op(value, vec![self.clone()], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn exp(&self) -> Var {
        let value = self.value().mapv(f64::exp);
        Var::op(
            value,
            vec![self.clone()],
            Box::new(|g, _, out| vec![Some(g.mul(out))]),
        )
    }

    pub fn log(&self) -> Var {
        let value = self.value().mapv(f64::ln);
        Var::op(
            value,
            vec![self.clone()],
            Box::new(|g, inputs, _| vec![Some(g.div(&inputs[0]))]),
        )
    }

    pub fn sqrt(&self) -> Var {
        let value = self.value().mapv(f64::sqrt);
        Var::op(
            value,
            vec![self.clone()],
            Box::new(|g, _, out| vec![Some(g.div(&out.scale(2.0)))]),
        )
    }

    pub fn square(&self) -> Var {
        let value = self.value().mapv(|v| v * v);
        Var::op(
            value,
            vec![self.clone()],
            Box::new(|g, inputs, _| vec![Some(g.mul(&inputs[0]).scale(2.0))]),
        )
    }

    pub fn tanh(&self) -> Var {
        let value = self.value().mapv(f64::tanh);
        Var::op(
            value,
            vec![self.clone()],
            Box::new(|g, _, out| vec![Some(g.mul(&out.square().neg().add_scalar(1.0)))]),
        )
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().mapv(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        Var::op(
            value,
            vec![self.clone()],
            Box::new(|g, _, out| vec![Some(g.mul(&out.mul(&out.neg().add_scalar(1.0))))]),
        )
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self) -> Var {
        let value = self.value().mapv(f64::abs);
        Var::op(
            value,
            vec![self.clone()],
            Box::new(|g, inputs, _| {
                let sign = inputs[0].value().mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![Some(g.mul(&Var::constant(sign)))]
            }),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.value().mapv(|v| if v > 0.0 { v } else { slope * v });
        Var::op(
            value,
            vec![self.clone()],
            Box::new(move |g, inputs, _| {
                let mask = inputs[0]
                    .value()
                    .mapv(|v| if v > 0.0 { 1.0 } else { slope });
                vec![Some(g.mul(&Var::constant(mask)))]
            }),
        )
    }

    /// Multiplies by a fixed array (dropout masks and the like).
    pub fn mul_const(&self, mask: &Tensor) -> Var {
        self.mul(&Var::constant(mask.clone()))
    }

    pub fn sum_all(&self) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        Var::op(
            value,
            vec![self.clone()],
            Box::new(|g, inputs, _| vec![Some(g.broadcast_to(inputs[0].shape()))]),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-one dimensions.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Var {
        let mut value = self.value().clone();
        for &ax in axes {
            value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        Var::op(
            value,
            vec![self.clone()],
            Box::new(|g, inputs, _| vec![Some(g.broadcast_to(inputs[0].shape()))]),
        )
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Var {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_keepdim(axes).scale(1.0 / n.max(1) as f64)
    }

    /// Maximum over `axis` (kept), as a constant: no gradient flows through it.
    pub fn max_keepdim_detached(&self, axis: usize) -> Var {
        let value = self
            .value()
            .fold_axis(Axis(axis), f64::NEG_INFINITY, |&m, &v| m.max(v))
            .insert_axis(Axis(axis));
        Var::constant(value)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        Var::op(
            value,
            vec![self.clone()],
            Box::new(|g, inputs, _| vec![Some(g.sum_to(inputs[0].shape()))]),
        )
    }

    /// Reverse of broadcasting: sums leading and size-one target axes.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = reduce_to(self.value(), shape);
        Var::op(
            value,
            vec![self.clone()],
            Box::new(|g, inputs, _| vec![Some(g.broadcast_to(inputs[0].shape()))]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = reshape_value(self.value(), shape);
        Var::op(
            value,
            vec![self.clone()],
            Box::new(|g, inputs, _| vec![Some(g.reshape(inputs[0].shape()))]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        assert_eq!(axes.len(), self.ndim(), "permutation rank mismatch");
        let value = standard(self.value().clone().permuted_axes(IxDyn(axes)));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.permute(&inverse))]),
        )
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Var {
        assert_eq!(self.ndim(), 2, "t() expects a matrix");
        self.permute(&[1, 0])
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Var) -> Var {
        let a = self
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-D");
        let b = other
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-D");
        assert_eq!(
            a.ncols(),
            b.nrows(),
            "matmul shape mismatch {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let value = a.dot(&b).into_dyn();
        Var::op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, inputs, _| {
                vec![
                    inputs[0]
                        .requires_grad()
                        .then(|| g.matmul(&inputs[1].t())),
                    inputs[1]
                        .requires_grad()
                        .then(|| inputs[0].t().matmul(g)),
                ]
            }),
        )
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var {
        let full = self.shape()[axis];
        assert!(start + len <= full, "slice {start}+{len} exceeds {full}");
        if start == 0 && len == full {
            return self.clone();
        }
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Var::op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.embed(axis, start, full))]),
        )
    }

    /// Places `self` at offset `start` of a zero tensor whose `axis` has size `full`.
    pub fn embed(&self, axis: usize, start: usize, full: usize) -> Var {
        let len = self.shape()[axis];
        if start == 0 && len == full {
            return self.clone();
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let mut value = ArrayD::zeros(IxDyn(&shape));
        value
            .slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(self.value());
        Var::op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.slice(axis, start, len))]),
        )
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::op(
            value,
            parts.to_vec(),
            Box::new(move |g, inputs, _| {
                let mut offset = 0;
                lens.iter()
                    .zip(inputs)
                    .map(|(&len, input)| {
                        let part = input.requires_grad().then(|| g.slice(axis, offset, len));
                        offset += len;
                        part
                    })
                    .collect()
            }),
        )
    }

    /// Rows of a 2-D table, e.g. an embedding lookup.
    pub fn index_select(&self, rows: &[usize]) -> Var {
        assert_eq!(self.ndim(), 2, "index_select expects a 2-D table");
        let n = self.shape()[0];
        assert!(rows.iter().all(|&r| r < n), "row index out of range");
        let value = self.value().select(Axis(0), rows);
        let rows = rows.to_vec();
        Var::op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.index_add(&rows, n))]),
        )
    }

    /// Scatter-adds the rows of `self` into a zero table with `n_rows` rows.
    pub fn index_add(&self, rows: &[usize], n_rows: usize) -> Var {
        assert_eq!(self.ndim(), 2, "index_add expects 2-D rows");
        assert_eq!(self.shape()[0], rows.len());
        let mut value = ArrayD::zeros(IxDyn(&[n_rows, self.shape()[1]]));
        for (k, &r) in rows.iter().enumerate() {
            let src = self.value().index_axis(Axis(0), k);
            let mut dst = value.index_axis_mut(Axis(0), r);
            dst += &src;
        }
        let rows = rows.to_vec();
        Var::op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.index_select(&rows))]),
        )
    }

    /// Log-softmax over `axis`.
    pub fn log_softmax(&self, axis: usize) -> Var {
        let shifted = self.sub(&self.max_keepdim_detached(axis));
        let lse = shifted.exp().sum_keepdim(&[axis]).log();
        shifted.sub(&lse)
    }
}
