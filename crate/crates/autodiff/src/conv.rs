//! Patch extraction (`unfold`) and its adjoint (`fold`), the building blocks
//! of convolution as a matrix product.

use ndarray::{ArrayD, IxDyn};

use crate::graph::Var;

/// Kernel, stride and zero padding of a 2-D sliding window.
///
/// 1-D convolutions over `[B, C, T]` are expressed with height 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// (top, bottom)
    pub pad_h: (usize, usize),
    /// (left, right)
    pub pad_w: (usize, usize),
}

impl ConvGeometry {
    /// 1-D window along the last axis.
    pub fn along_time(kernel: usize, stride: usize, pad: (usize, usize)) -> Self {
        ConvGeometry {
            kernel: (1, kernel),
            stride: (1, stride),
            pad_h: (0, 0),
            pad_w: pad,
        }
    }

    /// Square window with the same padding on every side.
    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            pad_h: (pad, pad),
            pad_w: (pad, pad),
        }
    }

    pub fn out_size(&self, height: usize, width: usize) -> (usize, usize) {
        let span_h = height + self.pad_h.0 + self.pad_h.1;
        let span_w = width + self.pad_w.0 + self.pad_w.1;
        assert!(
            span_h >= self.kernel.0 && span_w >= self.kernel.1,
            "input {height}x{width} smaller than kernel {:?}",
            self.kernel
        );
        (
            (span_h - self.kernel.0) / self.stride.0 + 1,
            (span_w - self.kernel.1) / self.stride.1 + 1,
        )
    }
}

/// Visits every (column-matrix index, input index) pair covered by the window.
fn for_each_tap(shape: [usize; 4], geom: ConvGeometry, mut f: impl FnMut(usize, usize)) {
    let [b_n, c_n, h, w] = shape;
    let (kh, kw) = geom.kernel;
    let (oh_n, ow_n) = geom.out_size(h, w);
    let cols = b_n * oh_n * ow_n;
    for b in 0..b_n {
        for c in 0..c_n {
            for i in 0..kh {
                for j in 0..kw {
                    let row = (c * kh + i) * kw + j;
                    for oh in 0..oh_n {
                        let ih = (oh * geom.stride.0 + i) as isize - geom.pad_h.0 as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let in_base = ((b * c_n + c) * h + ih as usize) * w;
                        let col_base = row * cols + (b * oh_n + oh) * ow_n;
                        for ow in 0..ow_n {
                            let iw = (ow * geom.stride.1 + j) as isize - geom.pad_w.0 as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            f(col_base + ow, in_base + iw as usize);
                        }
                    }
                }
            }
        }
    }
}

fn shape4(shape: &[usize]) -> [usize; 4] {
    shape
        .try_into()
        .unwrap_or_else(|_| panic!("expected a 4-D [B, C, H, W] tensor, got {shape:?}"))
}

impl Var {
    /// `[B, C, H, W]` → `[C·kh·kw, B·H'·W']` patch matrix.
    pub fn unfold(&self, geom: ConvGeometry) -> Var {
        let shape = shape4(self.shape());
        let [b, c, h, w] = shape;
        let (oh, ow) = geom.out_size(h, w);
        let rows = c * geom.kernel.0 * geom.kernel.1;
        let mut out = vec![0.0; rows * b * oh * ow];
        {
            let input = self.value().as_standard_layout();
            let src = input.as_slice().expect("standard layout");
            for_each_tap(shape, geom, |col, inp| out[col] = src[inp]);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[rows, b * oh * ow]), out).unwrap();
        Var::op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.fold(geom, shape))]),
        )
    }

    /// Adjoint of [`Var::unfold`]: scatter-adds patches back to `[B, C, H, W]`.
    pub fn fold(&self, geom: ConvGeometry, input_shape: [usize; 4]) -> Var {
        let [b, c, h, w] = input_shape;
        let (oh, ow) = geom.out_size(h, w);
        assert_eq!(
            self.shape(),
            &[c * geom.kernel.0 * geom.kernel.1, b * oh * ow],
            "fold input does not match geometry"
        );
        let mut out = vec![0.0; b * c * h * w];
        {
            let cols = self.value().as_standard_layout();
            let src = cols.as_slice().expect("standard layout");
            for_each_tap(input_shape, geom, |col, inp| out[inp] += src[col]);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&input_shape), out).unwrap();
        Var::op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.unfold(geom))]),
        )
    }
}
