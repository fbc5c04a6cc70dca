use rand::Rng;

use super::layers::Linear;
use super::params::{ParamBuilder, Params};

/// 2-D convolution over HWC tensors (`data[(y * w + x) * c + ch]`),
/// implemented as im2col followed by a dense layer.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub dense: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape3 {
    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Conv2d {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let dense = Linear::new(pb, name, kernel * kernel * cin, cout, rng);
        Self {
            dense,
            kernel,
            stride,
            pad,
            cin,
            cout,
        }
    }

    pub fn out_shape(&self, s: Shape3) -> Shape3 {
        debug_assert_eq!(s.c, self.cin);
        Shape3 {
            h: (s.h + 2 * self.pad - self.kernel) / self.stride + 1,
            w: (s.w + 2 * self.pad - self.kernel) / self.stride + 1,
            c: self.cout,
        }
    }

    fn im2col(&self, x: &[f64], s: Shape3) -> Vec<f64> {
        let o = self.out_shape(s);
        let row_len = self.kernel * self.kernel * self.cin;
        let mut col = vec![0.0; o.h * o.w * row_len];
        for oy in 0..o.h {
            for ox in 0..o.w {
                let base = (oy * o.w + ox) * row_len;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let src = (iy as usize * s.w + ix as usize) * self.cin;
                        let dst = base + (ky * self.kernel + kx) * self.cin;
                        col[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &[f64], s: Shape3) -> Vec<f64> {
        let o = self.out_shape(s);
        let row_len = self.kernel * self.kernel * self.cin;
        let mut dx = vec![0.0; s.len()];
        for oy in 0..o.h {
            for ox in 0..o.w {
                let base = (oy * o.w + ox) * row_len;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * s.w + ix as usize) * self.cin;
                        let src = base + (ky * self.kernel + kx) * self.cin;
                        for c in 0..self.cin {
                            dx[dst + c] += dcol[src + c];
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col buffer needed for backward.
    pub fn forward(&self, p: &Params, x: &[f64], s: Shape3) -> (Vec<f64>, Vec<f64>) {
        let o = self.out_shape(s);
        let col = self.im2col(x, s);
        let y = self.dense.forward(p, &col, o.h * o.w);
        (y, col)
    }

    /// Accumulates parameter gradients; returns `dx` when `need_input_grad`.
    pub fn backward(
        &self,
        p: &Params,
        col: &[f64],
        dy: &[f64],
        s: Shape3,
        grads: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let o = self.out_shape(s);
        let rows = o.h * o.w;
        if need_input_grad {
            let dcol = self.dense.backward(p, col, dy, rows, grads);
            Some(self.col2im(&dcol, s))
        } else {
            self.dense.backward_params(col, dy, rows, grads);
            None
        }
    }
}
