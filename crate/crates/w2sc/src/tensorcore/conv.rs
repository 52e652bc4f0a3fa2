//! Shared im2col / col2im convolution routines. `conv_forward`,
//! `conv_backward_input` and `conv_backward_weight` serve both conv2d and its
//! transpose (the transpose forward is `conv_backward_input` of the mirror
//! convolution).

use super::{Element, Padding, TensorData};

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Resolve output sizes and padding. `valid`: floor((in-k)/s)+1.
    /// `same`: out = ceil(in/s), zero total padding split with the extra
    /// element on the trailing side.
    pub fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<ConvGeom, String> {
        let [n, c_in, h, w] = match x_shape {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => return Err(format!("conv input must be 4-D, got {:?}", x_shape)),
        };
        let [c_out, wc, kh, kw] = match w_shape {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => return Err(format!("conv weight must be 4-D, got {:?}", w_shape)),
        };
        if wc != c_in {
            return Err(format!(
                "conv channel mismatch: input has {c_in}, weight expects {wc}"
            ));
        }
        let (sh, sw) = stride;
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(format!(
                        "valid conv kernel {kh}x{kw} larger than input {h}x{w}"
                    ));
                }
                (((h - kh) / sh) + 1, ((w - kw) / sw) + 1, 0, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(sh);
                let ow = w.div_ceil(sw);
                let ph = ((oh - 1) * sh + kh).saturating_sub(h);
                let pw = ((ow - 1) * sw + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        if oh == 0 || ow == 0 {
            return Err("conv output has zero size".into());
        }
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            sh,
            sw,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn patches(&self) -> usize {
        self.oh * self.ow
    }
}

/// Lower one sample into a (c_in*kh*kw) x (oh*ow) column matrix.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let patches = g.patches();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * patches;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.pad_top as isize;
                    let base = row + oy * g.ow;
                    if iy < 0 || iy >= g.h as isize {
                        cols[base..base + g.ow].fill(T::zero());
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.sw + kx) as isize - g.pad_left as isize;
                        cols[base + ox] = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            plane[iy * g.w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto one input sample.
fn col2im<T: Element>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let patches = g.patches();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * patches;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.sw + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        plane[iy * g.w + ix as usize] += cols[row + oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// y[n] = W_mat (c_out x k) . cols[n] (k x patches)
pub fn conv_forward<T: Element>(g: &ConvGeom, x: &TensorData<T>, w: &TensorData<T>) -> TensorData<T> {
    let k = g.col_rows();
    let p = g.patches();
    let mut cols = vec![T::zero(); k * p];
    let mut out = TensorData::zeros(vec![g.n, g.c_out, g.oh, g.ow]);
    for n in 0..g.n {
        im2col(g, &x.data[n * g.c_in * g.h * g.w..], &mut cols);
        let y = &mut out.data[n * g.c_out * p..(n + 1) * g.c_out * p];
        T::gemm(
            g.c_out,
            k,
            p,
            T::one(),
            &w.data,
            k as isize,
            1,
            &cols,
            p as isize,
            1,
            T::zero(),
            y,
            p as isize,
            1,
        );
    }
    out
}

/// dx[n] = col2im(W_mat^T . dy[n])
pub fn conv_backward_input<T: Element>(
    g: &ConvGeom,
    dy: &[T],
    w: &TensorData<T>,
) -> TensorData<T> {
    let k = g.col_rows();
    let p = g.patches();
    let mut dcols = vec![T::zero(); k * p];
    let mut dx = TensorData::zeros(vec![g.n, g.c_in, g.h, g.w]);
    for n in 0..g.n {
        T::gemm(
            k,
            g.c_out,
            p,
            T::one(),
            &w.data,
            1,
            k as isize,
            &dy[n * g.c_out * p..],
            p as isize,
            1,
            T::zero(),
            &mut dcols,
            p as isize,
            1,
        );
        col2im(
            g,
            &dcols,
            &mut dx.data[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w],
        );
    }
    dx
}

/// dW = sum_n dy[n] . cols[n]^T
pub fn conv_backward_weight<T: Element>(
    g: &ConvGeom,
    x: &[T],
    dy: &[T],
) -> TensorData<T> {
    let k = g.col_rows();
    let p = g.patches();
    let mut cols = vec![T::zero(); k * p];
    let mut dw = TensorData::zeros(vec![g.c_out, g.c_in, g.kh, g.kw]);
    for n in 0..g.n {
        im2col(g, &x[n * g.c_in * g.h * g.w..], &mut cols);
        T::gemm(
            g.c_out,
            p,
            k,
            T::one(),
            &dy[n * g.c_out * p..],
            p as isize,
            1,
            &cols,
            1,
            p as isize,
            T::one(),
            &mut dw.data,
            k as isize,
            1,
        );
    }
    dw
}
