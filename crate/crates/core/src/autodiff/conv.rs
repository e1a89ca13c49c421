//! im2col convolution kernels used by the `Conv2d` tape op.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                &[input, weight],
                "expected NCHW input and OC×C×KH×KW kernel",
            ));
        }
        if input[1] != weight[1] {
            return Err(Error::shape(
                "conv2d",
                &[input, weight],
                "input channels differ from kernel channels",
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (h, w, kh, kw) = (input[2], input[3], weight[2], weight[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                &[input, weight],
                "kernel larger than padded input",
            ));
        }
        Ok(Geometry {
            n: input[0],
            c: input[1],
            h,
            w,
            oc: weight[0],
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad`
/// falls inside the image.
fn valid_span(g: &Geometry, kj: usize) -> (usize, usize) {
    let first = g.pad.saturating_sub(kj).div_ceil(g.stride);
    // last valid: ox·stride + kj − pad ≤ w − 1
    let limit = g.w + g.pad;
    let hi = if limit <= kj {
        0
    } else {
        ((limit - kj - 1) / g.stride + 1).min(g.ow)
    };
    (first.min(hi), hi)
}

/// Unfolds one image (C×H×W) into a `(C·KH·KW) × (OH·OW)` column matrix.
fn im2col<T: Scalar>(img: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.positions();
    for ch in 0..g.c {
        let plane = &img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ch * g.kh + ki) * g.kw + kj) * p;
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let x0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[x0..x0 + (hi - lo)]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[x0..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, img: &mut [T]) {
    let p = g.positions();
    for ch in 0..g.c {
        let plane = &mut img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ch * g.kh + ki) * g.kw + kj) * p;
                let (lo, hi) = valid_span(g, kj);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * g.stride + kj - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow + lo..row + oy * g.ow + hi];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        for (d, &v) in dst[x0..x0 + (hi - lo)].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[x0..].iter_mut().step_by(g.stride).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), weight.shape(), stride, pad)?;
    let (k, p) = (g.patch(), g.positions());
    let img_len = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); g.n * g.oc * p];
    for (img, dst) in input.data().chunks_exact(img_len).zip(out.chunks_exact_mut(g.oc * p)) {
        im2col(img, &g, &mut cols);
        // outᵀ (P×OC) = colsᵀ · Wᵀ, written straight into the OC×P block
        T::gemm(
            p,
            k,
            g.oc,
            T::one(),
            &cols,
            (1, p),
            weight.data(),
            (1, k),
            T::zero(),
            dst,
            (1, p),
        );
    }
    Ok(Tensor::from_parts(vec![g.n, g.oc, g.oh, g.ow], out))
}

/// Returns (input gradient, weight gradient), each only when requested.
/// Weight gradients are summed over the batch in index order.
pub(super) fn backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = Geometry::new(input.shape(), weight.shape(), stride, pad).expect("geometry validated in forward");
    let (k, p) = (g.patch(), g.positions());
    let img_len = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); k * p];
    let mut gw = want_weight.then(|| vec![T::zero(); g.oc * k]);
    let mut gi = want_input.then(|| vec![T::zero(); input.len()]);

    for b in 0..g.n {
        let go = &grad_out.data()[b * g.oc * p..(b + 1) * g.oc * p];
        if let Some(gw) = gw.as_mut() {
            im2col(&input.data()[b * img_len..(b + 1) * img_len], &g, &mut cols);
            // dW += dOut · colsᵀ
            T::gemm(g.oc, p, k, T::one(), go, (p, 1), &cols, (1, p), T::one(), gw, (k, 1));
        }
        if let Some(gi) = gi.as_mut() {
            // dcols = Wᵀ · dOut
            T::gemm(
                k,
                g.oc,
                p,
                T::one(),
                weight.data(),
                (1, k),
                go,
                (p, 1),
                T::zero(),
                &mut cols,
                (p, 1),
            );
            col2im(&cols, &g, &mut gi[b * img_len..(b + 1) * img_len]);
        }
    }
    (
        gi.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
    )
}
