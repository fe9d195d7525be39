//! Stride-1 2-D cross-correlation via im2col and GEMM.
//!
//! The kernel is NOT flipped: `out[n,o,y,x] = Σ_{c,i,j} in[n,c,y+i-top,x+j-left] · k[o,c,i,j]`,
//! with out-of-bounds reads taken as zero. Every image of a batch is
//! processed by its own GEMM calls in a fixed order, so a given output
//! value is bitwise independent of the other images in the batch.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero padding per side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub const NONE: Pad = Pad {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn uniform(p: usize) -> Self {
        Pad {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Pad {
            top,
            bottom,
            left,
            right,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pad: Pad,
}

impl Geometry {
    fn new(input: &Tensor, kernel: &Tensor, pad: Pad) -> Result<Self> {
        let (n, cin, h, w) = input.dims4("conv2d")?;
        let (cout, kcin, kh, kw) = kernel.dims4("conv2d")?;
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        let hp = h + pad.top + pad.bottom;
        let wp = w + pad.left + pad.right;
        if hp < kh || wp < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}"),
            ));
        }
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: hp - kh + 1,
            wo: wp - kw + 1,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 kernel without padding reads the image directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == Pad::NONE
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let hw = self.out_hw();
        for c in 0..self.cin {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * hw..][..hw];
                    for y in 0..self.ho {
                        let dst = &mut row[y * self.wo..(y + 1) * self.wo];
                        let sy = (y + i) as isize - self.pad.top as isize;
                        if sy < 0 || sy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[sy as usize * self.w..(sy as usize + 1) * self.w];
                        for (x, d) in dst.iter_mut().enumerate() {
                            let sx = (x + j) as isize - self.pad.left as isize;
                            *d = if sx < 0 || sx >= self.w as isize {
                                0.0
                            } else {
                                src[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], image: &mut [f64]) {
        let hw = self.out_hw();
        for c in 0..self.cin {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * hw..][..hw];
                    for y in 0..self.ho {
                        let sy = (y + i) as isize - self.pad.top as isize;
                        if sy < 0 || sy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[sy as usize * self.w..(sy as usize + 1) * self.w];
                        for x in 0..self.wo {
                            let sx = (x + j) as isize - self.pad.left as isize;
                            if sx >= 0 && sx < self.w as isize {
                                dst[sx as usize] += row[y * self.wo + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k > 0 {
        assert!(a.len() >= extent(m, k, rsa, csa));
        assert!(b.len() >= extent(k, n, rsb, csb));
    }
    assert!(c.len() >= extent(m, n, rsc, csc));
    // SAFETY: the asserts above bound every index the kernel can touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, pad: Pad) -> Result<Tensor> {
    let g = Geometry::new(input, kernel, pad)?;
    let (in_per, out_per, hw, patch) = (g.cin * g.h * g.w, g.cout * g.out_hw(), g.out_hw(), g.patch());
    let mut out = vec![0.0; g.n * out_per];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * hw]
    };
    for n in 0..g.n {
        let image = &input.data()[n * in_per..(n + 1) * in_per];
        let b: &[f64] = if g.is_pointwise() {
            image
        } else {
            g.im2col(image, &mut cols);
            &cols
        };
        gemm(
            g.cout,
            patch,
            hw,
            kernel.data(),
            (patch, 1),
            b,
            (hw, 1),
            0.0,
            &mut out[n * out_per..(n + 1) * out_per],
            (hw, 1),
        );
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

/// Gradients of `conv2d` with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    pad: Pad,
    grad_out: &Tensor,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = Geometry::new(input, kernel, pad)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad {:?}", grad_out.shape()),
        ));
    }
    let (in_per, out_per, hw, patch) = (g.cin * g.h * g.w, g.cout * g.out_hw(), g.out_hw(), g.patch());
    let mut d_input = want_input.then(|| vec![0.0; g.n * in_per]);
    let mut d_kernel = want_kernel.then(|| vec![0.0; kernel.numel()]);
    let mut cols = vec![0.0; patch * hw];
    let mut d_cols = vec![0.0; patch * hw];
    for n in 0..g.n {
        let go = &grad_out.data()[n * out_per..(n + 1) * out_per];
        let image = &input.data()[n * in_per..(n + 1) * in_per];
        if let Some(dk) = d_kernel.as_mut() {
            let b: &[f64] = if g.is_pointwise() {
                image
            } else {
                g.im2col(image, &mut cols);
                &cols
            };
            // dK += dOut · colsᵀ
            gemm(g.cout, hw, patch, go, (hw, 1), b, (1, hw), 1.0, dk, (patch, 1));
        }
        if let Some(di) = d_input.as_mut() {
            let dst = &mut di[n * in_per..(n + 1) * in_per];
            if g.is_pointwise() {
                gemm(patch, g.cout, hw, kernel.data(), (1, patch), go, (hw, 1), 0.0, dst, (hw, 1));
            } else {
                // dCols = Kᵀ · dOut, then scatter back onto the image.
                gemm(
                    patch,
                    g.cout,
                    hw,
                    kernel.data(),
                    (1, patch),
                    go,
                    (hw, 1),
                    0.0,
                    &mut d_cols,
                    (hw, 1),
                );
                g.col2im_add(&d_cols, dst);
            }
        }
    }
    let d_input = d_input
        .map(|d| Tensor::new(input.shape(), d))
        .transpose()?;
    let d_kernel = d_kernel
        .map(|d| Tensor::new(kernel.shape(), d))
        .transpose()?;
    Ok((d_input, d_kernel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive(input: &Tensor, kernel: &Tensor, pad: Pad) -> Tensor {
        let (n, cin, h, w) = input.dims4("t").unwrap();
        let (cout, _, kh, kw) = kernel.dims4("t").unwrap();
        let ho = h + pad.top + pad.bottom - kh + 1;
        let wo = w + pad.left + pad.right - kw + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for b in 0..n {
            for o in 0..cout {
                for y in 0..ho {
                    for x in 0..wo {
                        let mut s = 0.0;
                        for c in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let sy = (y + i) as isize - pad.top as isize;
                                    let sx = (x + j) as isize - pad.left as isize;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                        s += input.at(&[b, c, sy as usize, sx as usize])
                                            * kernel.at(&[o, c, i, j]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, o, y, x], s);
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Rng::new(1);
        let x = random(&[2, 1, 4, 5], &mut rng);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k, Pad::NONE).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::ones(&[1, 1, 5, 5]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, Pad::uniform(1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert_eq!(y.at(&[0, 0, 2, 2]), 9.0);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 4, 4]), 4.0);
        assert_eq!(y.at(&[0, 0, 0, 2]), 6.0);
    }

    #[test]
    fn no_flip_single_output() {
        let mut rng = Rng::new(2);
        let x = random(&[1, 1, 2, 2], &mut rng);
        let k = random(&[1, 1, 2, 2], &mut rng);
        let y = conv2d(&x, &k, Pad::NONE).unwrap();
        let dot: f64 = x.data().iter().zip(k.data()).map(|(a, b)| a * b).sum();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert!((y.item() - dot).abs() < 1e-14);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = Rng::new(3);
        for &(pad, kh, kw) in &[
            (Pad::uniform(1), 3, 3),
            (Pad::new(2, 0, 2, 2), 3, 5),
            (Pad::new(0, 0, 1, 0), 1, 2),
            (Pad::NONE, 1, 1),
            (Pad::new(1, 0, 0, 3), 2, 2),
        ] {
            let x = random(&[2, 3, 5, 6], &mut rng);
            let k = random(&[4, 3, kh, kw], &mut rng);
            let fast = conv2d(&x, &k, pad).unwrap();
            let slow = naive(&x, &k, pad);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{pad:?} {kh}x{kw}");
        }
    }

    #[test]
    fn batch_items_are_independent_bitwise() {
        let mut rng = Rng::new(4);
        let x = random(&[3, 2, 6, 6], &mut rng);
        let k = random(&[5, 2, 3, 3], &mut rng);
        let all = conv2d(&x, &k, Pad::uniform(1)).unwrap();
        let one = conv2d(&x.batch_item(1), &k, Pad::uniform(1)).unwrap();
        assert_eq!(all.batch_item(1), one);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let k = Tensor::zeros(&[1, 3, 1, 1]);
        assert!(conv2d(&x, &k, Pad::NONE).is_err());
    }
}
