//! Dense 3D convolution kernels.
//!
//! The input is copied into a zero-padded buffer and the output is
//! accumulated in the padded buffer's strides, so every kernel tap becomes a
//! single long contiguous `axpy`/`dot` over the whole volume. Positions
//! that fall outside the valid output are computed and then discarded.

use super::tensor::{axpy, dot, Real, Shape};
use super::Padding;
use crate::error::{Error, Result};
use crate::volume::Dims;

#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub in_dims: Dims,
    pub out_dims: Dims,
    pub kernel: [usize; 3],
    pad_lo: [usize; 3],
    padded: Dims,
}

impl ConvGeom {
    pub fn new(input: Shape, out_c: usize, kernel: [usize; 3], padding: Padding) -> Result<Self> {
        let mut pad_lo = [0; 3];
        let mut padded = [0; 3];
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let (n, k) = (input.dims[a], kernel[a]);
            match padding {
                Padding::Same => {
                    pad_lo[a] = (k - 1) / 2;
                    padded[a] = n + k - 1;
                    out_dims[a] = n;
                }
                Padding::Valid => {
                    if k > n {
                        return Err(Error::Shape(format!(
                            "kernel {kernel:?} larger than input {:?}",
                            input.dims
                        )));
                    }
                    padded[a] = n;
                    out_dims[a] = n - k + 1;
                }
            }
        }
        Ok(ConvGeom {
            in_c: input.channels,
            out_c,
            in_dims: input.dims,
            out_dims,
            kernel,
            pad_lo,
            padded,
        })
    }

    fn plane(&self) -> usize {
        self.padded[0] * self.padded[1] * self.padded[2]
    }

    /// Number of strided positions spanned by the valid outputs.
    fn span(&self) -> usize {
        let [sx, sy, _] = self.padded;
        let [ox, oy, oz] = self.out_dims;
        (ox - 1) + sx * ((oy - 1) + sy * (oz - 1)) + 1
    }

    fn taps(&self) -> impl Iterator<Item = usize> + '_ {
        let [kx, ky, kz] = self.kernel;
        let [sx, sy, _] = self.padded;
        (0..kz).flat_map(move |z| {
            (0..ky).flat_map(move |y| (0..kx).map(move |x| x + sx * (y + sy * z)))
        })
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn pad<T: Real>(&self, x: &[T]) -> Vec<T> {
        let [nx, ny, nz] = self.in_dims;
        let [sx, sy, _] = self.padded;
        let [px, py, pz] = self.pad_lo;
        let plane = self.plane();
        let mut out = vec![T::zero(); self.in_c * plane];
        for c in 0..self.in_c {
            for z in 0..nz {
                for y in 0..ny {
                    let src = c * nx * ny * nz + nx * (y + ny * z);
                    let dst = c * plane + px + sx * ((y + py) + sy * (z + pz));
                    out[dst..dst + nx].copy_from_slice(&x[src..src + nx]);
                }
            }
        }
        out
    }

    /// Strided accumulator -> dense output channel.
    fn gather<T: Real>(&self, acc: &[T], out: &mut [T]) {
        let [ox, oy, oz] = self.out_dims;
        let [sx, sy, _] = self.padded;
        for z in 0..oz {
            for y in 0..oy {
                let s = sx * (y + sy * z);
                let d = ox * (y + oy * z);
                out[d..d + ox].copy_from_slice(&acc[s..s + ox]);
            }
        }
    }

    /// Dense output channel -> strided buffer with zeros at discarded slots.
    fn scatter<T: Real>(&self, g: &[T], acc: &mut [T]) {
        acc.fill(T::zero());
        let [ox, oy, oz] = self.out_dims;
        let [sx, sy, _] = self.padded;
        for z in 0..oz {
            for y in 0..oy {
                let s = sx * (y + sy * z);
                let d = ox * (y + oy * z);
                acc[s..s + ox].copy_from_slice(&g[d..d + ox]);
            }
        }
    }

    fn unpad<T: Real>(&self, padded: &[T]) -> Vec<T> {
        let [nx, ny, nz] = self.in_dims;
        let [sx, sy, _] = self.padded;
        let [px, py, pz] = self.pad_lo;
        let plane = self.plane();
        let mut out = Vec::with_capacity(self.in_c * nx * ny * nz);
        for c in 0..self.in_c {
            for z in 0..nz {
                for y in 0..ny {
                    let s = c * plane + px + sx * ((y + py) + sy * (z + pz));
                    out.extend_from_slice(&padded[s..s + nx]);
                }
            }
        }
        out
    }

    /// `weights` is `[out_c][in_c][kz][ky][kx]`.
    pub fn forward<T: Real>(&self, x: &[T], weights: &[T], bias: &[T]) -> Vec<T> {
        let padded = self.pad(x);
        let (plane, span, kv) = (self.plane(), self.span(), self.kernel_volume());
        let taps: Vec<usize> = self.taps().collect();
        let out_len = self.out_dims.iter().product::<usize>();
        let mut out = vec![T::zero(); self.out_c * out_len];
        let mut acc = vec![T::zero(); span];
        for oc in 0..self.out_c {
            acc.fill(bias[oc]);
            for ic in 0..self.in_c {
                let w = &weights[(oc * self.in_c + ic) * kv..][..kv];
                let base = ic * plane;
                for (&wk, &off) in w.iter().zip(&taps) {
                    axpy(wk, &padded[base + off..base + off + span], &mut acc);
                }
            }
            self.gather(&acc, &mut out[oc * out_len..(oc + 1) * out_len]);
        }
        out
    }

    /// Returns `(d input, d weights, d bias)`; the input gradient is skipped
    /// when `want_input` is false.
    pub fn backward<T: Real>(
        &self,
        x: &[T],
        grad_out: &[T],
        weights: &[T],
        want_input: bool,
    ) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
        let padded = self.pad(x);
        let (plane, span, kv) = (self.plane(), self.span(), self.kernel_volume());
        let taps: Vec<usize> = self.taps().collect();
        let out_len = self.out_dims.iter().product::<usize>();
        let mut d_w = vec![T::zero(); weights.len()];
        let mut d_b = vec![T::zero(); self.out_c];
        let mut d_in = want_input.then(|| vec![T::zero(); self.in_c * plane]);
        let mut g = vec![T::zero(); span];
        for oc in 0..self.out_c {
            let go = &grad_out[oc * out_len..(oc + 1) * out_len];
            d_b[oc] = go.iter().copied().sum();
            self.scatter(go, &mut g);
            for ic in 0..self.in_c {
                let wi = (oc * self.in_c + ic) * kv;
                let base = ic * plane;
                for (k, &off) in taps.iter().enumerate() {
                    d_w[wi + k] = dot(&g, &padded[base + off..base + off + span]);
                    if let Some(d_in) = d_in.as_mut() {
                        axpy(weights[wi + k], &g, &mut d_in[base + off..base + off + span]);
                    }
                }
            }
        }
        (d_in.map(|p| self.unpad(&p)), d_w, d_b)
    }

    /// Transposed convolution of `grad_out` only (no weight gradient).
    pub fn backward_input<T: Real>(&self, grad_out: &[T], weights: &[T]) -> Vec<T> {
        let (plane, span, kv) = (self.plane(), self.span(), self.kernel_volume());
        let taps: Vec<usize> = self.taps().collect();
        let out_len = self.out_dims.iter().product::<usize>();
        let mut d_in = vec![T::zero(); self.in_c * plane];
        let mut g = vec![T::zero(); span];
        for oc in 0..self.out_c {
            self.scatter(&grad_out[oc * out_len..(oc + 1) * out_len], &mut g);
            for ic in 0..self.in_c {
                let wi = (oc * self.in_c + ic) * kv;
                let base = ic * plane;
                for (k, &off) in taps.iter().enumerate() {
                    axpy(weights[wi + k], &g, &mut d_in[base + off..base + off + span]);
                }
            }
        }
        self.unpad(&d_in)
    }
}
