//! Raw NCHW kernels behind the differentiable ops. All buffers are row-major.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Offsets of tap `(ky, kx)` relative to the output pixel.
    fn shift(&self, ky: usize, kx: usize) -> (isize, isize) {
        (ky as isize - (self.kh / 2) as isize, kx as isize - (self.kw / 2) as isize)
    }
}

/// Output positions `i` in `0..len` for which `i + d` is also in range, or
/// `None` when the tap falls entirely outside (kernel wider than the input).
#[inline]
fn span(len: usize, d: isize) -> Option<(usize, usize)> {
    let start = (-d).max(0) as usize;
    let end = (len as isize - d).clamp(0, len as isize) as usize;
    (start < end).then_some((start, end))
}

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Zero-padded "same" cross-correlation, stride 1.
pub(crate) fn conv2d_forward(input: &[f64], weight: &[f64], bias: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane = g.plane();
    let taps = g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.c_out * plane];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let out_plane = &mut out[(n * g.c_out + co) * plane..][..plane];
            out_plane.fill(bias[co]);
            for y in 0..g.h {
                let out_row = &mut out_plane[y * g.w..][..g.w];
                for ci in 0..g.c_in {
                    let in_plane = &input[(n * g.c_in + ci) * plane..][..plane];
                    let wk = &weight[(co * g.c_in + ci) * taps..][..taps];
                    for ky in 0..g.kh {
                        let (dy, _) = g.shift(ky, 0);
                        let yi = y as isize + dy;
                        if yi < 0 || yi >= g.h as isize {
                            continue;
                        }
                        let in_row = &in_plane[yi as usize * g.w..][..g.w];
                        for kx in 0..g.kw {
                            let (_, dx) = g.shift(ky, kx);
                            let Some((x0, x1)) = span(g.w, dx) else { continue };
                            let xs = (x0 as isize + dx) as usize;
                            axpy(&mut out_row[x0..x1], wk[ky * g.kw + kx], &in_row[xs..xs + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_input(grad_out: &[f64], weight: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane = g.plane();
    let taps = g.kh * g.kw;
    let mut grad_in = vec![0.0; g.n * g.c_in * plane];
    for n in 0..g.n {
        for ci in 0..g.c_in {
            let gin_plane = &mut grad_in[(n * g.c_in + ci) * plane..][..plane];
            for yi in 0..g.h {
                let gin_row = &mut gin_plane[yi * g.w..][..g.w];
                for co in 0..g.c_out {
                    let gout_plane = &grad_out[(n * g.c_out + co) * plane..][..plane];
                    let wk = &weight[(co * g.c_in + ci) * taps..][..taps];
                    for ky in 0..g.kh {
                        let (dy, _) = g.shift(ky, 0);
                        let yo = yi as isize - dy;
                        if yo < 0 || yo >= g.h as isize {
                            continue;
                        }
                        let gout_row = &gout_plane[yo as usize * g.w..][..g.w];
                        for kx in 0..g.kw {
                            let (_, dx) = g.shift(ky, kx);
                            let Some((x0, x1)) = span(g.w, dx) else { continue };
                            let xs = (x0 as isize + dx) as usize;
                            axpy(&mut gin_row[xs..xs + (x1 - x0)], wk[ky * g.kw + kx], &gout_row[x0..x1]);
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Returns `(grad_weight, grad_bias)`.
pub(crate) fn conv2d_backward_params(grad_out: &[f64], input: &[f64], g: ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let plane = g.plane();
    let taps = g.kh * g.kw;
    let mut gw = vec![0.0; g.c_out * g.c_in * taps];
    let mut gb = vec![0.0; g.c_out];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let gout_plane = &grad_out[(n * g.c_out + co) * plane..][..plane];
            gb[co] += gout_plane.iter().sum::<f64>();
            for ci in 0..g.c_in {
                let in_plane = &input[(n * g.c_in + ci) * plane..][..plane];
                let gwk = &mut gw[(co * g.c_in + ci) * taps..][..taps];
                for y in 0..g.h {
                    let gout_row = &gout_plane[y * g.w..][..g.w];
                    for ky in 0..g.kh {
                        let (dy, _) = g.shift(ky, 0);
                        let yi = y as isize + dy;
                        if yi < 0 || yi >= g.h as isize {
                            continue;
                        }
                        let in_row = &in_plane[yi as usize * g.w..][..g.w];
                        for kx in 0..g.kw {
                            let (_, dx) = g.shift(ky, kx);
                            let Some((x0, x1)) = span(g.w, dx) else { continue };
                            let xs = (x0 as isize + dx) as usize;
                            gwk[ky * g.kw + kx] += dot(&gout_row[x0..x1], &in_row[xs..xs + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
    (gw, gb)
}

/// 2x2 stride-2 max pooling. Returns the pooled values and, for each output,
/// the flat input index of the winning element (first maximum in row-major
/// window order).
pub(crate) fn maxpool2_forward(input: &[f64], nc: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * ho * wo);
    let mut arg = Vec::with_capacity(nc * ho * wo);
    for p in 0..nc {
        let base = p * h * w;
        for y in 0..ho {
            for x in 0..wo {
                let i0 = base + 2 * y * w + 2 * x;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct UpGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

/// Stride-2 transposed convolution with a `[C_in, C_out, 2, 2]` kernel.
pub(crate) fn tconv2_forward(input: &[f64], kernel: &[f64], bias: &[f64], g: UpGeom) -> Vec<f64> {
    let (ho, wo) = (2 * g.h, 2 * g.w);
    let mut out = vec![0.0; g.n * g.c_out * ho * wo];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let out_plane = &mut out[(n * g.c_out + co) * ho * wo..][..ho * wo];
            out_plane.fill(bias[co]);
            for ci in 0..g.c_in {
                let in_plane = &input[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                let k = &kernel[(ci * g.c_out + co) * 4..][..4];
                for y in 0..g.h {
                    let in_row = &in_plane[y * g.w..][..g.w];
                    for dy in 0..2 {
                        let out_row = &mut out_plane[(2 * y + dy) * wo..][..wo];
                        let (k0, k1) = (k[2 * dy], k[2 * dy + 1]);
                        for (pair, &v) in out_row.chunks_exact_mut(2).zip(in_row) {
                            pair[0] += v * k0;
                            pair[1] += v * k1;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn tconv2_backward_input(grad_out: &[f64], kernel: &[f64], g: UpGeom) -> Vec<f64> {
    let (ho, wo) = (2 * g.h, 2 * g.w);
    let mut grad_in = vec![0.0; g.n * g.c_in * g.h * g.w];
    for n in 0..g.n {
        for ci in 0..g.c_in {
            let gin_plane = &mut grad_in[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
            for co in 0..g.c_out {
                let gout_plane = &grad_out[(n * g.c_out + co) * ho * wo..][..ho * wo];
                let k = &kernel[(ci * g.c_out + co) * 4..][..4];
                for y in 0..g.h {
                    let gin_row = &mut gin_plane[y * g.w..][..g.w];
                    for dy in 0..2 {
                        let gout_row = &gout_plane[(2 * y + dy) * wo..][..wo];
                        let (k0, k1) = (k[2 * dy], k[2 * dy + 1]);
                        for (gi, pair) in gin_row.iter_mut().zip(gout_row.chunks_exact(2)) {
                            *gi += pair[0] * k0 + pair[1] * k1;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Returns `(grad_kernel, grad_bias)`.
pub(crate) fn tconv2_backward_params(grad_out: &[f64], input: &[f64], g: UpGeom) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = (2 * g.h, 2 * g.w);
    let mut gk = vec![0.0; g.c_in * g.c_out * 4];
    let mut gb = vec![0.0; g.c_out];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let gout_plane = &grad_out[(n * g.c_out + co) * ho * wo..][..ho * wo];
            gb[co] += gout_plane.iter().sum::<f64>();
            for ci in 0..g.c_in {
                let in_plane = &input[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                let k = &mut gk[(ci * g.c_out + co) * 4..][..4];
                for y in 0..g.h {
                    let in_row = &in_plane[y * g.w..][..g.w];
                    for dy in 0..2 {
                        let gout_row = &gout_plane[(2 * y + dy) * wo..][..wo];
                        let (mut s0, mut s1) = (0.0, 0.0);
                        for (&v, pair) in in_row.iter().zip(gout_row.chunks_exact(2)) {
                            s0 += v * pair[0];
                            s1 += v * pair[1];
                        }
                        k[2 * dy] += s0;
                        k[2 * dy + 1] += s1;
                    }
                }
            }
        }
    }
    (gk, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_covers_valid_outputs() {
        assert_eq!(span(5, 0), Some((0, 5)));
        assert_eq!(span(5, -1), Some((1, 5)));
        assert_eq!(span(5, 2), Some((0, 3)));
        assert_eq!(span(3, 6), None);
        assert_eq!(span(3, -6), None);
        assert_eq!(span(3, -3), None);
    }
}
