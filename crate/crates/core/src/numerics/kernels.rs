//! Raw slice kernels behind the differentiable video ops.
//!
//! Every kernel works on one batch item laid out `[C, T, H, W]`; the graph
//! layer loops over the batch axis.

use super::gemm;
use super::tensor::{MatRef, Scalar};
use crate::error::{MavrError, Result};

/// Extents of a 3D window operation (convolution or pooling).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geom3 {
    pub cin: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

const AXES: [&str; 3] = ["T", "H", "W"];

impl Geom3 {
    pub fn new(
        op: &'static str,
        cin: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for ax in 0..3 {
            if stride[ax] == 0 {
                return Err(MavrError::shape(op, AXES[ax], "stride must be >= 1"));
            }
            if kernel[ax] == 0 || kernel[ax] > input[ax] + 2 * pad[ax] {
                return Err(MavrError::shape(
                    op,
                    AXES[ax],
                    format!(
                        "kernel {} exceeds padded extent {}",
                        kernel[ax],
                        input[ax] + 2 * pad[ax]
                    ),
                ));
            }
            output[ax] = (input[ax] + 2 * pad[ax] - kernel[ax]) / stride[ax] + 1;
        }
        Ok(Self {
            cin,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Output range `[lo, hi)` along one axis whose tap `k` lands inside the input.
#[inline]
fn valid_outputs(k: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > k { (n_in + pad - k - 1) / stride + 1 } else { 0 };
    let hi = hi.min(n_out);
    (lo.min(hi), hi)
}

/// Unfolds one `[C,T,H,W]` item into `[C·kt·kh·kw, To·Ho·Wo]`.
pub fn im2col<T: Scalar>(g: &Geom3, x: &[T], col: &mut [T]) {
    im2col_rows(g, x, 0, g.output[0] * g.output[1], col);
}

/// [`im2col`] restricted to output rows `r0..r1`, where row `r` is the
/// `(r / Ho, r % Ho)` line of `Wo` positions. `col` has `(r1-r0)·Wo` columns.
pub fn im2col_rows<T: Scalar>(g: &Geom3, x: &[T], r0: usize, r1: usize, col: &mut [T]) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [_, ho, wo] = g.output;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let n = (r1 - r0) * wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * t_in * h_in * w_in..(ci + 1) * t_in * h_in * w_in];
        for a in 0..kt {
            for b in 0..kh {
                for c in 0..kw {
                    let (w0, w1) = valid_outputs(c, pw, sw, w_in, wo);
                    let dst = &mut col[row * n..(row + 1) * n];
                    row += 1;
                    for (r, line) in (r0..r1).zip(dst.chunks_exact_mut(wo)) {
                        let (ot, oh) = (r / ho, r % ho);
                        let (it, ih) = ((ot * st + a) as isize - pt as isize, (oh * sh + b) as isize - ph as isize);
                        if w0 == w1 || it < 0 || ih < 0 || it as usize >= t_in || ih as usize >= h_in {
                            line.fill(T::ZERO);
                            continue;
                        }
                        let start = (it as usize * h_in + ih as usize) * w_in;
                        let src = &xc[start..start + w_in];
                        line[..w0].fill(T::ZERO);
                        line[w1..].fill(T::ZERO);
                        let first = w0 * sw + c - pw;
                        if sw == 1 {
                            line[w0..w1].copy_from_slice(&src[first..first + (w1 - w0)]);
                        } else {
                            for (d, s) in line[w0..w1].iter_mut().zip(src[first..].iter().step_by(sw)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back into `dx` (accumulating).
pub fn col2im<T: Scalar>(g: &Geom3, col: &[T], dx: &mut [T]) {
    col2im_rows(g, col, 0, g.output[0] * g.output[1], dx);
}

/// Adjoint of [`im2col_rows`].
pub fn col2im_rows<T: Scalar>(g: &Geom3, col: &[T], r0: usize, r1: usize, dx: &mut [T]) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [_, ho, wo] = g.output;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let n = (r1 - r0) * wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * t_in * h_in * w_in..(ci + 1) * t_in * h_in * w_in];
        for a in 0..kt {
            for b in 0..kh {
                for c in 0..kw {
                    let (w0, w1) = valid_outputs(c, pw, sw, w_in, wo);
                    let src = &col[row * n..(row + 1) * n];
                    row += 1;
                    if w0 == w1 {
                        continue;
                    }
                    let first = w0 * sw + c - pw;
                    for (r, line) in (r0..r1).zip(src.chunks_exact(wo)) {
                        let (ot, oh) = (r / ho, r % ho);
                        let (it, ih) = ((ot * st + a) as isize - pt as isize, (oh * sh + b) as isize - ph as isize);
                        if it < 0 || ih < 0 || it as usize >= t_in || ih as usize >= h_in {
                            continue;
                        }
                        let start = (it as usize * h_in + ih as usize) * w_in;
                        let dst = &mut xc[start..start + w_in];
                        for (d, s) in dst[first..].iter_mut().step_by(sw).zip(&line[w0..w1]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Output rows per unfolding chunk, sized so one chunk of patches stays cache resident.
fn rows_per_chunk(g: &Geom3) -> usize {
    const TARGET_ELEMS: usize = 1 << 18;
    let wo = g.output[2];
    (TARGET_ELEMS / (g.patch_len() * wo).max(1)).max(1)
}

/// Phase-split zero-padded layout used by the implicit path.
///
/// The padded input is split by position modulo the stride into phase
/// images; output `o` with tap `k` reads phase `k mod s` at `o + k div s`.
/// Every output position is then a fixed offset into the flattened phase
/// image, and each (channel, tap) row of the unfolded matrix is a contiguous
/// slice of it, so nothing is unfolded.
struct Phased {
    dims: [usize; 3],
    /// Elements per channel, all phases.
    chan: usize,
    /// Flattened distance from the first output position to one past the last.
    span: usize,
}

impl Phased {
    fn new(g: &Geom3) -> Self {
        let dims = [0, 1, 2].map(|ax| (g.input[ax] + 2 * g.pad[ax]).div_ceil(g.stride[ax]));
        let phases: usize = g.stride.iter().product();
        let [to, ho, wo] = g.output;
        let plane = dims[1] * dims[2];
        Self {
            dims,
            chan: phases * dims[0] * plane,
            span: (to - 1) * plane + (ho - 1) * dims[2] + wo,
        }
    }

    /// Offset of padded coordinate `(t, h, w)` within one channel.
    fn locate(&self, g: &Geom3, t: usize, h: usize, w: usize) -> usize {
        let [st, sh, sw] = g.stride;
        let phase = ((t % st) * sh + h % sh) * sw + w % sw;
        let [d0, d1, d2] = self.dims;
        phase * d0 * d1 * d2 + ((t / st) * d1 + h / sh) * d2 + w / sw
    }

    /// Span position of output `(t, h, w)`.
    fn span_index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.dims[1] + h) * self.dims[2] + w
    }

    /// Lays out `[C, T, H, W]` input-shaped data, zero elsewhere.
    fn embed<T: Scalar>(&self, g: &Geom3, channels: usize, x: &[T], out: &mut Vec<T>) {
        let [t_in, h_in, w_in] = g.input;
        let [pt, ph, pw] = g.pad;
        out.clear();
        out.resize(channels * self.chan, T::ZERO);
        for ci in 0..channels {
            for t in 0..t_in {
                for h in 0..h_in {
                    let src = &x[((ci * t_in + t) * h_in + h) * w_in..][..w_in];
                    let base = ci * self.chan;
                    if g.stride[2] == 1 {
                        let dst = base + self.locate(g, t + pt, h + ph, pw);
                        out[dst..dst + w_in].copy_from_slice(src);
                    } else {
                        for (w, &v) in src.iter().enumerate() {
                            out[base + self.locate(g, t + pt, h + ph, w + pw)] = v;
                        }
                    }
                }
            }
        }
    }

    /// Row offsets of each (channel, tap) row; `flip` mirrors the taps.
    fn rows(&self, g: &Geom3, channels: usize, flip: bool) -> Vec<usize> {
        let [kt, kh, kw] = g.kernel;
        let mut rows = Vec::with_capacity(channels * kt * kh * kw);
        for ci in 0..channels {
            for a in 0..kt {
                for b in 0..kh {
                    for c in 0..kw {
                        let (a, b, c) = if flip { (kt - 1 - a, kh - 1 - b, kw - 1 - c) } else { (a, b, c) };
                        rows.push(ci * self.chan + self.locate(g, a, b, c));
                    }
                }
            }
        }
        rows
    }

    /// Moves between `[C, To, Ho, Wo]` and `[C, span]` (which is zero off-grid).
    fn to_span<T: Scalar>(&self, g: &Geom3, channels: usize, x: &[T]) -> Vec<T> {
        let [to, ho, wo] = g.output;
        let mut out = vec![T::ZERO; channels * self.span];
        for ch in 0..channels {
            for t in 0..to {
                for h in 0..ho {
                    let src = &x[((ch * to + t) * ho + h) * wo..][..wo];
                    out[ch * self.span + self.span_index(t, h, 0)..][..wo].copy_from_slice(src);
                }
            }
        }
        out
    }

    fn from_span<T: Scalar>(&self, g: &Geom3, channels: usize, buf: &[T], out: &mut [T], accumulate: bool) {
        let [to, ho, wo] = g.output;
        for ch in 0..channels {
            for t in 0..to {
                for h in 0..ho {
                    let src = &buf[ch * self.span + self.span_index(t, h, 0)..][..wo];
                    let dst = &mut out[((ch * to + t) * ho + h) * wo..][..wo];
                    if accumulate {
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        dst.copy_from_slice(src);
                    }
                }
            }
        }
    }
}

/// Uses the implicit path unless the phase grid is much larger than the output.
fn use_implicit(g: &Geom3) -> bool {
    Phased::new(g).span * 2 <= g.out_positions() * 5
}

fn implicit_forward<T: Scalar>(g: &Geom3, cout: usize, x: &[T], weight: &[T], scratch: &mut Vec<T>, out: &mut [T]) {
    let p = Phased::new(g);
    p.embed(g, g.cin, x, scratch);
    let rows = p.rows(g, g.cin, false);
    let mut buf = vec![T::ZERO; cout * p.span];
    let wmat = MatRef { data: weight, ld: rows.len(), t: false };
    gemm::gemm_nn_rows(cout, p.span, wmat, scratch, &rows, &mut buf, p.span, false);
    p.from_span(g, cout, &buf, out, false);
}

#[allow(clippy::too_many_arguments)]
fn implicit_backward<T: Scalar>(
    g: &Geom3,
    cout: usize,
    x: &[T],
    weight: &[T],
    gout: &[T],
    scratch: &mut Vec<T>,
    dx: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
) {
    let p = Phased::new(g);
    let k = g.patch_len();
    let gspan = p.to_span(g, cout, gout);
    if let Some(dw) = dweight {
        p.embed(g, g.cin, x, scratch);
        let rows = p.rows(g, g.cin, false);
        gemm::gemm_nt_rows(cout, p.span, &gspan, p.span, scratch, &rows, dw, k, true);
    }
    let Some(dx) = dx else { return };
    let same = g.stride == [1, 1, 1] && (0..3).all(|ax| 2 * g.pad[ax] + 1 == g.kernel[ax]);
    if same {
        // the input gradient is a convolution of the padded output gradient
        // with the mirrored, channel-transposed kernel
        let taps: usize = g.kernel.iter().product();
        let mut wr = vec![T::ZERO; g.cin * cout * taps];
        for co in 0..cout {
            for ci in 0..g.cin {
                let src = &weight[(co * g.cin + ci) * taps..][..taps];
                wr[ci * cout * taps + co * taps..][..taps].copy_from_slice(src);
            }
        }
        p.embed(g, cout, gout, scratch);
        let rows = p.rows(g, cout, true);
        let mut buf = vec![T::ZERO; g.cin * p.span];
        let wmat = MatRef { data: &wr[..], ld: rows.len(), t: false };
        gemm::gemm_nn_rows(g.cin, p.span, wmat, scratch, &rows, &mut buf, p.span, false);
        p.from_span(g, g.cin, &buf, dx, true);
        return;
    }
    // general case: scatter Wᵀ·g back through the row offsets, in column chunks
    const CHUNK: usize = 256;
    let rows = p.rows(g, g.cin, false);
    let mut dphase = vec![T::ZERO; g.cin * p.chan];
    let mut d = vec![T::ZERO; k * CHUNK];
    let wt = MatRef { data: weight, ld: k, t: true };
    let mut j0 = 0;
    while j0 < p.span {
        let w = (p.span - j0).min(CHUNK);
        let gm = MatRef { data: &gspan[j0..], ld: p.span, t: false };
        T::gemm_ex(k, cout, w, wt, gm, &mut d, w, false);
        for (kk, &r) in rows.iter().enumerate() {
            for (dst, &v) in dphase[r + j0..r + j0 + w].iter_mut().zip(&d[kk * w..(kk + 1) * w]) {
                *dst += v;
            }
        }
        j0 += w;
    }
    let [t_in, h_in, w_in] = g.input;
    let [pt, ph, pw] = g.pad;
    for ci in 0..g.cin {
        for t in 0..t_in {
            for h in 0..h_in {
                let dst = &mut dx[((ci * t_in + t) * h_in + h) * w_in..][..w_in];
                for (w, v) in dst.iter_mut().enumerate() {
                    *v += dphase[ci * p.chan + p.locate(g, t + pt, h + ph, w + pw)];
                }
            }
        }
    }
}

/// Forward convolution of one item. `out` is `[Cout, To·Ho·Wo]`.
pub fn conv3d_forward<T: Scalar>(
    g: &Geom3,
    cout: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    col: &mut Vec<T>,
    out: &mut [T],
) {
    let n = g.out_positions();
    let k = g.patch_len();
    let wmat = MatRef { data: weight, ld: k, t: false };
    if g.is_pointwise() {
        T::gemm_ex(cout, k, n, wmat, MatRef { data: x, ld: n, t: false }, out, n, false);
    } else if use_implicit(g) {
        implicit_forward(g, cout, x, weight, col, out);
    } else {
        let lines = g.output[0] * g.output[1];
        let wo = g.output[2];
        let step = rows_per_chunk(g);
        let mut r0 = 0;
        while r0 < lines {
            let r1 = (r0 + step).min(lines);
            let np = (r1 - r0) * wo;
            col.resize(k * np, T::ZERO);
            im2col_rows(g, x, r0, r1, col);
            T::gemm_ex(cout, k, np, wmat, MatRef { data: col, ld: np, t: false }, &mut out[r0 * wo..], n, false);
            r0 = r1;
        }
    }
    for (o, row) in out.chunks_mut(n).enumerate() {
        let b = bias[o];
        for v in row {
            *v += b;
        }
    }
}

/// Backward convolution of one item; every gradient buffer accumulates.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Scalar>(
    g: &Geom3,
    cout: usize,
    x: &[T],
    weight: &[T],
    gout: &[T],
    col: &mut Vec<T>,
    mut dx: Option<&mut [T]>,
    mut dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let n = g.out_positions();
    let k = g.patch_len();
    if let Some(db) = dbias {
        for (o, row) in gout.chunks(n).enumerate() {
            let mut s = T::ZERO;
            for &v in row {
                s += v;
            }
            db[o] += s;
        }
    }
    let wt = MatRef { data: weight, ld: k, t: true };
    if g.is_pointwise() {
        let gm = MatRef { data: gout, ld: n, t: false };
        if let Some(dw) = dweight {
            T::gemm_ex(cout, n, k, gm, MatRef { data: x, ld: n, t: true }, dw, k, true);
        }
        if let Some(dx) = dx {
            T::gemm_ex(k, cout, n, wt, gm, dx, n, true);
        }
        return;
    }
    if use_implicit(g) {
        implicit_backward(g, cout, x, weight, gout, col, dx, dweight);
        return;
    }
    let lines = g.output[0] * g.output[1];
    let wo = g.output[2];
    let step = rows_per_chunk(g);
    let mut r0 = 0;
    while r0 < lines {
        let r1 = (r0 + step).min(lines);
        let np = (r1 - r0) * wo;
        let gm = MatRef { data: &gout[r0 * wo..], ld: n, t: false };
        col.resize(k * np, T::ZERO);
        if let Some(dw) = dweight.as_deref_mut() {
            im2col_rows(g, x, r0, r1, col);
            T::gemm_ex(cout, np, k, gm, MatRef { data: col, ld: np, t: true }, dw, k, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm_ex(k, cout, np, wt, gm, col, np, false);
            col2im_rows(g, col, r0, r1, dx);
        }
        r0 = r1;
    }
}

/// Per-row rectangle sums used by the conv-then-spatial-mean shortcut.
///
/// Returns `S` laid out `[C·kt·kh·kw, To]`: entry `(ci,a,b,c; ot)` is the sum
/// of `x[ci, ot+a-pt]` over every input pixel reached by tap `(b,c)` across the
/// full output grid. Requires unit stride.
pub fn tap_sums<T: Scalar>(g: &Geom3, x: &[T]) -> Vec<T> {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [to, ho, wo] = g.output;
    let k = g.patch_len();
    let mut s = vec![T::ZERO; k * to];
    let mut integral = vec![0.0f64; (h_in + 1) * (w_in + 1)];
    let rows: Vec<(usize, usize)> = (0..kh).map(|b| tap_range(b, g.pad[1], ho, h_in)).collect();
    let cols: Vec<(usize, usize)> = (0..kw).map(|c| tap_range(c, g.pad[2], wo, w_in)).collect();
    for ci in 0..g.cin {
        for t in 0..t_in {
            let frame = &x[((ci * t_in) + t) * h_in * w_in..((ci * t_in) + t + 1) * h_in * w_in];
            integral_image(frame, h_in, w_in, &mut integral);
            for a in 0..kt {
                // output frame reading input frame t through temporal tap a
                let ot = t as isize + g.pad[0] as isize - a as isize;
                if ot < 0 || ot as usize >= to {
                    continue;
                }
                let ot = ot as usize;
                for (b, &(r0, r1)) in rows.iter().enumerate() {
                    for (c, &(c0, c1)) in cols.iter().enumerate() {
                        let v = rect_sum(&integral, w_in, r0, r1, c0, c1);
                        let row = ((ci * kt + a) * kh + b) * kw + c;
                        s[row * to + ot] = T::from_f64(v);
                    }
                }
            }
        }
    }
    s
}

/// Adjoint of [`tap_sums`] (accumulating into `dx`).
pub fn tap_sums_backward<T: Scalar>(g: &Geom3, gs: &[T], dx: &mut [T]) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [to, ho, wo] = g.output;
    let rows: Vec<(usize, usize)> = (0..kh).map(|b| tap_range(b, g.pad[1], ho, h_in)).collect();
    let cols: Vec<(usize, usize)> = (0..kw).map(|c| tap_range(c, g.pad[2], wo, w_in)).collect();
    let mut diff = vec![0.0f64; (h_in + 1) * (w_in + 1)];
    for ci in 0..g.cin {
        for t in 0..t_in {
            diff.fill(0.0);
            let mut any = false;
            for a in 0..kt {
                let ot = t as isize + g.pad[0] as isize - a as isize;
                if ot < 0 || ot as usize >= to {
                    continue;
                }
                let ot = ot as usize;
                for (b, &(r0, r1)) in rows.iter().enumerate() {
                    for (c, &(c0, c1)) in cols.iter().enumerate() {
                        if r0 >= r1 || c0 >= c1 {
                            continue;
                        }
                        let row = ((ci * kt + a) * kh + b) * kw + c;
                        let v = gs[row * to + ot].to_f64();
                        let w1 = w_in + 1;
                        diff[r0 * w1 + c0] += v;
                        diff[r0 * w1 + c1] -= v;
                        diff[r1 * w1 + c0] -= v;
                        diff[r1 * w1 + c1] += v;
                        any = true;
                    }
                }
            }
            if !any {
                continue;
            }
            let frame = &mut dx[((ci * t_in) + t) * h_in * w_in..((ci * t_in) + t + 1) * h_in * w_in];
            let w1 = w_in + 1;
            // running 2D prefix sum of the difference array
            let mut acc = vec![0.0f64; w1];
            for r in 0..h_in {
                let mut run = 0.0;
                for c in 0..w_in {
                    run += diff[r * w1 + c];
                    acc[c] += run;
                    frame[r * w_in + c] += T::from_f64(acc[c]);
                }
            }
        }
    }
}

/// Half-open input range `[lo, hi)` touched by tap `k` over `n_out` unit-stride outputs.
fn tap_range(k: usize, pad: usize, n_out: usize, n_in: usize) -> (usize, usize) {
    let lo = k as isize - pad as isize;
    let hi = lo + n_out as isize;
    let lo = lo.clamp(0, n_in as isize) as usize;
    let hi = hi.clamp(0, n_in as isize) as usize;
    (lo, hi.max(lo))
}

fn integral_image<T: Scalar>(frame: &[T], h: usize, w: usize, out: &mut [f64]) {
    let w1 = w + 1;
    out[..w1].fill(0.0);
    for r in 0..h {
        out[(r + 1) * w1] = 0.0;
        let mut run = 0.0;
        for c in 0..w {
            run += frame[r * w + c].to_f64();
            out[(r + 1) * w1 + c + 1] = out[r * w1 + c + 1] + run;
        }
    }
}

fn rect_sum(integral: &[f64], w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
    if r0 >= r1 || c0 >= c1 {
        return 0.0;
    }
    let w1 = w + 1;
    integral[r1 * w1 + c1] - integral[r0 * w1 + c1] - integral[r1 * w1 + c0] + integral[r0 * w1 + c0]
}

/// Max pooling of one item; returns flat argmax offsets (into the item) per output.
pub fn max_pool_forward<T: Scalar>(g: &Geom3, x: &[T], out: &mut [T], argmax: &mut [u32]) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [to, ho, wo] = g.output;
    let mut j = 0;
    for ci in 0..g.cin {
        let base_c = ci * t_in * h_in * w_in;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = T::ZERO;
                    let mut best_at = usize::MAX;
                    for a in 0..kt {
                        let t = ot * g.stride[0] + a;
                        for b in 0..kh {
                            let h = oh * g.stride[1] + b;
                            for c in 0..kw {
                                let w = ow * g.stride[2] + c;
                                let o = base_c + (t * h_in + h) * w_in + w;
                                if best_at == usize::MAX || x[o] > best {
                                    best = x[o];
                                    best_at = o;
                                }
                            }
                        }
                    }
                    out[j] = best;
                    argmax[j] = best_at as u32;
                    j += 1;
                }
            }
        }
    }
}

pub fn avg_pool_forward<T: Scalar>(g: &Geom3, x: &[T], out: &mut [T]) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [to, ho, wo] = g.output;
    let inv = T::from_f64(1.0 / (kt * kh * kw) as f64);
    let mut j = 0;
    for ci in 0..g.cin {
        let base_c = ci * t_in * h_in * w_in;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = T::ZERO;
                    for a in 0..kt {
                        let t = ot * g.stride[0] + a;
                        for b in 0..kh {
                            let h = oh * g.stride[1] + b;
                            let row = base_c + (t * h_in + h) * w_in + ow * g.stride[2];
                            for c in 0..kw {
                                s += x[row + c];
                            }
                        }
                    }
                    out[j] = s * inv;
                    j += 1;
                }
            }
        }
    }
}

pub fn avg_pool_backward<T: Scalar>(g: &Geom3, gout: &[T], dx: &mut [T]) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [to, ho, wo] = g.output;
    let inv = T::from_f64(1.0 / (kt * kh * kw) as f64);
    let mut j = 0;
    for ci in 0..g.cin {
        let base_c = ci * t_in * h_in * w_in;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let v = gout[j] * inv;
                    for a in 0..kt {
                        let t = ot * g.stride[0] + a;
                        for b in 0..kh {
                            let h = oh * g.stride[1] + b;
                            let row = base_c + (t * h_in + h) * w_in + ow * g.stride[2];
                            for c in 0..kw {
                                dx[row + c] += v;
                            }
                        }
                    }
                    j += 1;
                }
            }
        }
    }
}

/// Nearest-neighbour upsampling of `planes` stacked `[h, w]` images.
pub fn upsample_nearest<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize, out: &mut [T]) {
    let (ho, wo) = (h * f, w * f);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for r in 0..ho {
            let srow = &src[(r / f) * w..(r / f + 1) * w];
            let drow = &mut dst[r * wo..(r + 1) * wo];
            for (c, d) in drow.iter_mut().enumerate() {
                *d = srow[c / f];
            }
        }
    }
}

pub fn upsample_nearest_backward<T: Scalar>(
    gout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
    dx: &mut [T],
) {
    let (ho, wo) = (h * f, w * f);
    for p in 0..planes {
        let src = &gout[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for r in 0..ho {
            let srow = &src[r * wo..(r + 1) * wo];
            let drow = &mut dst[(r / f) * w..(r / f + 1) * w];
            for (c, &v) in srow.iter().enumerate() {
                drow[c / f] += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(g: &Geom3, cout: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let [t_in, h_in, w_in] = g.input;
        let [kt, kh, kw] = g.kernel;
        let [to, ho, wo] = g.output;
        let mut out = vec![0.0; cout * to * ho * wo];
        for o in 0..cout {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut s = b[o];
                        for ci in 0..g.cin {
                            for a in 0..kt {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let t = (ot * g.stride[0] + a) as isize - g.pad[0] as isize;
                                        let h = (oh * g.stride[1] + bb) as isize - g.pad[1] as isize;
                                        let ww = (ow * g.stride[2] + c) as isize - g.pad[2] as isize;
                                        if t < 0 || h < 0 || ww < 0 {
                                            continue;
                                        }
                                        let (t, h, ww) = (t as usize, h as usize, ww as usize);
                                        if t >= t_in || h >= h_in || ww >= w_in {
                                            continue;
                                        }
                                        s += w[(((o * g.cin + ci) * kt + a) * kh + bb) * kw + c]
                                            * x[((ci * t_in + t) * h_in + h) * w_in + ww];
                                    }
                                }
                            }
                        }
                        out[((o * to + ot) * ho + oh) * wo + ow] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn im2col_conv_matches_direct_summation() {
        for (stride, pad, kernel) in [
            ([1, 1, 1], [0, 0, 0], [1, 1, 1]),
            ([1, 2, 2], [1, 1, 1], [3, 3, 3]),
            ([2, 1, 2], [0, 2, 1], [2, 3, 2]),
            ([1, 1, 1], [1, 1, 1], [3, 3, 3]),
            ([1, 1, 1], [0, 1, 2], [1, 3, 5]),
        ] {
            let g = Geom3::new("conv3d", 2, [4, 5, 6], kernel, stride, pad).unwrap();
            let cout = 3;
            let x = pseudo(g.in_len(), 1);
            let w = pseudo(cout * g.patch_len(), 2);
            let b = pseudo(cout, 3);
            let mut out = vec![0.0; cout * g.out_positions()];
            conv3d_forward(&g, cout, &x, &w, &b, &mut Vec::new(), &mut out);
            let expect = direct_conv(&g, cout, &x, &w, &b);
            for (a, e) in out.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_the_exact_adjoint() {
        for (stride, pad, kernel) in [([1, 2, 2], [1, 1, 1], [3, 3, 3]), ([1, 1, 1], [1, 1, 1], [3, 3, 3])] {
            let g = Geom3::new("conv3d", 2, [4, 5, 6], kernel, stride, pad).unwrap();
            let cout = 3;
            let x = pseudo(g.in_len(), 11);
            let w = pseudo(cout * g.patch_len(), 12);
            let zero_b = vec![0.0; cout];
            let gout = pseudo(cout * g.out_positions(), 13);
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; cout];
            conv3d_backward(&g, cout, &x, &w, &gout, &mut Vec::new(), Some(&mut dx), Some(&mut dw), Some(&mut db));
            // the conv is bilinear, so each partial is the response to a unit input
            let pair = |x: &[f64], w: &[f64]| -> f64 {
                direct_conv(&g, cout, x, w, &zero_b).iter().zip(&gout).map(|(a, b)| a * b).sum()
            };
            for i in 0..x.len() {
                let mut e = vec![0.0; x.len()];
                e[i] = 1.0;
                assert!((dx[i] - pair(&e, &w)).abs() < 1e-10);
            }
            for i in 0..w.len() {
                let mut e = vec![0.0; w.len()];
                e[i] = 1.0;
                assert!((dw[i] - pair(&x, &e)).abs() < 1e-10);
            }
            for (o, &v) in db.iter().enumerate() {
                let n = g.out_positions();
                assert!((v - gout[o * n..(o + 1) * n].iter().sum::<f64>()).abs() < 1e-10);
            }
            // single precision (vectorised kernels where available) agrees
            let f = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
            let (x32, w32, g32) = (f(&x), f(&w), f(&gout));
            let mut out32 = vec![0.0f32; cout * g.out_positions()];
            conv3d_forward(&g, cout, &x32, &w32, &f(&zero_b), &mut Vec::new(), &mut out32);
            let out = direct_conv(&g, cout, &x, &w, &zero_b);
            assert!(out32.iter().zip(&out).all(|(a, b)| (*a as f64 - b).abs() < 1e-4));
            let mut dx32 = vec![0.0f32; x.len()];
            let mut dw32 = vec![0.0f32; w.len()];
            conv3d_backward(&g, cout, &x32, &w32, &g32, &mut Vec::new(), Some(&mut dx32), Some(&mut dw32), None);
            assert!(dx32.iter().zip(&dx).all(|(a, b)| (*a as f64 - b).abs() < 1e-4));
            assert!(dw32.iter().zip(&dw).all(|(a, b)| (*a as f64 - b).abs() < 1e-4));
        }
    }

    #[test]
    fn tap_sums_match_conv_then_mean() {
        let g = Geom3::new("conv3d", 2, [3, 5, 4], [3, 3, 3], [1, 1, 1], [1, 1, 1]).unwrap();
        let cout = 2;
        let x = pseudo(g.in_len(), 7);
        let w = pseudo(cout * g.patch_len(), 8);
        let b = vec![0.0; cout];
        let full = direct_conv(&g, cout, &x, &w, &b);
        let s = tap_sums(&g, &x);
        let [to, ho, wo] = g.output;
        let mut pooled = vec![0.0; cout * to];
        f64::gemm(cout, g.patch_len(), to, &w, false, &s, false, &mut pooled, false);
        for o in 0..cout {
            for t in 0..to {
                let mean: f64 = full[(o * to + t) * ho * wo..(o * to + t + 1) * ho * wo].iter().sum::<f64>()
                    / (ho * wo) as f64;
                assert!((pooled[o * to + t] / (ho * wo) as f64 - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_names_axis() {
        let err = Geom3::new("conv3d", 1, [2, 8, 8], [3, 3, 3], [1, 1, 1], [0, 0, 0]).unwrap_err();
        assert!(err.to_string().contains('T'), "{err}");
    }
}
