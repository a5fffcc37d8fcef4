//! 2-d convolution and its transpose, lowered to im2col + GEMM.
//!
//! Both directions share one geometry: a convolution that maps an
//! `in_h × in_w` plane to an `out_h × out_w` plane. A transposed convolution
//! runs that geometry backwards, so its *output* is the geometry's input.
//! Inner products always accumulate in `f64`.

use std::cell::RefCell;
use std::ops::{Deref, DerefMut};

use super::gemm::{dgemm, Layout};
use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Upper bound on the im2col tile, in matrix elements.
const TILE_ELEMS: usize = 1 << 18;

thread_local! {
    static SCRATCH: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// Per-thread reusable tile buffer. Its contents are stale on creation: every
/// user writes a region in full before reading it.
struct Scratch {
    buf: Vec<f64>,
    len: usize,
}

impl Scratch {
    fn new(len: usize) -> Self {
        let mut buf = SCRATCH.with(|s| s.borrow_mut().pop()).unwrap_or_default();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        Scratch { buf, len }
    }
}

impl Deref for Scratch {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.buf[..self.len]
    }
}

impl DerefMut for Scratch {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.buf[..self.len]
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let buf = std::mem::take(&mut self.buf);
        SCRATCH.with(|s| s.borrow_mut().push(buf));
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn total_cols(&self) -> usize {
        self.n * self.out_plane()
    }

    fn tile_cols(&self) -> usize {
        (TILE_ELEMS / self.rows().max(1))
            .clamp(64, 8192)
            .min(self.total_cols().max(1))
    }

    /// Splits global output columns `j0..j0+len` into runs that stay within
    /// one output row.
    fn row_runs(&self, j0: usize, len: usize) -> Vec<RowRun> {
        let plane = self.out_plane();
        let end = j0 + len;
        let mut runs = Vec::with_capacity(len / self.out_w + 2);
        let mut j = j0;
        while j < end {
            let (n, p) = (j / plane, j % plane);
            let (oy, ox0) = (p / self.out_w, p % self.out_w);
            let run = (self.out_w - ox0).min(end - j);
            runs.push(RowRun {
                n,
                oy,
                ox0,
                t0: j - j0,
                run,
            });
            j += run;
        }
        runs
    }

    fn padded_dims(&self) -> (usize, usize) {
        (self.in_h + 2 * self.pad, self.in_w + 2 * self.pad)
    }

    /// Copies images `n0..n0+count` of `src` into a zero-bordered f64 buffer.
    fn pad_images<T: Scalar>(&self, src: &[T], n0: usize, count: usize, padded: &mut [f64]) {
        let (ph, pw) = self.padded_dims();
        let plane = self.in_h * self.in_w;
        padded.fill(0.0);
        for (ip, chan) in src[n0 * self.channels * plane..]
            .chunks_exact(plane)
            .take(count * self.channels)
            .enumerate()
        {
            let out = &mut padded[ip * ph * pw..][..ph * pw];
            for (y, row) in chan.chunks_exact(self.in_w).enumerate() {
                let dst = &mut out[(y + self.pad) * pw + self.pad..][..self.in_w];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d = v.as_f64();
                }
            }
        }
    }

    /// Fills `cols` (rows × len, row-major) with receptive-field values for
    /// global output columns `j0..j0+len`. Each row of `cols` is written
    /// front to back.
    fn im2col<T: Scalar>(&self, x: &[T], j0: usize, len: usize, cols: &mut [f64]) {
        let runs = self.row_runs(j0, len);
        let (n0, count) = image_span(&runs);
        let (ph, pw) = self.padded_dims();
        let mut padded = Scratch::new(count * self.channels * ph * pw);
        self.pad_images(x, n0, count, &mut padded);
        let s = self.stride;
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let dst_row = &mut cols[r * len..][..len];
                    for u in &runs {
                        let dst = &mut dst_row[u.t0..][..u.run];
                        let chan = ((u.n - n0) * self.channels + c) * ph * pw;
                        let src = &padded[chan + (u.oy * s + ki) * pw + u.ox0 * s + kj..];
                        if s == 1 {
                            dst.copy_from_slice(&src[..u.run]);
                        } else {
                            for (d, v) in dst.iter_mut().zip(src.iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto an input-shaped buffer. Each destination
    /// element receives its contributions in row-major order of `cols`.
    fn col2im(&self, cols: &[f64], j0: usize, len: usize, dst: &mut [f64]) {
        let runs = self.row_runs(j0, len);
        let (n0, count) = image_span(&runs);
        let (ph, pw) = self.padded_dims();
        let mut padded = Scratch::new(count * self.channels * ph * pw);
        self.pad_images(dst, n0, count, &mut padded);
        let s = self.stride;
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let src_row = &cols[r * len..][..len];
                    for u in &runs {
                        let src = &src_row[u.t0..][..u.run];
                        let chan = ((u.n - n0) * self.channels + c) * ph * pw;
                        let out = &mut padded[chan + (u.oy * s + ki) * pw + u.ox0 * s + kj..];
                        if s == 1 {
                            for (d, v) in out[..u.run].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (d, v) in out.iter_mut().step_by(s).zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        let plane = self.in_h * self.in_w;
        for (ip, chan) in dst[n0 * self.channels * plane..]
            .chunks_exact_mut(plane)
            .take(count * self.channels)
            .enumerate()
        {
            let src = &padded[ip * ph * pw..][..ph * pw];
            for (y, row) in chan.chunks_exact_mut(self.in_w).enumerate() {
                row.copy_from_slice(&src[(y + self.pad) * pw + self.pad..][..self.in_w]);
            }
        }
    }
}

/// First image and number of images covered by a tile's runs.
fn image_span(runs: &[RowRun]) -> (usize, usize) {
    match (runs.first(), runs.last()) {
        (Some(a), Some(b)) => (a.n, b.n - a.n + 1),
        _ => (0, 0),
    }
}

/// Output columns `t0..t0+run` of a tile: image `n`, output row `oy`,
/// output columns `ox0..ox0+run`.
struct RowRun {
    n: usize,
    oy: usize,
    ox0: usize,
    t0: usize,
    run: usize,
}

/// Copies the `channels × len` block of global columns `j0..` out of an
/// N×channels×plane tensor.
fn gather_columns<T: Scalar>(
    src: &[T],
    channels: usize,
    plane: usize,
    j0: usize,
    len: usize,
    dst: &mut [f64],
) {
    for_each_run(plane, j0, len, |n, p0, t0, run| {
        for c in 0..channels {
            let s = &src[(n * channels + c) * plane + p0..][..run];
            let d = &mut dst[c * len + t0..][..run];
            for (d, s) in d.iter_mut().zip(s) {
                *d = s.as_f64();
            }
        }
    });
}

/// Writes (or adds) a `channels × len` block into an N×channels×plane buffer.
fn scatter_columns(
    src: &[f64],
    channels: usize,
    plane: usize,
    j0: usize,
    len: usize,
    dst: &mut [f64],
) {
    for_each_run(plane, j0, len, |n, p0, t0, run| {
        for c in 0..channels {
            let s = &src[c * len + t0..][..run];
            let d = &mut dst[(n * channels + c) * plane + p0..][..run];
            for (d, s) in d.iter_mut().zip(s) {
                *d += s;
            }
        }
    });
}

/// Splits global columns `j0..j0+len` into per-image runs:
/// `f(image, first pixel, offset in tile, run length)`.
fn for_each_run(
    plane: usize,
    j0: usize,
    len: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let mut j = j0;
    let end = j0 + len;
    while j < end {
        let n = j / plane;
        let p0 = j % plane;
        let run = (plane - p0).min(end - j);
        f(n, p0, j - j0, run);
        j += run;
    }
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut [T], src: &[f64]) {
    for (s, v) in slot.iter_mut().zip(src) {
        *s = *s + T::from_f64(*v);
    }
}

fn bias_grad(gout: &[f64], n: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for i in 0..n {
        for (c, d) in db.iter_mut().enumerate() {
            *d += gout[(i * channels + c) * plane..][..plane]
                .iter()
                .sum::<f64>();
        }
    }
    db
}

fn check_bias<T: Scalar>(
    op: &'static str,
    bias: Option<&Tensor<T>>,
    channels: usize,
) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::shape(
                op,
                format!(
                    "bias shape {:?} does not match output channels {channels}",
                    b.shape()
                ),
            ));
        }
    }
    Ok(())
}

fn conv2d_geometry(x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Result<Geometry> {
    let [n, c, h, wd] = x;
    let [_, wc, kh, kw] = w;
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be at least 1"));
    }
    if c != wc {
        return Err(Error::shape(
            "conv2d",
            format!("input channels (axis 1) = {c} but weight input channels (axis 1) = {wc}"),
        ));
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {kh}x{kw} (axes 2,3) exceeds padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            ),
        ));
    }
    Ok(Geometry {
        n,
        channels: c,
        in_h: h,
        in_w: wd,
        kh,
        kw,
        stride,
        pad,
        out_h: (h + 2 * pad - kh) / stride + 1,
        out_w: (wd + 2 * pad - kw) / stride + 1,
    })
}

/// Geometry of the convolution whose adjoint is the requested transpose.
fn conv_transpose_geometry(
    x: [usize; 4],
    w: [usize; 4],
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    let [n, c, h, wd] = x;
    let [wc, cout, kh, kw] = w;
    if stride == 0 {
        return Err(Error::shape(
            "conv_transpose2d",
            "stride must be at least 1",
        ));
    }
    if c != wc {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input channels (axis 1) = {c} but weight input channels (axis 0) = {wc}"),
        ));
    }
    let oh = (h as isize - 1) * stride as isize - 2 * pad as isize + kh as isize;
    let ow = (wd as isize - 1) * stride as isize - 2 * pad as isize + kw as isize;
    if oh < 1 || ow < 1 {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("padding {pad} leaves an empty output ({oh}x{ow})"),
        ));
    }
    Ok(Geometry {
        n,
        channels: cout,
        in_h: oh as usize,
        in_w: ow as usize,
        kh,
        kw,
        stride,
        pad,
        out_h: h,
        out_w: wd,
    })
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geo = conv2d_geometry(x.dims4("conv2d")?, w.dims4("conv2d")?, stride, pad)?;
    let o = w.shape()[0];
    check_bias("conv2d", bias, o)?;
    let rows = geo.rows();
    let wmat = to_f64(w.data());
    let plane = geo.out_plane();
    let mut out = vec![0.0; geo.n * o * plane];
    let tile = geo.tile_cols();
    let mut cols = Scratch::new(rows * tile);
    let mut res = Scratch::new(o * tile);
    let total = geo.total_cols();
    let mut j0 = 0;
    while j0 < total {
        let len = tile.min(total - j0);
        geo.im2col(x.data(), j0, len, &mut cols);
        dgemm(
            o,
            rows,
            len,
            &wmat,
            Layout::rows(rows),
            &cols,
            Layout::rows(len),
            0.0,
            &mut res,
            Layout::rows(len),
        );
        scatter_columns(&res, o, plane, j0, len, &mut out);
        j0 += len;
    }
    if let Some(b) = bias {
        add_bias(&mut out, &to_f64(b.data()), plane);
    }
    Tensor::new(
        [geo.n, o, geo.out_h, geo.out_w],
        out.into_iter().map(T::from_f64).collect(),
    )
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
    gout: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let x = sink.value(input);
    let w = sink.value(weight);
    let geo = conv2d_geometry(
        x.dims4("conv2d").unwrap(),
        w.dims4("conv2d").unwrap(),
        stride,
        pad,
    )
    .expect("validated in forward");
    let o = w.shape()[0];
    let rows = geo.rows();
    let plane = geo.out_plane();
    let want_x = sink.wants(input);
    let want_w = sink.wants(weight);
    let wmat = to_f64(w.data());
    let tile = geo.tile_cols();
    let total = geo.total_cols();
    let mut dres = Scratch::new(o * tile);
    let mut cols = Scratch::new(rows * tile);
    let mut dw = vec![0.0; if want_w { o * rows } else { 0 }];
    let mut dx = vec![0.0; if want_x { x.numel() } else { 0 }];
    let mut j0 = 0;
    while j0 < total {
        let len = tile.min(total - j0);
        gather_columns(gout, o, plane, j0, len, &mut dres);
        if want_w {
            geo.im2col(x.data(), j0, len, &mut cols);
            dgemm(
                o,
                len,
                rows,
                &dres,
                Layout::rows(len),
                &cols,
                Layout::trans(len),
                1.0,
                &mut dw,
                Layout::rows(rows),
            );
        }
        if want_x {
            dgemm(
                rows,
                o,
                len,
                &wmat,
                Layout::trans(rows),
                &dres,
                Layout::rows(len),
                0.0,
                &mut cols,
                Layout::rows(len),
            );
            geo.col2im(&cols, j0, len, &mut dx);
        }
        j0 += len;
    }
    if want_x {
        accumulate(sink.slot(input), &dx);
    }
    if want_w {
        accumulate(sink.slot(weight), &dw);
    }
    if let Some(b) = bias.filter(|&b| sink.wants(b)) {
        let db = bias_grad(&to_f64(gout), geo.n, o, plane);
        accumulate(sink.slot(b), &db);
    }
}

pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geo = conv_transpose_geometry(
        x.dims4("conv_transpose2d")?,
        w.dims4("conv_transpose2d")?,
        stride,
        pad,
    )?;
    let cin = w.shape()[0];
    let cout = geo.channels;
    check_bias("conv_transpose2d", bias, cout)?;
    let rows = geo.rows();
    let wmat = to_f64(w.data());
    let plane_in = geo.out_plane();
    let mut out = vec![0.0; geo.n * cout * geo.in_h * geo.in_w];
    let tile = geo.tile_cols();
    let total = geo.total_cols();
    let mut xt = Scratch::new(cin * tile);
    let mut cols = Scratch::new(rows * tile);
    let mut j0 = 0;
    while j0 < total {
        let len = tile.min(total - j0);
        gather_columns(x.data(), cin, plane_in, j0, len, &mut xt);
        dgemm(
            rows,
            cin,
            len,
            &wmat,
            Layout::trans(rows),
            &xt,
            Layout::rows(len),
            0.0,
            &mut cols,
            Layout::rows(len),
        );
        geo.col2im(&cols, j0, len, &mut out);
        j0 += len;
    }
    if let Some(b) = bias {
        add_bias(&mut out, &to_f64(b.data()), geo.in_h * geo.in_w);
    }
    Tensor::new(
        [geo.n, cout, geo.in_h, geo.in_w],
        out.into_iter().map(T::from_f64).collect(),
    )
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    input: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
    gout: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let x = sink.value(input);
    let w = sink.value(weight);
    let geo = conv_transpose_geometry(
        x.dims4("conv_transpose2d").unwrap(),
        w.dims4("conv_transpose2d").unwrap(),
        stride,
        pad,
    )
    .expect("validated in forward");
    let cin = w.shape()[0];
    let rows = geo.rows();
    let plane_in = geo.out_plane();
    let want_x = sink.wants(input);
    let want_w = sink.wants(weight);
    let wmat = to_f64(w.data());
    let tile = geo.tile_cols();
    let total = geo.total_cols();
    let mut cols = Scratch::new(rows * tile);
    let mut xt = Scratch::new(cin * tile);
    let mut dxt = Scratch::new(cin * tile);
    let mut dw = vec![0.0; if want_w { cin * rows } else { 0 }];
    let mut dx = vec![0.0; if want_x { x.numel() } else { 0 }];
    let mut j0 = 0;
    while j0 < total {
        let len = tile.min(total - j0);
        geo.im2col(gout, j0, len, &mut cols);
        if want_x {
            dgemm(
                cin,
                rows,
                len,
                &wmat,
                Layout::rows(rows),
                &cols,
                Layout::rows(len),
                0.0,
                &mut dxt,
                Layout::rows(len),
            );
            scatter_columns(&dxt, cin, plane_in, j0, len, &mut dx);
        }
        if want_w {
            gather_columns(x.data(), cin, plane_in, j0, len, &mut xt);
            dgemm(
                cin,
                len,
                rows,
                &xt,
                Layout::rows(len),
                &cols,
                Layout::trans(len),
                1.0,
                &mut dw,
                Layout::rows(rows),
            );
        }
        j0 += len;
    }
    if want_x {
        accumulate(sink.slot(input), &dx);
    }
    if want_w {
        accumulate(sink.slot(weight), &dw);
    }
    if let Some(b) = bias.filter(|&b| sink.wants(b)) {
        let db = bias_grad(&to_f64(gout), geo.n, geo.channels, geo.in_h * geo.in_w);
        accumulate(sink.slot(b), &db);
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of NCHW `input` with an O×I×Kh×Kw `weight`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let requires = self.any_requires(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            requires,
        ))
    }

    /// Adjoint of [`Graph::conv2d`]; `weight` is laid out I×O×Kh×Kw.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv_transpose2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let requires = self.any_requires(&deps);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            requires,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::oracle::naive_conv2d;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_returns_input() {
        let x = Tensor::<f32>::from_fn([1, 1, 3, 3], |i| i as f32);
        let w = Tensor::new([1, 1, 1, 1], vec![1.0f32]).unwrap();
        let b = Tensor::new([1], vec![0.0f32]).unwrap();
        let y = conv2d_forward(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn sum_kernel() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full([1, 1, 2, 2], 1.0f32);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn strided_padded_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random([2, 3, 8, 8], &mut rng);
        let w = random([4, 3, 3, 3], &mut rng);
        let b = Tensor::from_fn([4], |_| rng.gen_range(-1.0..1.0));
        let y = conv2d_forward(&x, &w, Some(&b), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        let want = naive_conv2d(&x, &w, Some(&b), 2, 1).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn channel_mismatch_names_axes() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros([1, 1, 5, 5]);
        assert!(conv2d_forward(&x, &w, None, 1, 0).is_err());
    }

    #[test]
    fn transpose_single_pixel_broadcasts_kernel() {
        let x = Tensor::new([1, 1, 1, 1], vec![5.0f32]).unwrap();
        let w = Tensor::new([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = conv_transpose2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.data(), &[5.0, 10.0, 15.0, 20.0]);
    }

    #[test]
    fn transpose_stride2_is_block_constant() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full([1, 1, 2, 2], 1.0f32);
        let y = conv_transpose2d_forward(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random([2, 3, 9, 9], &mut rng);
        let w = random([5, 3, 3, 3], &mut rng);
        let y = conv2d_forward(&x, &w, None, 2, 1).unwrap();
        let r = random([2, 5, y.shape()[2], y.shape()[3]], &mut rng);
        let back = conv_transpose2d_forward(&r, &w, None, 2, 1).unwrap();
        assert_eq!(back.shape(), x.shape());
        let lhs = y.dot(&r);
        let rhs = x.dot(&back);
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()));
    }

    #[test]
    fn tiling_does_not_change_result() {
        // 5·64·64 output columns span three 8192-column tiles.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([5, 2, 64, 64], &mut rng);
        let w = random([3, 2, 3, 3], &mut rng);
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        let want = naive_conv2d(&x, &w, None, 1, 1).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-9);
    }
}
