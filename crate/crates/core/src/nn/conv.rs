//! Grouped 2-D convolution as a candle custom op.
//!
//! Candle's built-in CPU convolution splits grouped convolutions into one
//! kernel launch per group and runs the input gradient through a naive
//! transposed convolution. Both paths are slow for the small-channel,
//! depthwise-heavy networks trained here, so forward and backward are
//! implemented directly with im2col and GEMM.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Result, Shape, Tensor};

/// Static geometry of a convolution. Square kernels, symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

trait GemmScalar: Copy + Default + std::ops::AddAssign + 'static {
    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
    fn zero() -> Self;
    fn one() -> Self;
}

impl GemmScalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

impl GemmScalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

/// Dimensions shared by the three kernels.
#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    oh: usize,
    ow: usize,
    geo: ConvGeometry,
}

impl Dims {
    fn cin_g(&self) -> usize {
        self.c_in / self.geo.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.geo.groups
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    fn pixels(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.geo.stride == 1 && self.geo.padding == 0
    }
}

/// Fill `cols` (`cin_g·k·k` rows × `oh·ow` columns) from one group of one image.
fn im2col<T: GemmScalar>(x: &[T], d: &Dims, cols: &mut [T]) {
    let (k, s, p) = (d.k, d.geo.stride as isize, d.geo.padding as isize);
    let pix = d.pixels();
    for ci in 0..d.cin_g() {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut cols[row * pix..(row + 1) * pix];
                for oy in 0..d.oh {
                    let iy = oy as isize * s + ky as isize - p;
                    let dst = &mut out[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols` back into one group of one image gradient.
fn col2im<T: GemmScalar>(cols: &[T], d: &Dims, dx: &mut [T]) {
    let (k, s, p) = (d.k, d.geo.stride as isize, d.geo.padding as isize);
    let pix = d.pixels();
    for ci in 0..d.cin_g() {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * pix..(row + 1) * pix];
                for oy in 0..d.oh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: GemmScalar>(x: &[T], w: &[T], d: &Dims) -> Vec<T> {
    let (pix, rows, cin_g, cout_g) = (d.pixels(), d.col_rows(), d.cin_g(), d.cout_g());
    let mut y = vec![T::zero(); d.batch * d.c_out * pix];
    let mut cols = vec![T::zero(); if d.is_pointwise() { 0 } else { rows * pix }];
    for b in 0..d.batch {
        for g in 0..d.geo.groups {
            let xg = &x[(b * d.c_in + g * cin_g) * d.h * d.w..];
            let cols_ptr = if d.is_pointwise() {
                xg.as_ptr()
            } else {
                im2col(xg, d, &mut cols);
                cols.as_ptr()
            };
            let wg = &w[g * cout_g * rows..];
            let yg = &mut y[(b * d.c_out + g * cout_g) * pix..];
            unsafe {
                T::gemm(
                    cout_g,
                    rows,
                    pix,
                    wg.as_ptr(),
                    rows as isize,
                    1,
                    cols_ptr,
                    pix as isize,
                    1,
                    T::zero(),
                    yg.as_mut_ptr(),
                    pix as isize,
                    1,
                );
            }
        }
    }
    y
}

fn backward_input<T: GemmScalar>(dy: &[T], w: &[T], d: &Dims) -> Vec<T> {
    let (pix, rows, cin_g, cout_g) = (d.pixels(), d.col_rows(), d.cin_g(), d.cout_g());
    let mut dx = vec![T::zero(); d.batch * d.c_in * d.h * d.w];
    let mut dcols = vec![T::zero(); rows * pix];
    for b in 0..d.batch {
        for g in 0..d.geo.groups {
            let wg = &w[g * cout_g * rows..];
            let dyg = &dy[(b * d.c_out + g * cout_g) * pix..];
            let dxg = &mut dx[(b * d.c_in + g * cin_g) * d.h * d.w..];
            // dcols = Wᵀ · dY
            let target = if d.is_pointwise() {
                dxg.as_mut_ptr()
            } else {
                dcols.as_mut_ptr()
            };
            unsafe {
                T::gemm(
                    rows,
                    cout_g,
                    pix,
                    wg.as_ptr(),
                    1,
                    rows as isize,
                    dyg.as_ptr(),
                    pix as isize,
                    1,
                    T::zero(),
                    target,
                    pix as isize,
                    1,
                );
            }
            if !d.is_pointwise() {
                col2im(&dcols, d, dxg);
            }
        }
    }
    dx
}

fn backward_weight<T: GemmScalar>(x: &[T], dy: &[T], d: &Dims) -> Vec<T> {
    let (pix, rows, cin_g, cout_g) = (d.pixels(), d.col_rows(), d.cin_g(), d.cout_g());
    let mut dw = vec![T::zero(); d.c_out * rows];
    let mut cols = vec![T::zero(); if d.is_pointwise() { 0 } else { rows * pix }];
    for b in 0..d.batch {
        for g in 0..d.geo.groups {
            let xg = &x[(b * d.c_in + g * cin_g) * d.h * d.w..];
            let cols_ptr = if d.is_pointwise() {
                xg.as_ptr()
            } else {
                im2col(xg, d, &mut cols);
                cols.as_ptr()
            };
            let dyg = &dy[(b * d.c_out + g * cout_g) * pix..];
            let dwg = &mut dw[g * cout_g * rows..];
            // dW += dY · colsᵀ
            unsafe {
                T::gemm(
                    cout_g,
                    pix,
                    rows,
                    dyg.as_ptr(),
                    pix as isize,
                    1,
                    cols_ptr,
                    1,
                    pix as isize,
                    T::one(),
                    dwg.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
        }
    }
    dw
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d: {what} must be contiguous"),
    }
}

fn dims4(layout: &Layout, what: &str) -> Result<(usize, usize, usize, usize)> {
    match layout.shape().dims() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        other => candle_core::bail!("conv2d: {what} must be rank 4, got {other:?}"),
    }
}

fn validate(x: &Layout, w: &Layout, geo: ConvGeometry) -> Result<Dims> {
    let (batch, c_in, h, wd) = dims4(x, "input")?;
    let (c_out, cin_g, kh, kw) = dims4(w, "kernel")?;
    if kh != kw {
        candle_core::bail!("conv2d: only square kernels are supported, got {kh}x{kw}");
    }
    if geo.groups == 0 || c_in % geo.groups != 0 || c_out % geo.groups != 0 {
        candle_core::bail!(
            "conv2d: channels ({c_in} in, {c_out} out) not divisible by groups {}",
            geo.groups
        );
    }
    if c_in / geo.groups != cin_g {
        candle_core::bail!(
            "conv2d: kernel expects {cin_g} input channels per group, input has {}",
            c_in / geo.groups
        );
    }
    if h + 2 * geo.padding < kh || wd + 2 * geo.padding < kw {
        candle_core::bail!("conv2d: kernel {kh} larger than padded input {h}x{wd}");
    }
    Ok(Dims {
        batch,
        c_in,
        h,
        w: wd,
        c_out,
        k: kh,
        oh: geo.out_size(h, kh),
        ow: geo.out_size(wd, kw),
        geo,
    })
}

#[derive(Debug, Clone, Copy)]
struct Conv2dOp {
    geo: ConvGeometry,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "semc-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = validate(l1, l2, self.geo)?;
        let shape = Shape::from((d.batch, d.c_out, d.oh, d.ow));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(forward(
                contiguous(x, l1, "input")?,
                contiguous(w, l2, "kernel")?,
                &d,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(forward(
                contiguous(x, l1, "input")?,
                contiguous(w, l2, "kernel")?,
                &d,
            )),
            _ => candle_core::bail!("conv2d: unsupported or mismatched dtypes"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(
            w,
            &InputGradOp {
                geo: self.geo,
                input_shape: x.dims4()?,
            },
        )?;
        let dw = x.apply_op2_no_bwd(
            &grad,
            &WeightGradOp {
                geo: self.geo,
                kernel_shape: w.dims4()?,
            },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

#[derive(Debug, Clone, Copy)]
struct InputGradOp {
    geo: ConvGeometry,
    input_shape: (usize, usize, usize, usize),
}

impl CustomOp2 for InputGradOp {
    fn name(&self) -> &'static str {
        "semc-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x_layout = Layout::contiguous(self.input_shape);
        let d = validate(&x_layout, l2, self.geo)?;
        if l1.shape().dims() != [d.batch, d.c_out, d.oh, d.ow] {
            candle_core::bail!("conv2d input-grad: gradient shape {:?}", l1.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(dy), CpuStorage::F32(w)) => CpuStorage::F32(backward_input(
                contiguous(dy, l1, "grad")?,
                contiguous(w, l2, "kernel")?,
                &d,
            )),
            (CpuStorage::F64(dy), CpuStorage::F64(w)) => CpuStorage::F64(backward_input(
                contiguous(dy, l1, "grad")?,
                contiguous(w, l2, "kernel")?,
                &d,
            )),
            _ => candle_core::bail!("conv2d input-grad: unsupported or mismatched dtypes"),
        };
        Ok((out, Shape::from(self.input_shape)))
    }
}

#[derive(Debug, Clone, Copy)]
struct WeightGradOp {
    geo: ConvGeometry,
    kernel_shape: (usize, usize, usize, usize),
}

impl CustomOp2 for WeightGradOp {
    fn name(&self) -> &'static str {
        "semc-conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let w_layout = Layout::contiguous(self.kernel_shape);
        let d = validate(l1, &w_layout, self.geo)?;
        if l2.shape().dims() != [d.batch, d.c_out, d.oh, d.ow] {
            candle_core::bail!("conv2d weight-grad: gradient shape {:?}", l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(dy)) => CpuStorage::F32(backward_weight(
                contiguous(x, l1, "input")?,
                contiguous(dy, l2, "grad")?,
                &d,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(dy)) => CpuStorage::F64(backward_weight(
                contiguous(x, l1, "input")?,
                contiguous(dy, l2, "grad")?,
                &d,
            )),
            _ => candle_core::bail!("conv2d weight-grad: unsupported or mismatched dtypes"),
        };
        Ok((out, Shape::from(self.kernel_shape)))
    }
}

/// Differentiable grouped convolution of `x` (B×Cin×H×W) with `kernel`
/// (Cout×Cin/groups×k×k). No bias.
pub fn conv2d(x: &Tensor, kernel: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    match x.dtype() {
        DType::F32 | DType::F64 => {}
        dt => candle_core::bail!("conv2d: unsupported dtype {dt:?}"),
    }
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    x.apply_op2(&kernel, Conv2dOp { geo })
}
