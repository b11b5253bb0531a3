use super::{flops, Tensor};
use crate::error::{config_err, dim_err, Result};
use crate::scalar::Scalar;

/// Geometry of a 2-D convolution with square kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, dilation 1, "same" padding, dense.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            padding: kernel.saturating_sub(1) / 2,
            groups: 1,
        }
    }

    /// Depth-wise: one `kernel x kernel` filter per channel.
    pub fn depthwise(channels: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            groups: channels,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            ..Self::new(channels, channels, kernel)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return config_err(format!("degenerate conv spec {self:?}"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return config_err(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel, self.kernel]
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    /// `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` if the window does not fit.
    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = n + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    pub fn param_count(&self, bias: bool) -> usize {
        self.weight_shape().iter().product::<usize>() + if bias { self.out_channels } else { 0 }
    }

    pub fn flops(&self, batch: usize, h: usize, w: usize, bias: bool) -> u64 {
        let (ho, wo) = (self.out_extent(h).unwrap_or(0), self.out_extent(w).unwrap_or(0));
        let out_elems = (batch * self.out_channels * ho * wo) as u64;
        flops::conv(
            out_elems,
            (self.in_channels / self.groups) as u64,
            (self.kernel * self.kernel) as u64,
            bias,
        )
    }
}

/// Index range `[lo, hi)` of output positions whose tap `offset + o * stride` lands in `[0, n)`.
#[inline]
fn valid_range(offset: isize, stride: usize, n: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = n as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.clamp(0, out as isize) as usize;
    let hi = hi.clamp(0, out as isize) as usize;
    (lo, hi.max(lo))
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
    s: usize,
    d: usize,
    p: usize,
}

impl Geometry {
    #[inline]
    fn offset(&self, tap: usize) -> isize {
        (tap * self.d) as isize - self.p as isize
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }

    /// Unfold `channels` planes into a `(channels*k*k) x (ho*wo)` matrix.
    fn im2col<T: Scalar>(&self, input: &[T], channels: usize, cols: &mut [T]) {
        let (pl, po) = (self.h * self.w, self.ho * self.wo);
        cols.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..channels {
            let plane = &input[c * pl..(c + 1) * pl];
            for kh in 0..self.k {
                let (oh_lo, oh_hi) = valid_range(self.offset(kh), self.s, self.h, self.ho);
                for kw in 0..self.k {
                    let row = (c * self.k + kh) * self.k + kw;
                    let dst = &mut cols[row * po..(row + 1) * po];
                    let off_w = self.offset(kw);
                    let (ow_lo, ow_hi) = valid_range(off_w, self.s, self.w, self.wo);
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * self.s) as isize + self.offset(kh);
                        let src = &plane[ih as usize * self.w..];
                        let d = &mut dst[oh * self.wo..];
                        for ow in ow_lo..ow_hi {
                            d[ow] = src[((ow * self.s) as isize + off_w) as usize];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add columns back into planes.
    fn col2im<T: Scalar>(&self, cols: &[T], channels: usize, output: &mut [T]) {
        let (pl, po) = (self.h * self.w, self.ho * self.wo);
        for c in 0..channels {
            let plane = &mut output[c * pl..(c + 1) * pl];
            for kh in 0..self.k {
                let (oh_lo, oh_hi) = valid_range(self.offset(kh), self.s, self.h, self.ho);
                for kw in 0..self.k {
                    let row = (c * self.k + kh) * self.k + kw;
                    let src = &cols[row * po..(row + 1) * po];
                    let off_w = self.offset(kw);
                    let (ow_lo, ow_hi) = valid_range(off_w, self.s, self.w, self.wo);
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * self.s) as isize + self.offset(kh);
                        let base = ih as usize * self.w;
                        for ow in ow_lo..ow_hi {
                            let iw = ((ow * self.s) as isize + off_w) as usize;
                            plane[base + iw] = plane[base + iw] + src[oh * self.wo + ow];
                        }
                    }
                }
            }
        }
    }

    /// Stride-1 variant of [`Self::for_each_tap`] handing out contiguous runs `(out start, in start, len)`.
    #[inline]
    fn for_each_run(&self, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize)) {
        debug_assert_eq!(self.s, 1);
        let (oh_lo, oh_hi) = valid_range(self.offset(kh), 1, self.h, self.ho);
        let off_w = self.offset(kw);
        let (ow_lo, ow_hi) = valid_range(off_w, 1, self.w, self.wo);
        if ow_hi == ow_lo {
            return;
        }
        for oh in oh_lo..oh_hi {
            let ih = (oh as isize + self.offset(kh)) as usize;
            f(oh * self.wo + ow_lo, ih * self.w + (ow_lo as isize + off_w) as usize, ow_hi - ow_lo);
        }
    }

    /// Visits every (output index, input index) pair touched by tap `(kh, kw)`.
    #[inline]
    fn for_each_tap(&self, kh: usize, kw: usize, mut f: impl FnMut(usize, usize)) {
        let (oh_lo, oh_hi) = valid_range(self.offset(kh), self.s, self.h, self.ho);
        let off_w = self.offset(kw);
        let (ow_lo, ow_hi) = valid_range(off_w, self.s, self.w, self.wo);
        for oh in oh_lo..oh_hi {
            let ih = ((oh * self.s) as isize + self.offset(kh)) as usize;
            let ob = oh * self.wo;
            let ib = ih * self.w;
            if self.s == 1 {
                let shift = ib as isize + off_w - ob as isize;
                for o in ob + ow_lo..ob + ow_hi {
                    f(o, (o as isize + shift) as usize);
                }
            } else {
                for ow in ow_lo..ow_hi {
                    f(ob + ow, (ib as isize + (ow * self.s) as isize + off_w) as usize);
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation) of a `B x C x H x W` input.
///
/// `weight` is `out x in/groups x k x k`; `bias`, when given, has one entry per
/// output channel.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: ConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let [b, cin, h, w] = x.dims4()?;
    if cin != spec.in_channels {
        return dim_err(format!("conv2d: input has {cin} channels, spec expects {}", spec.in_channels));
    }
    if weight.shape() != spec.weight_shape() {
        return dim_err(format!(
            "conv2d: weight shape {:?}, spec expects {:?}",
            weight.shape(),
            spec.weight_shape()
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [spec.out_channels] {
            return dim_err(format!("conv2d: bias shape {:?}, expected [{}]", bias.shape(), spec.out_channels));
        }
    }
    let (Some(ho), Some(wo)) = (spec.out_extent(h), spec.out_extent(w)) else {
        return dim_err(format!("conv2d: {h}x{w} input too small for {spec:?}"));
    };
    flops::add(spec.flops(b, h, w, bias.is_some()));

    let geo = Geometry {
        h,
        w,
        ho,
        wo,
        k: spec.kernel,
        s: spec.stride,
        d: spec.dilation,
        p: spec.padding,
    };
    let cout = spec.out_channels;
    let out_plane = ho * wo;
    let mut out = vec![T::zero(); b * cout * out_plane];
    if spec.is_depthwise() {
        depthwise_forward(x.data(), weight.data(), b, cin, &geo, &mut out);
    } else {
        grouped_forward(x.data(), weight.data(), b, &spec, &geo, &mut out);
    }
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_mut(out_plane).enumerate() {
            let bv = bias.data()[i % cout];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }

    let (xs, ws) = (x.clone(), weight.clone());
    let has_bias = bias.is_some();
    let mut inputs = vec![x, weight];
    if let Some(bias) = bias {
        inputs.push(bias);
    }
    Ok(Tensor::from_op("conv2d", vec![b, cout, ho, wo], out, &inputs, move |g, needs| {
        let mut gx = needs[0].then(|| vec![T::zero(); xs.numel()]);
        let mut gw = needs[1].then(|| vec![T::zero(); ws.numel()]);
        if spec.is_depthwise() {
            depthwise_backward(xs.data(), ws.data(), g, b, cin, &geo, gx.as_deref_mut(), gw.as_deref_mut());
        } else {
            grouped_backward(xs.data(), ws.data(), g, b, &spec, &geo, gx.as_deref_mut(), gw.as_deref_mut());
        }
        let mut grads = vec![gx, gw];
        if has_bias {
            let gb = needs[2].then(|| {
                let mut gb = vec![T::zero(); cout];
                for (i, chunk) in g.chunks(out_plane).enumerate() {
                    gb[i % cout] = gb[i % cout] + chunk.iter().fold(T::zero(), |a, &v| a + v);
                }
                gb
            });
            grads.push(gb);
        }
        grads
    }))
}

fn depthwise_forward<T: Scalar>(x: &[T], wt: &[T], b: usize, c: usize, geo: &Geometry, out: &mut [T]) {
    let (pl, po, kk) = (geo.h * geo.w, geo.ho * geo.wo, geo.k * geo.k);
    for n in 0..b {
        for ch in 0..c {
            let src = &x[(n * c + ch) * pl..][..pl];
            let dst = &mut out[(n * c + ch) * po..][..po];
            let kern = &wt[ch * kk..][..kk];
            for kh in 0..geo.k {
                for kw in 0..geo.k {
                    let wv = kern[kh * geo.k + kw];
                    if geo.s == 1 {
                        geo.for_each_run(kh, kw, |o, i, n| {
                            for (d, &v) in dst[o..o + n].iter_mut().zip(&src[i..i + n]) {
                                *d = *d + wv * v;
                            }
                        });
                    } else {
                        geo.for_each_tap(kh, kw, |o, i| dst[o] = dst[o] + wv * src[i]);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    g: &[T],
    b: usize,
    c: usize,
    geo: &Geometry,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (pl, po, kk) = (geo.h * geo.w, geo.ho * geo.wo, geo.k * geo.k);
    for n in 0..b {
        for ch in 0..c {
            let src = &x[(n * c + ch) * pl..][..pl];
            let gout = &g[(n * c + ch) * po..][..po];
            let kern = &wt[ch * kk..][..kk];
            for kh in 0..geo.k {
                for kw in 0..geo.k {
                    let t = kh * geo.k + kw;
                    if let Some(gx) = gx.as_deref_mut() {
                        let dst = &mut gx[(n * c + ch) * pl..][..pl];
                        let wv = kern[t];
                        if geo.s == 1 {
                            geo.for_each_run(kh, kw, |o, i, n| {
                                for (d, &v) in dst[i..i + n].iter_mut().zip(&gout[o..o + n]) {
                                    *d = *d + wv * v;
                                }
                            });
                        } else {
                            geo.for_each_tap(kh, kw, |o, i| dst[i] = dst[i] + wv * gout[o]);
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        let mut acc = T::zero();
                        if geo.s == 1 {
                            geo.for_each_run(kh, kw, |o, i, n| {
                                acc = gout[o..o + n].iter().zip(&src[i..i + n]).fold(acc, |a, (&g, &v)| a + g * v);
                            });
                        } else {
                            geo.for_each_tap(kh, kw, |o, i| acc = acc + gout[o] * src[i]);
                        }
                        gw[ch * kk + t] = gw[ch * kk + t] + acc;
                    }
                }
            }
        }
    }
}

fn grouped_forward<T: Scalar>(x: &[T], wt: &[T], b: usize, spec: &ConvSpec, geo: &Geometry, out: &mut [T]) {
    let (cin_g, cout_g) = (spec.in_channels / spec.groups, spec.out_channels / spec.groups);
    let (pl, po) = (geo.h * geo.w, geo.ho * geo.wo);
    let kdim = cin_g * geo.k * geo.k;
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * po] };
    for n in 0..b {
        for grp in 0..spec.groups {
            let src = &x[(n * spec.in_channels + grp * cin_g) * pl..][..cin_g * pl];
            let mat: &[T] = if geo.is_pointwise() {
                src
            } else {
                geo.im2col(src, cin_g, &mut cols);
                &cols
            };
            let wg = &wt[grp * cout_g * kdim..][..cout_g * kdim];
            let dst = &mut out[(n * spec.out_channels + grp * cout_g) * po..][..cout_g * po];
            T::gemm(
                cout_g,
                kdim,
                po,
                T::one(),
                wg,
                kdim as isize,
                1,
                mat,
                po as isize,
                1,
                T::zero(),
                dst,
                po as isize,
                1,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn grouped_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    g: &[T],
    b: usize,
    spec: &ConvSpec,
    geo: &Geometry,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (cin_g, cout_g) = (spec.in_channels / spec.groups, spec.out_channels / spec.groups);
    let (pl, po) = (geo.h * geo.w, geo.ho * geo.wo);
    let kdim = cin_g * geo.k * geo.k;
    let pointwise = geo.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kdim * po] };
    let mut dcols = if pointwise || gx.is_none() { Vec::new() } else { vec![T::zero(); kdim * po] };
    for n in 0..b {
        for grp in 0..spec.groups {
            let src = &x[(n * spec.in_channels + grp * cin_g) * pl..][..cin_g * pl];
            let gout = &g[(n * spec.out_channels + grp * cout_g) * po..][..cout_g * po];
            let wg = &wt[grp * cout_g * kdim..][..cout_g * kdim];
            if let Some(gw) = gw.as_deref_mut() {
                let mat: &[T] = if pointwise {
                    src
                } else {
                    geo.im2col(src, cin_g, &mut cols);
                    &cols
                };
                // dW (cout_g x kdim) += dY (cout_g x po) * cols^T (po x kdim)
                let gwg = &mut gw[grp * cout_g * kdim..][..cout_g * kdim];
                T::gemm(
                    cout_g,
                    po,
                    kdim,
                    T::one(),
                    gout,
                    po as isize,
                    1,
                    mat,
                    1,
                    po as isize,
                    T::one(),
                    gwg,
                    kdim as isize,
                    1,
                );
            }
            if let Some(gx) = gx.as_deref_mut() {
                let dst = &mut gx[(n * spec.in_channels + grp * cin_g) * pl..][..cin_g * pl];
                // dcols (kdim x po) = W^T (kdim x cout_g) * dY (cout_g x po)
                if pointwise {
                    T::gemm(
                        kdim,
                        cout_g,
                        po,
                        T::one(),
                        wg,
                        1,
                        kdim as isize,
                        gout,
                        po as isize,
                        1,
                        T::one(),
                        dst,
                        po as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        kdim,
                        cout_g,
                        po,
                        T::one(),
                        wg,
                        1,
                        kdim as isize,
                        gout,
                        po as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        po as isize,
                        1,
                    );
                    geo.col2im(&dcols, cin_g, dst);
                }
            }
        }
    }
}
