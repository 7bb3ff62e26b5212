//! Layer primitives and their exact backward passes.

use rand::Rng;
use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Kernel and bias of one convolution, weights laid out `out × in × k × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Real = f64> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        ConvParams {
            out_channels,
            in_channels,
            kernel,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn fan_out(&self) -> usize {
        self.out_channels * self.kernel * self.kernel
    }
}

/// Convolutions with `k > 1` run as `k²` shifted products over a "wide" output
/// grid of `ho × w` positions whose last `k − 1` columns per row are scratch.
/// Tap `(ky, kx)` reads the input at flat offset `ky·w + kx`, so every operand
/// is a plain strided view and no patch matrix is built.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let src = (ci * h + oy + ky) * w + kx;
                    dst[oy * wo..(oy + 1) * wo].copy_from_slice(&x[src..src + wo]);
                }
            }
        }
    }
}

const NARROW_INPUT: usize = 8;

struct Wide {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl Wide {
    fn new(c: usize, h: usize, w: usize, k: usize) -> Self {
        Wide {
            c,
            h,
            w,
            k,
            ho: h - k + 1,
            wo: w - k + 1,
        }
    }

    /// Wide positions actually computed; the tail stays inside the input.
    fn span(&self) -> usize {
        self.ho * self.w - (self.k - 1)
    }

    fn offset(&self, tap: usize) -> usize {
        (tap / self.k) * self.w + tap % self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn check_conv(input: &Tensor<impl Real>, cp_in: usize, k: usize) -> Result<()> {
    if input.c != cp_in {
        return Err(Error::Dimensions(format!(
            "convolution expects {cp_in} input channels, got {}",
            input.c
        )));
    }
    if input.h < k || input.w < k {
        return Err(Error::Dimensions(format!(
            "input {}x{} smaller than kernel {k}",
            input.h, input.w
        )));
    }
    Ok(())
}

/// Valid cross-correlation: `F_o = b_o + Σ_c W_{o,c} ⋆ X_c`.
pub fn conv2d_valid<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let k = params.kernel;
    check_conv(input, params.in_channels, k)?;
    let (ho, wo) = (input.h - k + 1, input.w - k + 1);
    let p = ho * wo;
    let q = params.in_channels * k * k;
    let o = params.out_channels;
    let mut out = Tensor::zeros(input.n, o, ho, wo);
    out.data.par_chunks_mut(o * p).enumerate().for_each(|(s, dst)| {
        for (oc, row) in dst.chunks_mut(p).enumerate() {
            row.fill(params.bias[oc]);
        }
        let x = input.sample(s);
        if k == 1 {
            T::gemm(
                o,
                q,
                p,
                T::one(),
                &params.weight,
                (q as isize, 1),
                x,
                (p as isize, 1),
                T::one(),
                dst,
                (p as isize, 1),
            );
        } else {
            let g = Wide::new(input.c, input.h, input.w, k);
            let stride = g.ho * g.w;
            let mut wide = vec![T::zero(); o * stride];
            for tap in 0..k * k {
                T::gemm(
                    o,
                    g.c,
                    g.span(),
                    T::one(),
                    &params.weight[tap..],
                    (q as isize, (k * k) as isize),
                    &x[g.offset(tap)..],
                    (g.plane() as isize, 1),
                    T::one(),
                    &mut wide,
                    (stride as isize, 1),
                );
            }
            for (row, src) in dst.chunks_mut(p).zip(wide.chunks(stride)) {
                for (d, s) in row.chunks_mut(g.wo).zip(src.chunks(g.w)) {
                    d.iter_mut().zip(s).for_each(|(d, &s)| *d += s);
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of a convolution. `grad_input` is skipped when `need_input` is false.
pub struct ConvGrads<T: Real> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let k = params.kernel;
    check_conv(input, params.in_channels, k)?;
    let (ho, wo) = (input.h - k + 1, input.w - k + 1);
    if grad_out.shape() != [input.n, params.out_channels, ho, wo] {
        return Err(Error::Dimensions(
            "convolution output gradient has the wrong shape".into(),
        ));
    }
    let p = ho * wo;
    let q = params.in_channels * k * k;
    let o = params.out_channels;
    let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..input.n)
        .into_par_iter()
        .map(|s| {
            let x = input.sample(s);
            let g = grad_out.sample(s);
            let gb: Vec<T> = g.chunks(p).map(|row| row.iter().copied().sum()).collect();
            let mut gw = vec![T::zero(); o * q];
            if k == 1 {
                // gW = gout · xᵀ
                T::gemm(
                    o,
                    p,
                    q,
                    T::one(),
                    g,
                    (p as isize, 1),
                    x,
                    (1, p as isize),
                    T::zero(),
                    &mut gw,
                    (q as isize, 1),
                );
                let gx = need_input.then(|| {
                    let mut gx = vec![T::zero(); q * p];
                    T::gemm(
                        q,
                        o,
                        p,
                        T::one(),
                        &params.weight,
                        (1, q as isize),
                        g,
                        (p as isize, 1),
                        T::zero(),
                        &mut gx,
                        (p as isize, 1),
                    );
                    gx
                });
                return (gw, gb, gx);
            }
            let geo = Wide::new(input.c, input.h, input.w, k);
            let stride = geo.ho * geo.w;
            // output gradient on the wide grid, zero in the scratch columns
            let mut gwide = vec![T::zero(); o * stride];
            for (dst, src) in gwide.chunks_mut(stride).zip(g.chunks(p)) {
                for (d, s) in dst.chunks_mut(geo.w).zip(src.chunks(geo.wo)) {
                    d[..geo.wo].copy_from_slice(s);
                }
            }
            let kk = (k * k) as isize;
            // few input channels make the per-tap weight products too narrow
            if geo.c < NARROW_INPUT {
                let mut col = vec![T::zero(); q * p];
                im2col(x, input.c, input.h, input.w, k, &mut col);
                T::gemm(
                    o,
                    p,
                    q,
                    T::one(),
                    g,
                    (p as isize, 1),
                    &col,
                    (1, p as isize),
                    T::zero(),
                    &mut gw,
                    (q as isize, 1),
                );
            } else {
                for tap in 0..k * k {
                    T::gemm(
                        o,
                        geo.span(),
                        geo.c,
                        T::one(),
                        &gwide,
                        (stride as isize, 1),
                        &x[geo.offset(tap)..],
                        (1, geo.plane() as isize),
                        T::zero(),
                        &mut gw[tap..],
                        (q as isize, kk),
                    );
                }
            }
            let gx = need_input.then(|| {
                let mut gx = vec![T::zero(); geo.c * geo.plane()];
                for tap in 0..k * k {
                    T::gemm(
                        geo.c,
                        o,
                        geo.span(),
                        T::one(),
                        &params.weight[tap..],
                        (kk, q as isize),
                        &gwide,
                        (stride as isize, 1),
                        T::one(),
                        &mut gx[geo.offset(tap)..],
                        (geo.plane() as isize, 1),
                    );
                }
                gx
            });
            (gw, gb, gx)
        })
        .collect();
    // fixed-order reduction over the batch
    let mut weight = vec![T::zero(); o * q];
    let mut bias = vec![T::zero(); o];
    let mut gin = need_input.then(|| Tensor::zeros(input.n, input.c, input.h, input.w));
    for (s, (gw, gb, gx)) in per_sample.into_iter().enumerate() {
        weight.iter_mut().zip(&gw).for_each(|(a, &b)| *a += b);
        bias.iter_mut().zip(&gb).for_each(|(a, &b)| *a += b);
        if let (Some(t), Some(gx)) = (gin.as_mut(), gx) {
            t.sample_mut(s).copy_from_slice(&gx);
        }
    }
    Ok(ConvGrads {
        weight,
        bias,
        input: gin,
    })
}

pub fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = t.clone();
    out.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
    out
}

/// Backward through ReLU given its output: passes gradient where output > 0.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let mut g = grad.clone();
    g.data.iter_mut().zip(&output.data).for_each(|(gv, &y)| {
        if y <= T::zero() {
            *gv = T::zero();
        }
    });
    g
}

/// Argmax positions of a 2×2 max-pool, as flat indices into the pooled input.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_shape: [usize; 4],
    pub argmax: Vec<u32>,
}

pub fn maxpool2x2<T: Real>(t: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    if t.h % 2 != 0 || t.w % 2 != 0 {
        return Err(Error::Dimensions(format!(
            "max-pool needs even dims, got {}x{}",
            t.h, t.w
        )));
    }
    let (ho, wo) = (t.h / 2, t.w / 2);
    let mut out = Tensor::zeros(t.n, t.c, ho, wo);
    let mut argmax = Vec::with_capacity(out.len());
    let mut oi = 0;
    for plane in 0..t.n * t.c {
        let base = plane * t.h * t.w;
        for y in 0..ho {
            for x in 0..wo {
                let mut best = base + 2 * y * t.w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * t.w + 2 * x + dx;
                    // first maximum in scan order wins ties
                    if t.data[i] > t.data[best] {
                        best = i;
                    }
                }
                out.data[oi] = t.data[best];
                argmax.push(best as u32);
                oi += 1;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: t.shape(),
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward<T: Real>(idx: &PoolIndices, grad: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = idx.input_shape;
    let mut g = Tensor::zeros(n, c, h, w);
    for (&i, &v) in idx.argmax.iter().zip(&grad.data) {
        g.data[i as usize] += v;
    }
    g
}

pub fn upsample_nearest2x<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (t.h * 2, t.w * 2);
    let mut out = Tensor::zeros(t.n, t.c, h2, w2);
    for plane in 0..t.n * t.c {
        let src = &t.data[plane * t.h * t.w..(plane + 1) * t.h * t.w];
        let dst = &mut out.data[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h2 {
            for x in 0..w2 {
                dst[y * w2 + x] = src[(y / 2) * t.w + x / 2];
            }
        }
    }
    out
}

/// Block-sums the incoming gradient over each replicated 2×2 block.
pub fn upsample_nearest2x_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (grad.h / 2, grad.w / 2);
    let mut out = Tensor::zeros(grad.n, grad.c, h, w);
    for plane in 0..grad.n * grad.c {
        let src = &grad.data[plane * grad.h * grad.w..(plane + 1) * grad.h * grad.w];
        let dst = &mut out.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..grad.h {
            for x in 0..grad.w {
                dst[(y / 2) * w + x / 2] += src[y * grad.w + x];
            }
        }
    }
    out
}

fn crop_margins(skip: [usize; 4], up: [usize; 4]) -> Result<(usize, usize)> {
    if skip[0] != up[0] {
        return Err(Error::Dimensions(format!(
            "batch mismatch: skip {} vs up {}",
            skip[0], up[0]
        )));
    }
    if skip[2] < up[2] || skip[3] < up[3] {
        return Err(Error::Dimensions("skip connection smaller than upsampled map".into()));
    }
    let (dh, dw) = (skip[2] - up[2], skip[3] - up[3]);
    if dh % 2 != 0 || dw % 2 != 0 {
        return Err(Error::Dimensions(format!("odd crop margin ({dh}, {dw})")));
    }
    Ok((dh / 2, dw / 2))
}

/// Centre-crops `skip` to `up`'s size and concatenates, skip channels first.
pub fn crop_concat<T: Real>(skip: &Tensor<T>, up: &Tensor<T>) -> Result<Tensor<T>> {
    let (my, mx) = crop_margins(skip.shape(), up.shape())?;
    let c = skip.c + up.c;
    let mut out = Tensor::zeros(up.n, c, up.h, up.w);
    let hw = up.h * up.w;
    for n in 0..up.n {
        for ch in 0..skip.c {
            for y in 0..up.h {
                let src = ((n * skip.c + ch) * skip.h + y + my) * skip.w + mx;
                let dst = ((n * c + ch) * up.h + y) * up.w;
                out.data[dst..dst + up.w].copy_from_slice(&skip.data[src..src + up.w]);
            }
        }
        let dst = (n * c + skip.c) * hw;
        out.data[dst..dst + up.c * hw].copy_from_slice(up.sample(n));
    }
    Ok(out)
}

/// Splits a concatenated gradient into (skip gradient at full skip size, up gradient).
pub fn crop_concat_backward<T: Real>(
    grad: &Tensor<T>,
    skip_shape: [usize; 4],
    up_channels: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let up_shape = [grad.n, up_channels, grad.h, grad.w];
    let (my, mx) = crop_margins(skip_shape, up_shape)?;
    let [n, sc, sh, sw] = skip_shape;
    if grad.c != sc + up_channels {
        return Err(Error::Dimensions(
            "concatenated gradient has the wrong channel count".into(),
        ));
    }
    let mut gs = Tensor::zeros(n, sc, sh, sw);
    let mut gu = Tensor::zeros(n, up_channels, grad.h, grad.w);
    let hw = grad.h * grad.w;
    for b in 0..n {
        for ch in 0..sc {
            for y in 0..grad.h {
                let src = ((b * grad.c + ch) * grad.h + y) * grad.w;
                let dst = ((b * sc + ch) * sh + y + my) * sw + mx;
                gs.data[dst..dst + grad.w].copy_from_slice(&grad.data[src..src + grad.w]);
            }
        }
        let src = (b * grad.c + sc) * hw;
        gu.sample_mut(b)
            .copy_from_slice(&grad.data[src..src + up_channels * hw]);
    }
    Ok((gs, gu))
}

/// Whether dropout removes whole feature maps or individual units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropoutKind {
    Spatial,
    Standard,
}

impl DropoutKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DropoutKind::Spatial => "spatial",
            DropoutKind::Standard => "standard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "spatial" => Some(DropoutKind::Spatial),
            "standard" => Some(DropoutKind::Standard),
            _ => None,
        }
    }
}

/// Multipliers applied by one dropout layer: per (sample, channel) for
/// spatial dropout, per element for standard dropout. Kept entries hold
/// `1/(1−p)`, dropped ones zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T: Real = f64> {
    pub kind: DropoutKind,
    pub scale: Vec<T>,
}

pub fn dropout<T: Real, R: Rng + ?Sized>(
    t: &Tensor<T>,
    p: f64,
    kind: DropoutKind,
    rng: &mut R,
    training: bool,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    let units = match kind {
        DropoutKind::Spatial => t.n * t.c,
        DropoutKind::Standard => t.len(),
    };
    if !training || p == 0.0 {
        return Ok((
            t.clone(),
            DropoutMask {
                kind,
                scale: vec![T::one(); units],
            },
        ));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let scale: Vec<T> = (0..units)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let mask = DropoutMask { kind, scale };
    Ok((apply_dropout_mask(t, &mask), mask))
}

pub fn spatial_dropout<T: Real, R: Rng + ?Sized>(
    t: &Tensor<T>,
    p: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    dropout(t, p, DropoutKind::Spatial, rng, training)
}

/// Multiplies by the mask; also the backward pass of dropout.
pub fn apply_dropout_mask<T: Real>(t: &Tensor<T>, mask: &DropoutMask<T>) -> Tensor<T> {
    let mut out = t.clone();
    match mask.kind {
        DropoutKind::Spatial => {
            let hw = t.h * t.w;
            for (chunk, &s) in out.data.chunks_mut(hw).zip(&mask.scale) {
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        }
        DropoutKind::Standard => {
            out.data.iter_mut().zip(&mask.scale).for_each(|(v, &s)| *v *= s);
        }
    }
    out
}

/// Per-pixel softmax over the channel axis, max-subtracted.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let hw = logits.h * logits.w;
    for n in 0..logits.n {
        let s = out.sample_mut(n);
        for i in 0..hw {
            let mut m = T::neg_infinity();
            for c in 0..logits.c {
                m = m.max(s[c * hw + i]);
            }
            let mut z = T::zero();
            for c in 0..logits.c {
                let e = (s[c * hw + i] - m).exp();
                s[c * hw + i] = e;
                z += e;
            }
            for c in 0..logits.c {
                s[c * hw + i] /= z;
            }
        }
    }
    out
}
