//! Dense CHW feature maps and the handful of layers the U-Net needs, each
//! with an explicit backward pass. Convolutions lower to GEMM via im2col.

use crate::scalar::Scalar;

/// `channels × height × width` activation tensor, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Tokens as a row-major `(h·w) × channels` matrix.
    pub fn to_tokens(&self) -> Vec<T> {
        let n = self.plane();
        let mut out = vec![T::zero(); n * self.channels];
        for c in 0..self.channels {
            for (i, &v) in self.channel(c).iter().enumerate() {
                out[i * self.channels + c] = v;
            }
        }
        out
    }

    /// Inverse of [`FeatureMap::to_tokens`].
    pub fn from_tokens(tokens: &[T], channels: usize, height: usize, width: usize) -> Self {
        let n = height * width;
        assert_eq!(tokens.len(), n * channels);
        let mut data = vec![T::zero(); n * channels];
        for i in 0..n {
            for c in 0..channels {
                data[c * n + i] = tokens[i * channels + c];
            }
        }
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }
}

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn same3x3(cin: usize, cout: usize) -> Self {
        ConvGeom {
            cin,
            cout,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn down3x3(cin: usize, cout: usize) -> Self {
        ConvGeom {
            cin,
            cout,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        ConvGeom {
            cin,
            cout,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

fn im2col<T: Scalar>(x: &FeatureMap<T>, g: &ConvGeom, oh: usize, ow: usize) -> Vec<T> {
    let k = g.kernel;
    let mut cols = vec![T::zero(); g.cin * k * k * oh * ow];
    for c in 0..g.cin {
        let src = x.channel(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * x.width..(iy as usize + 1) * x.width];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < x.width as isize {
                            *d = srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, h: usize, w: usize, oh: usize, ow: usize) -> FeatureMap<T> {
    let k = g.kernel;
    let mut dx = FeatureMap::zeros(g.cin, h, w);
    let plane = h * w;
    for c in 0..g.cin {
        let dst = &mut dx.data[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d<T: Scalar>(x: &FeatureMap<T>, g: &ConvGeom, weight: &[T], bias: &[T]) -> FeatureMap<T> {
    assert_eq!(x.channels, g.cin, "conv input channels");
    assert_eq!(weight.len(), g.weight_len());
    assert_eq!(bias.len(), g.cout);
    let (oh, ow) = g.out_dims(x.height, x.width);
    let n = oh * ow;
    let kk = g.cin * g.kernel * g.kernel;
    let mut out = FeatureMap::zeros(g.cout, oh, ow);
    for (co, &b) in bias.iter().enumerate() {
        out.data[co * n..(co + 1) * n].fill(b);
    }
    if g.kernel == 1 && g.stride == 1 && g.pad == 0 {
        T::gemm(g.cout, kk, n, T::one(), weight, kk as isize, 1, &x.data, n as isize, 1, T::one(), &mut out.data, n as isize, 1);
    } else {
        let cols = im2col(x, g, oh, ow);
        T::gemm(g.cout, kk, n, T::one(), weight, kk as isize, 1, &cols, n as isize, 1, T::one(), &mut out.data, n as isize, 1);
    }
    out
}

/// Accumulates `dweight`/`dbias` and returns the input gradient when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &FeatureMap<T>,
    g: &ConvGeom,
    weight: &[T],
    dy: &FeatureMap<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<FeatureMap<T>> {
    let (oh, ow) = (dy.height, dy.width);
    let n = oh * ow;
    let kk = g.cin * g.kernel * g.kernel;
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dy.data[co * n..(co + 1) * n].iter().copied().sum::<T>();
    }
    let pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    let owned;
    let cols: &[T] = if pointwise {
        &x.data
    } else {
        owned = im2col(x, g, oh, ow);
        &owned
    };
    // dW[cout, kk] += dy[cout, n] · cols[kk, n]ᵀ
    T::gemm(g.cout, n, kk, T::one(), &dy.data, n as isize, 1, cols, 1, n as isize, T::one(), dweight, kk as isize, 1);
    if !need_dx {
        return None;
    }
    // dcols[kk, n] = Wᵀ · dy
    let mut dcols = vec![T::zero(); kk * n];
    T::gemm(kk, g.cout, n, T::one(), weight, 1, kk as isize, &dy.data, n as isize, 1, T::zero(), &mut dcols, n as isize, 1);
    if pointwise {
        Some(FeatureMap::from_vec(g.cin, x.height, x.width, dcols))
    } else {
        Some(col2im(&dcols, g, x.height, x.width, oh, ow))
    }
}

/// 2×2 stride-2 transposed convolution; weight layout `[cout·4, cin]` with
/// row `co·4 + dy·2 + dx`.
pub fn upconv2x2<T: Scalar>(x: &FeatureMap<T>, cout: usize, weight: &[T], bias: &[T]) -> FeatureMap<T> {
    let cin = x.channels;
    assert_eq!(weight.len(), cout * 4 * cin);
    let n = x.plane();
    let mut tmp = vec![T::zero(); cout * 4 * n];
    T::gemm(cout * 4, cin, n, T::one(), weight, cin as isize, 1, &x.data, n as isize, 1, T::zero(), &mut tmp, n as isize, 1);
    let (oh, ow) = (x.height * 2, x.width * 2);
    let mut out = FeatureMap::zeros(cout, oh, ow);
    for co in 0..cout {
        for q in 0..4 {
            let (dy, dx) = (q / 2, q % 2);
            let src = &tmp[(co * 4 + q) * n..(co * 4 + q + 1) * n];
            for y in 0..x.height {
                for xx in 0..x.width {
                    out.data[co * oh * ow + (2 * y + dy) * ow + 2 * xx + dx] = src[y * x.width + xx] + bias[co];
                }
            }
        }
    }
    out
}

pub fn upconv2x2_backward<T: Scalar>(
    x: &FeatureMap<T>,
    cout: usize,
    weight: &[T],
    dy: &FeatureMap<T>,
    dweight: &mut [T],
    dbias: &mut [T],
) -> FeatureMap<T> {
    let cin = x.channels;
    let n = x.plane();
    let (oh, ow) = (dy.height, dy.width);
    let mut dtmp = vec![T::zero(); cout * 4 * n];
    for co in 0..cout {
        let mut acc = T::zero();
        for q in 0..4 {
            let (qy, qx) = (q / 2, q % 2);
            let dst = &mut dtmp[(co * 4 + q) * n..(co * 4 + q + 1) * n];
            for y in 0..x.height {
                for xx in 0..x.width {
                    let v = dy.data[co * oh * ow + (2 * y + qy) * ow + 2 * xx + qx];
                    dst[y * x.width + xx] = v;
                    acc += v;
                }
            }
        }
        dbias[co] += acc;
    }
    T::gemm(cout * 4, n, cin, T::one(), &dtmp, n as isize, 1, &x.data, 1, n as isize, T::one(), dweight, cin as isize, 1);
    let mut dx = FeatureMap::zeros(cin, x.height, x.width);
    T::gemm(cin, cout * 4, n, T::one(), weight, 1, cin as isize, &dtmp, n as isize, 1, T::zero(), &mut dx.data, n as isize, 1);
    dx
}

pub fn relu_inplace<T: Scalar>(x: &mut FeatureMap<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` in place by the positivity of the ReLU output.
pub fn relu_backward_inplace<T: Scalar>(out: &FeatureMap<T>, dy: &mut FeatureMap<T>) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// 2×2 max pool; returns the pooled map and the flat argmax per output.
pub fn maxpool2x2<T: Scalar>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<u32>) {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    let mut arg = vec![0u32; x.channels * oh * ow];
    for c in 0..x.channels {
        let base = c * x.plane();
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * x.width + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * x.width + 2 * xx + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = c * oh * ow + y * ow + xx;
                out.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2x2_backward<T: Scalar>(input_shape: (usize, usize, usize), arg: &[u32], dy: &FeatureMap<T>) -> FeatureMap<T> {
    let mut dx = FeatureMap::zeros(input_shape.0, input_shape.1, input_shape.2);
    for (&a, &g) in arg.iter().zip(&dy.data) {
        dx.data[a as usize] += g;
    }
    dx
}

/// Channel concatenation `[a; b]`.
pub fn concat<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    assert_eq!((a.height, a.width), (b.height, b.width), "concat spatial dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap::from_vec(a.channels + b.channels, a.height, a.width, data)
}

pub fn split<T: Scalar>(d: &FeatureMap<T>, first: usize) -> (FeatureMap<T>, FeatureMap<T>) {
    let cut = first * d.plane();
    (
        FeatureMap::from_vec(first, d.height, d.width, d.data[..cut].to_vec()),
        FeatureMap::from_vec(d.channels - first, d.height, d.width, d.data[cut..].to_vec()),
    )
}
