//! Gaze augment alignment.
//!
//! A strided conv extractor turns the gaze heatmap into query tokens `f_G` on
//! the bottleneck grid. They attend over the frozen teacher tokens `f_T`:
//!
//! ```text
//! f_GA = concat(f_T, softmax(f_G f_Tᵀ / √d) f_T)
//! ```
//!
//! A learned linear map brings the `2d`-dim fused tokens back to `d` dims and
//! the student bottleneck `f_S` is pulled towards it with a mean-squared error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{init_normal, NamedTensor};
use crate::error::{Error, Result};
use crate::gaze::GazeHeatmap;
use crate::nn::{self, ConvGeom, FeatureMap};
use crate::scalar::Scalar;

/// Query tokens derived from a gaze heatmap, row-major `n × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeFeature<T> {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub tokens: Vec<T>,
}

impl<T> GazeFeature<T> {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fused tokens `n × 2d`, plus the attention matrix that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature<T> {
    pub tokens: usize,
    pub dim: usize,
    /// Row-major `n × 2d`; the first `d` entries of each row are `f_T`.
    pub values: Vec<T>,
    /// Row-stochastic `n × n` attention weights.
    pub attention: Vec<T>,
}

impl<T: Scalar> FusedFeature<T> {
    pub fn token(&self, i: usize) -> &[T] {
        &self.values[i * 2 * self.dim..(i + 1) * 2 * self.dim]
    }
}

/// Extractor convolutions followed by the `2d → d` projection, stored as named
/// tensors so they can ride along in a student checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct GaaParams<T> {
    widths: Vec<usize>,
    tensors: Vec<NamedTensor<T>>,
}

impl<T: Scalar> GaaParams<T> {
    /// `widths[k]` is the output channel count of extractor stage `k`; the
    /// number of stages is the downsampling depth and the last width is `d`.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidConfig("extractor widths must be nonempty and positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6761_615f_6578_7472);
        let mut tensors = Vec::new();
        let mut cin = 1;
        for (k, &c) in widths.iter().enumerate() {
            let g = ConvGeom::down3x3(cin, c);
            let gain = if k + 1 == widths.len() { 1.0 } else { 2.0 };
            tensors.push(NamedTensor {
                name: format!("gaa.extractor.stage{k}.weight"),
                shape: vec![c, cin, 3, 3],
                data: init_normal(&mut rng, g.weight_len(), cin * 9, gain),
            });
            tensors.push(NamedTensor::zeros(format!("gaa.extractor.stage{k}.bias"), vec![c]));
            cin = c;
        }
        let d = cin;
        // Starts as the identity on the f_T half, so alignment begins at zero
        // loss for a freshly cloned student.
        let mut proj = NamedTensor::zeros("gaa.proj.weight", vec![d, 2 * d]);
        for i in 0..d {
            proj.data[i * 2 * d + i] = T::one();
        }
        tensors.push(proj);
        tensors.push(NamedTensor::zeros("gaa.proj.bias", vec![d]));
        Ok(GaaParams {
            widths: widths.to_vec(),
            tensors,
        })
    }

    /// Rebuilds from checkpoint tensors (names starting with `gaa.`).
    pub fn from_tensors(tensors: Vec<NamedTensor<T>>) -> Result<Self> {
        let stages = tensors.iter().filter(|t| t.name.starts_with("gaa.extractor.") && t.name.ends_with(".weight")).count();
        if tensors.len() != 2 * stages + 2 || stages == 0 {
            return Err(Error::Format("malformed gaze-alignment tensors".into()));
        }
        let widths: Vec<usize> = (0..stages).map(|k| tensors[2 * k].shape[0]).collect();
        let reference = GaaParams::<T>::init(&widths, 0)?;
        for (a, b) in reference.tensors.iter().zip(&tensors) {
            if a.name != b.name || a.shape != b.shape || a.data.len() != b.data.len() {
                return Err(Error::Format(format!("unexpected tensor {}", b.name)));
            }
        }
        Ok(GaaParams { widths, tensors })
    }

    pub fn dim(&self) -> usize {
        *self.widths.last().expect("nonempty")
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn tensors(&self) -> &[NamedTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<NamedTensor<T>> {
        self.tensors
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect()
    }

    fn proj(&self) -> (&[T], &[T]) {
        let n = self.tensors.len();
        (&self.tensors[n - 2].data, &self.tensors[n - 1].data)
    }
}

/// Extractor activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ExtractorCache<T> {
    inputs: Vec<FeatureMap<T>>,
    outputs: Vec<FeatureMap<T>>,
}

pub fn extract_gaze_features_train<T: Scalar>(
    h: &GazeHeatmap<T>,
    params: &GaaParams<T>,
) -> Result<(GazeFeature<T>, ExtractorCache<T>)> {
    let stride = 1usize << params.depth();
    if h.height() % stride != 0 || h.width() % stride != 0 {
        return Err(Error::ShapeNotDivisible {
            height: h.height(),
            width: h.width(),
            stride,
        });
    }
    let mut x = FeatureMap::from_vec(1, h.height(), h.width(), h.values().to_vec());
    let mut inputs = Vec::with_capacity(params.depth());
    let mut outputs = Vec::with_capacity(params.depth());
    let mut cin = 1;
    for (k, &c) in params.widths.iter().enumerate() {
        let g = ConvGeom::down3x3(cin, c);
        let mut y = nn::conv2d(&x, &g, &params.tensors[2 * k].data, &params.tensors[2 * k + 1].data);
        if k + 1 < params.depth() {
            nn::relu_inplace(&mut y);
        }
        inputs.push(x);
        outputs.push(y.clone());
        x = y;
        cin = c;
    }
    let feat = GazeFeature {
        height: x.height,
        width: x.width,
        dim: x.channels,
        tokens: x.to_tokens(),
    };
    Ok((feat, ExtractorCache { inputs, outputs }))
}

pub fn extract_gaze_features<T: Scalar>(h: &GazeHeatmap<T>, params: &GaaParams<T>) -> Result<GazeFeature<T>> {
    Ok(extract_gaze_features_train(h, params)?.0)
}

/// Accumulates extractor gradients given `dL/d f_G` tokens.
pub fn extractor_backward<T: Scalar>(
    params: &GaaParams<T>,
    cache: &ExtractorCache<T>,
    dtokens: &[T],
    grads: &mut [Vec<T>],
) {
    let last = cache.outputs.last().expect("nonempty");
    let mut dy = FeatureMap::from_tokens(dtokens, last.channels, last.height, last.width);
    let mut cin = 1;
    let geoms: Vec<ConvGeom> = params
        .widths
        .iter()
        .map(|&c| {
            let g = ConvGeom::down3x3(cin, c);
            cin = c;
            g
        })
        .collect();
    for k in (0..params.depth()).rev() {
        if k + 1 < params.depth() {
            nn::relu_backward_inplace(&cache.outputs[k], &mut dy);
        }
        let (gw, rest) = grads[2 * k..].split_at_mut(1);
        match nn::conv2d_backward(&cache.inputs[k], &geoms[k], &params.tensors[2 * k].data, &dy, &mut gw[0], &mut rest[0], k > 0) {
            Some(dx) => dy = dx,
            None => break,
        }
    }
}

/// `concat(f_T, softmax(f_G f_Tᵀ / √d) f_T)` with `f_T` given as a feature map.
pub fn cross_attention_fuse<T: Scalar>(f_g: &GazeFeature<T>, f_t: &FeatureMap<T>) -> Result<FusedFeature<T>> {
    if f_g.dim != f_t.channels {
        return Err(Error::TokenDimMismatch(format!("gaze dim {} vs teacher dim {}", f_g.dim, f_t.channels)));
    }
    if f_g.len() != f_t.plane() {
        return Err(Error::TokenDimMismatch(format!("gaze tokens {} vs teacher tokens {}", f_g.len(), f_t.plane())));
    }
    cross_attention_tokens(&f_g.tokens, &f_t.to_tokens(), f_t.plane(), f_t.channels)
}

/// Token-level form of [`cross_attention_fuse`]; `q` and `kv` are row-major `n × d`.
pub fn cross_attention_tokens<T: Scalar>(q: &[T], kv: &[T], n: usize, d: usize) -> Result<FusedFeature<T>> {
    if q.len() != n * d || kv.len() != n * d {
        return Err(Error::TokenDimMismatch(format!(
            "expected {n}x{d} tokens, got {} and {}",
            q.len(),
            kv.len()
        )));
    }
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut scores = vec![T::zero(); n * n];
    T::gemm(n, d, n, scale, q, d as isize, 1, kv, 1, d as isize, T::zero(), &mut scores, n as isize, 1);
    for row in scores.chunks_exact_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    let mut attended = vec![T::zero(); n * d];
    T::gemm(n, n, d, T::one(), &scores, n as isize, 1, kv, d as isize, 1, T::zero(), &mut attended, d as isize, 1);
    let mut values = Vec::with_capacity(n * 2 * d);
    for i in 0..n {
        values.extend_from_slice(&kv[i * d..(i + 1) * d]);
        values.extend_from_slice(&attended[i * d..(i + 1) * d]);
    }
    Ok(FusedFeature {
        tokens: n,
        dim: d,
        values,
        attention: scores,
    })
}

/// `dL/d q` given `dL/d attended` (the second half of each fused token).
pub fn attention_backward<T: Scalar>(fused: &FusedFeature<T>, kv: &[T], d_attended: &[T]) -> Vec<T> {
    let (n, d) = (fused.tokens, fused.dim);
    let a = &fused.attention;
    let mut da = vec![T::zero(); n * n];
    T::gemm(n, d, n, T::one(), d_attended, d as isize, 1, kv, 1, d as isize, T::zero(), &mut da, n as isize, 1);
    let mut ds = vec![T::zero(); n * n];
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        let drow = &da[i * n..(i + 1) * n];
        let dot: T = row.iter().zip(drow).map(|(&x, &y)| x * y).sum();
        for j in 0..n {
            ds[i * n + j] = row[j] * (drow[j] - dot);
        }
    }
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut dq = vec![T::zero(); n * d];
    T::gemm(n, n, d, scale, &ds, n as isize, 1, kv, d as isize, 1, T::zero(), &mut dq, d as isize, 1);
    dq
}

/// Result of the alignment loss with its gradients.
#[derive(Clone, Debug)]
pub struct AlignmentGrad<T> {
    pub loss: T,
    /// `dL/d f_S`, shaped like the student bottleneck.
    pub d_student: FeatureMap<T>,
    /// `dL/d attended` tokens, row-major `n × d`.
    pub d_attended: Vec<T>,
    pub d_proj_weight: Vec<T>,
    pub d_proj_bias: Vec<T>,
}

fn project<T: Scalar>(fused: &FusedFeature<T>, weight: &[T], bias: &[T]) -> Vec<T> {
    let (n, d) = (fused.tokens, fused.dim);
    let mut out = vec![T::zero(); n * d];
    for row in out.chunks_exact_mut(d) {
        row.copy_from_slice(bias);
    }
    T::gemm(n, 2 * d, d, T::one(), &fused.values, 2 * d as isize, 1, weight, 1, 2 * d as isize, T::one(), &mut out, d as isize, 1);
    out
}

pub fn gaa_alignment_grad<T: Scalar>(
    fused: &FusedFeature<T>,
    f_s: &FeatureMap<T>,
    params: &GaaParams<T>,
) -> Result<AlignmentGrad<T>> {
    let (n, d) = (fused.tokens, fused.dim);
    if f_s.plane() != n {
        return Err(Error::TokenCountMismatch(f_s.plane(), n));
    }
    if f_s.channels != d || params.dim() != d {
        return Err(Error::TokenDimMismatch(format!(
            "student dim {} / projection dim {} vs fused dim {d}",
            f_s.channels,
            params.dim()
        )));
    }
    let (weight, bias) = params.proj();
    let projected = project(fused, weight, bias);
    let s_tokens = f_s.to_tokens();
    let count = T::lit((n * d) as f64);
    let mut err = vec![T::zero(); n * d];
    let mut sum = T::zero();
    for ((e, &p), &s) in err.iter_mut().zip(&projected).zip(&s_tokens) {
        let diff = p - s;
        sum += diff * diff;
        *e = T::lit(2.0) * diff / count;
    }
    let loss = sum / count;

    let mut d_proj_weight = vec![T::zero(); d * 2 * d];
    T::gemm(d, n, 2 * d, T::one(), &err, 1, d as isize, &fused.values, 2 * d as isize, 1, T::zero(), &mut d_proj_weight, 2 * d as isize, 1);
    let mut d_proj_bias = vec![T::zero(); d];
    for row in err.chunks_exact(d) {
        for (b, &e) in d_proj_bias.iter_mut().zip(row) {
            *b += e;
        }
    }
    // attended half of the projection: columns d..2d
    let mut d_attended = vec![T::zero(); n * d];
    T::gemm(n, d, d, T::one(), &err, d as isize, 1, &weight[d..], 2 * d as isize, 1, T::zero(), &mut d_attended, d as isize, 1);
    let neg: Vec<T> = err.iter().map(|&e| -e).collect();
    let d_student = FeatureMap::from_tokens(&neg, d, f_s.height, f_s.width);
    Ok(AlignmentGrad {
        loss,
        d_student,
        d_attended,
        d_proj_weight,
        d_proj_bias,
    })
}

/// Mean squared error between the projected fused tokens and `f_S`.
pub fn gaa_alignment_loss<T: Scalar>(fused: &FusedFeature<T>, f_s: &FeatureMap<T>, params: &GaaParams<T>) -> Result<T> {
    Ok(gaa_alignment_grad(fused, f_s, params)?.loss)
}

/// Projection of the fused tokens, as a feature map on the bottleneck grid.
pub fn projected_features<T: Scalar>(fused: &FusedFeature<T>, params: &GaaParams<T>, height: usize, width: usize) -> FeatureMap<T> {
    let (w, b) = params.proj();
    FeatureMap::from_tokens(&project(fused, w, b), fused.dim, height, width)
}
