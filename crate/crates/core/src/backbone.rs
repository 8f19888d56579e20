//! U-Net encoder/decoder shared by teacher and student.
//!
//! Level `i` of the encoder has `base · 2^i` channels and two 3×3 conv+ReLU
//! layers followed by a 2×2 max pool. The bottleneck (`base · 2^depth`
//! channels at `H / 2^depth`) is the feature tap used for alignment. Each
//! decoder level upsamples with a 2×2 transposed conv, concatenates the skip
//! connection, and applies two 3×3 conv+ReLU layers. A 1×1 head and a clamped
//! sigmoid produce the foreground probability.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::nn::{self, ConvGeom, FeatureMap};
use crate::scalar::Scalar;

/// Probability clamp applied before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> NamedTensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        NamedTensor {
            name: name.into(),
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Fan-in scaled normal initialization, drawn in `f64` so both scalar types
/// see the same values.
pub(crate) fn init_normal<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, fan_in: usize, gain: f64) -> Vec<T> {
    let std = (gain / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| T::lit(dist.sample(rng))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    Conv(ConvGeom),
    Up { cin: usize, cout: usize },
}

#[derive(Clone, Debug)]
struct LayerSpec {
    name: String,
    kind: LayerKind,
}

fn level_width(base: usize, level: usize) -> usize {
    base << level
}

fn layout(depth: usize, base: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut push = |name: String, kind| layers.push(LayerSpec { name, kind });
    for i in 0..depth {
        let cin = if i == 0 { 1 } else { level_width(base, i - 1) };
        let c = level_width(base, i);
        push(format!("enc{i}.conv0"), LayerKind::Conv(ConvGeom::same3x3(cin, c)));
        push(format!("enc{i}.conv1"), LayerKind::Conv(ConvGeom::same3x3(c, c)));
    }
    let cm = level_width(base, depth);
    push("mid.conv0".into(), LayerKind::Conv(ConvGeom::same3x3(level_width(base, depth - 1), cm)));
    push("mid.conv1".into(), LayerKind::Conv(ConvGeom::same3x3(cm, cm)));
    for i in (0..depth).rev() {
        let c = level_width(base, i);
        push(format!("dec{i}.up"), LayerKind::Up { cin: level_width(base, i + 1), cout: c });
        push(format!("dec{i}.conv0"), LayerKind::Conv(ConvGeom::same3x3(2 * c, c)));
        push(format!("dec{i}.conv1"), LayerKind::Conv(ConvGeom::same3x3(c, c)));
    }
    push("head".into(), LayerKind::Conv(ConvGeom::pointwise(level_width(base, 0), 1)));
    layers
}

/// Layer indices into the layout above.
#[derive(Clone, Copy, Debug)]
struct Index {
    depth: usize,
}

impl Index {
    fn enc(&self, level: usize, k: usize) -> usize {
        2 * level + k
    }
    fn mid(&self, k: usize) -> usize {
        2 * self.depth + k
    }
    /// part 0 = upconv, 1/2 = convs.
    fn dec(&self, level: usize, part: usize) -> usize {
        2 * self.depth + 2 + 3 * (self.depth - 1 - level) + part
    }
    fn head(&self) -> usize {
        5 * self.depth + 2
    }
}

/// Teacher or student weights: named tensors in a fixed order plus the
/// architecture metadata needed to rebuild the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub depth: usize,
    pub base_channels: usize,
    pub seed: u64,
    pub epoch: u64,
    tensors: Vec<NamedTensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Rebuilds params from stored tensors, checking names and shapes against
    /// the architecture.
    pub fn from_tensors(
        depth: usize,
        base_channels: usize,
        seed: u64,
        epoch: u64,
        tensors: Vec<NamedTensor<T>>,
    ) -> Result<Self> {
        let expected = Self::zeros(depth, base_channels)?;
        if expected.tensors.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.tensors.len(),
                tensors.len()
            )));
        }
        for (e, t) in expected.tensors.iter().zip(&tensors) {
            if e.name != t.name || e.shape != t.shape || t.data.len() != e.data.len() {
                return Err(Error::Format(format!("unexpected tensor {} {:?}", t.name, t.shape)));
            }
        }
        Ok(ModelParams {
            depth,
            base_channels,
            seed,
            epoch,
            tensors,
        })
    }

    fn zeros(depth: usize, base_channels: usize) -> Result<Self> {
        if depth < 2 {
            return Err(Error::DepthTooSmall(depth));
        }
        if base_channels < 4 {
            return Err(Error::InvalidConfig(format!("base_channels must be >= 4, got {base_channels}")));
        }
        let mut tensors = Vec::new();
        for l in layout(depth, base_channels) {
            match l.kind {
                LayerKind::Conv(g) => {
                    tensors.push(NamedTensor::zeros(
                        format!("{}.weight", l.name),
                        vec![g.cout, g.cin, g.kernel, g.kernel],
                    ));
                    tensors.push(NamedTensor::zeros(format!("{}.bias", l.name), vec![g.cout]));
                }
                LayerKind::Up { cin, cout } => {
                    tensors.push(NamedTensor::zeros(format!("{}.weight", l.name), vec![cout, 2, 2, cin]));
                    tensors.push(NamedTensor::zeros(format!("{}.bias", l.name), vec![cout]));
                }
            }
        }
        Ok(ModelParams {
            depth,
            base_channels,
            seed: 0,
            epoch: 0,
            tensors,
        })
    }

    pub fn tensors(&self) -> &[NamedTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.tensors
    }

    pub fn bottleneck_channels(&self) -> usize {
        level_width(self.base_channels, self.depth)
    }

    pub fn decoder_channels(&self) -> usize {
        self.base_channels
    }

    pub fn stride(&self) -> usize {
        1 << self.depth
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(NamedTensor::is_finite)
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            depth: self.depth,
            base_channels: self.base_channels,
            seed: self.seed,
            epoch: self.epoch,
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Seeded He-normal initialization (fan-in scaled), zero biases.
pub fn init_params<T: Scalar>(depth: usize, base_channels: usize, seed: u64) -> Result<ModelParams<T>> {
    let mut p = ModelParams::zeros(depth, base_channels)?;
    p.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (j, l) in layout(depth, base_channels).iter().enumerate() {
        let (fan_in, gain) = match l.kind {
            LayerKind::Conv(g) if l.name == "head" => (g.cin, 1.0),
            LayerKind::Conv(g) => (g.cin * g.kernel * g.kernel, 2.0),
            LayerKind::Up { cin, .. } => (cin, 2.0),
        };
        let len = p.tensors[2 * j].data.len();
        p.tensors[2 * j].data = init_normal(&mut rng, len, fan_in, gain);
    }
    Ok(p)
}

/// Student initialization: an independent deep copy of the teacher.
pub fn clone_for_student<T: Scalar>(teacher: &ModelParams<T>) -> ModelParams<T> {
    let mut s = teacher.clone();
    s.epoch = 0;
    s
}

/// Foreground probabilities clamped to `[ε, 1 − ε]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    height: usize,
    width: usize,
    probs: Vec<T>,
}

impl<T: Scalar> Prediction<T> {
    /// Wraps probabilities, clamping into `[ε, 1 − ε]`.
    pub fn from_probs(height: usize, width: usize, probs: Vec<T>) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::ShapeMismatch(format!("{} probs for {height}x{width}", probs.len())));
        }
        let (lo, hi) = (T::lit(PROB_EPS), T::one() - T::lit(PROB_EPS));
        if probs.iter().any(|p| p.is_nan()) {
            return Err(Error::Format("NaN probability".into()));
        }
        Ok(Prediction {
            height,
            width,
            probs: probs.into_iter().map(|p| p.max(lo).min(hi)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    /// Binarize with `prob >= threshold`.
    pub fn threshold(&self, threshold: f64) -> crate::dataset::SegMask {
        let t = T::lit(threshold);
        crate::dataset::SegMask::new(
            self.height,
            self.width,
            self.probs.iter().map(|&p| u8::from(p >= t)).collect(),
        )
        .expect("binary values")
    }
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    inputs: Vec<FeatureMap<T>>,
    outputs: Vec<FeatureMap<T>>,
    pool_args: Vec<Vec<u32>>,
    sigmoid: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub prediction: Prediction<T>,
    /// Encoder bottleneck (`f_T` / `f_S`).
    pub bottleneck: FeatureMap<T>,
    /// Last decoder feature map before the head.
    pub decoder: FeatureMap<T>,
    pub cache: ForwardCache<T>,
}

fn check_divisible(height: usize, width: usize, depth: usize) -> Result<()> {
    let stride = 1usize << depth;
    if height % stride != 0 || width % stride != 0 || height < stride || width < stride {
        return Err(Error::ShapeNotDivisible {
            height,
            width,
            stride,
        });
    }
    Ok(())
}

fn apply_layer<T: Scalar>(p: &ModelParams<T>, spec: &LayerSpec, j: usize, x: &FeatureMap<T>) -> FeatureMap<T> {
    let (w, b) = (&p.tensors[2 * j].data, &p.tensors[2 * j + 1].data);
    match spec.kind {
        LayerKind::Conv(g) => nn::conv2d(x, &g, w, b),
        LayerKind::Up { cout, .. } => nn::upconv2x2(x, cout, w, b),
    }
}

/// Full forward pass retaining activations for [`backward`].
pub fn forward_train<T: Scalar>(params: &ModelParams<T>, img: &Image<T>) -> Result<ForwardOutput<T>> {
    let depth = params.depth;
    check_divisible(img.height(), img.width(), depth)?;
    let specs = layout(depth, params.base_channels);
    let ix = Index { depth };
    let n_layers = specs.len();
    let mut inputs: Vec<FeatureMap<T>> = Vec::with_capacity(n_layers);
    let mut outputs: Vec<FeatureMap<T>> = Vec::with_capacity(n_layers);
    let mut pool_args = Vec::with_capacity(depth);

    let run = |j: usize, x: FeatureMap<T>, relu: bool, inputs: &mut Vec<FeatureMap<T>>, outputs: &mut Vec<FeatureMap<T>>| {
        debug_assert_eq!(inputs.len(), j);
        let mut y = apply_layer(params, &specs[j], j, &x);
        if relu {
            nn::relu_inplace(&mut y);
        }
        inputs.push(x);
        outputs.push(y.clone());
        y
    };

    let mut x = FeatureMap::from_vec(1, img.height(), img.width(), img.pixels().to_vec());
    let mut skips = Vec::with_capacity(depth);
    for level in 0..depth {
        let h = run(ix.enc(level, 0), x, true, &mut inputs, &mut outputs);
        let h = run(ix.enc(level, 1), h, true, &mut inputs, &mut outputs);
        let (pooled, arg) = nn::maxpool2x2(&h);
        pool_args.push(arg);
        skips.push(h);
        x = pooled;
    }
    let h = run(ix.mid(0), x, true, &mut inputs, &mut outputs);
    let bottleneck = run(ix.mid(1), h, true, &mut inputs, &mut outputs);
    let mut h = bottleneck.clone();
    for level in (0..depth).rev() {
        let up = run(ix.dec(level, 0), h, false, &mut inputs, &mut outputs);
        let cat = nn::concat(&skips[level], &up);
        let y = run(ix.dec(level, 1), cat, true, &mut inputs, &mut outputs);
        h = run(ix.dec(level, 2), y, true, &mut inputs, &mut outputs);
    }
    let decoder = h.clone();
    let logits = run(ix.head(), h, false, &mut inputs, &mut outputs);

    let sigmoid: Vec<T> = logits
        .data
        .iter()
        .map(|&z| T::one() / (T::one() + (-z).exp()))
        .collect();
    let prediction = Prediction::from_probs(img.height(), img.width(), sigmoid.clone())?;
    Ok(ForwardOutput {
        prediction,
        bottleneck,
        decoder,
        cache: ForwardCache {
            inputs,
            outputs,
            pool_args,
            sigmoid,
        },
    })
}

/// Segmentation forward pass: prediction and bottleneck features.
pub fn forward<T: Scalar>(params: &ModelParams<T>, img: &Image<T>) -> Result<(Prediction<T>, FeatureMap<T>)> {
    let out = forward_train(params, img)?;
    Ok((out.prediction, out.bottleneck))
}

/// Backpropagates `dL/dŷ` (and optionally `dL/d bottleneck`) into `grads`,
/// which is laid out like `params.tensors()` and accumulated into.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    dprob: &[T],
    dbottleneck: Option<&FeatureMap<T>>,
    grads: &mut [Vec<T>],
) {
    let depth = params.depth;
    let specs = layout(depth, params.base_channels);
    let ix = Index { depth };
    assert_eq!(grads.len(), params.tensors.len());
    assert_eq!(dprob.len(), cache.sigmoid.len());

    // The output clamp is passed straight through: a saturated head still
    // receives the (tiny) sigmoid slope instead of an exact zero.
    let head_out = &cache.outputs[ix.head()];
    let dlogit: Vec<T> = dprob
        .iter()
        .zip(&cache.sigmoid)
        .map(|(&d, &s)| d * s * (T::one() - s))
        .collect();
    let dlogit = FeatureMap::from_vec(1, head_out.height, head_out.width, dlogit);

    // Backprop through layer j given the gradient of its (post-activation) output.
    let step = |j: usize, mut dy: FeatureMap<T>, relu: bool, grads: &mut [Vec<T>], need_dx: bool| -> Option<FeatureMap<T>> {
        if relu {
            nn::relu_backward_inplace(&cache.outputs[j], &mut dy);
        }
        let (gw, rest) = grads[2 * j..].split_at_mut(1);
        let (gw, gb) = (&mut gw[0], &mut rest[0]);
        let w = &params.tensors[2 * j].data;
        let x = &cache.inputs[j];
        match specs[j].kind {
            LayerKind::Conv(g) => nn::conv2d_backward(x, &g, w, &dy, gw, gb, need_dx),
            LayerKind::Up { cout, .. } => Some(nn::upconv2x2_backward(x, cout, w, &dy, gw, gb)),
        }
    };

    let mut d = step(ix.head(), dlogit, false, grads, true).expect("dx");
    let mut dskips: Vec<Option<FeatureMap<T>>> = vec![None; depth];
    for level in 0..depth {
        let dy = step(ix.dec(level, 2), d, true, grads, true).expect("dx");
        let dcat = step(ix.dec(level, 1), dy, true, grads, true).expect("dx");
        let c = params.base_channels << level;
        let (dskip, dup) = nn::split(&dcat, c);
        dskips[level] = Some(dskip);
        d = step(ix.dec(level, 0), dup, false, grads, true).expect("dx");
    }
    if let Some(db) = dbottleneck {
        assert_eq!(db.data.len(), d.data.len(), "bottleneck gradient shape");
        for (a, &b) in d.data.iter_mut().zip(&db.data) {
            *a += b;
        }
    }
    let dh = step(ix.mid(1), d, true, grads, true).expect("dx");
    let mut dpooled = step(ix.mid(0), dh, true, grads, true).expect("dx");
    for level in (0..depth).rev() {
        let skip_out = &cache.outputs[ix.enc(level, 1)];
        let mut dh = nn::maxpool2x2_backward(
            (skip_out.channels, skip_out.height, skip_out.width),
            &cache.pool_args[level],
            &dpooled,
        );
        let ds = dskips[level].take().expect("skip gradient");
        for (a, &b) in dh.data.iter_mut().zip(&ds.data) {
            *a += b;
        }
        let dy = step(ix.enc(level, 1), dh, true, grads, true).expect("dx");
        match step(ix.enc(level, 0), dy, true, grads, level > 0) {
            Some(dx) => dpooled = dx,
            None => break,
        }
    }
}
