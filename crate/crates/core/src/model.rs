//! Descriptor network: a small convolutional extractor, generalized-mean
//! pooling and a two-layer perceptron head. Descriptors are L2-normalized, so
//! cosine similarity between them is a dot product.
//!
//! All parameters live in one flat `f64` vector; layers address slices of it.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::frame::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `[channels, height, width]` of accepted images.
    pub input: [usize; 3],
    pub conv: Vec<ConvLayer>,
    pub activation: Activation,
    /// Subtracted from every pixel before the first convolution.
    pub input_offset: f64,
    /// Generalized-mean exponent; 1 is average pooling.
    pub gem_p: f64,
    pub hidden: usize,
    pub dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: [3, 16, 16],
            conv: vec![
                ConvLayer {
                    channels: 8,
                    kernel: 3,
                    stride: 1,
                },
                ConvLayer {
                    channels: 16,
                    kernel: 3,
                    stride: 2,
                },
                ConvLayer {
                    channels: 16,
                    kernel: 3,
                    stride: 2,
                },
            ],
            activation: Activation::Relu,
            gem_p: 1.0,
            input_offset: 0.5,
            hidden: 64,
            dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::Config(format!(
                "input dims {:?} must be positive",
                self.input
            )));
        }
        if self.conv.is_empty() {
            return Err(Error::Config("at least one conv layer is required".into()));
        }
        for (i, l) in self.conv.iter().enumerate() {
            if l.channels == 0 || l.kernel == 0 || l.stride == 0 || l.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "conv layer {i} needs positive channels/stride and an odd kernel: {l:?}"
                )));
            }
        }
        if self.hidden == 0 || self.dim == 0 {
            return Err(Error::Config("hidden and dim must be positive".into()));
        }
        if !self.input_offset.is_finite() {
            return Err(Error::Config("input_offset must be finite".into()));
        }
        if !(self.gem_p.is_finite() && self.gem_p >= 1.0) {
            return Err(Error::Config(format!(
                "gem_p must be >= 1, got {}",
                self.gem_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvSlot {
    geom: ConvGeometry,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct DenseSlot {
    inputs: usize,
    outputs: usize,
    weight: usize,
    bias: usize,
}

/// Offsets of every layer inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<ConvSlot>,
    fc1: DenseSlot,
    fc2: DenseSlot,
    total: usize,
}

impl Layout {
    fn new(config: &ModelConfig) -> Self {
        let [mut channels, mut height, mut width] = config.input;
        let mut offset = 0;
        let mut convs = Vec::new();
        for l in &config.conv {
            let geom = ConvGeometry {
                in_channels: channels,
                out_channels: l.channels,
                height,
                width,
                kernel: l.kernel,
                stride: l.stride,
                pad: l.kernel / 2,
            };
            let weight = offset;
            offset += geom.weight_len();
            let bias = offset;
            offset += l.channels;
            channels = l.channels;
            height = geom.out_height();
            width = geom.out_width();
            convs.push(ConvSlot { geom, weight, bias });
        }
        let mut dense = |inputs: usize, outputs: usize| {
            let weight = offset;
            offset += inputs * outputs;
            let bias = offset;
            offset += outputs;
            DenseSlot {
                inputs,
                outputs,
                weight,
                bias,
            }
        };
        let fc1 = dense(channels, config.hidden);
        let fc2 = dense(config.hidden, config.dim);
        Self {
            convs,
            fc1,
            fc2,
            total: offset,
        }
    }
}

/// Handles to the interesting intermediates of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Pooled feature vector entering the head.
    pub pooled: Var,
    /// Head output before normalization.
    pub raw: Var,
    /// Unit-norm descriptor.
    pub descriptor: Var,
}

#[derive(Debug, Clone)]
pub struct DescriptorModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl DescriptorModel {
    /// Random initialization, uniform with a fan-in scaled range; biases start
    /// at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &layout.convs {
            let fan_in = (c.geom.in_channels * c.geom.kernel * c.geom.kernel) as f64;
            let bound = (3.0 / fan_in).sqrt();
            for p in &mut params[c.weight..c.weight + c.geom.weight_len()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        for d in [&layout.fc1, &layout.fc2] {
            let bound = (3.0 / d.inputs as f64).sqrt();
            for p in &mut params[d.weight..d.weight + d.inputs * d.outputs] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch(format!(
                "architecture needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Range of the second head layer's bias inside the parameter vector.
    pub fn head_bias_range(&self) -> std::ops::Range<usize> {
        self.layout.fc2.bias..self.layout.fc2.bias + self.layout.fc2.outputs
    }

    /// Range of the whole convolutional extractor.
    pub fn extractor_range(&self) -> std::ops::Range<usize> {
        0..self.layout.fc1.weight
    }

    /// Places this model's parameters on a tape, differentiable or not.
    pub fn params_on(&self, tape: &mut Tape, differentiable: bool) -> Var {
        if differentiable {
            tape.variable(self.params.clone())
        } else {
            tape.constant(self.params.clone())
        }
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.shape() != self.config.input {
            return Err(Error::DimensionMismatch(format!(
                "model expects images of shape {:?}, got {:?}",
                self.config.input,
                image.shape()
            )));
        }
        Ok(())
    }

    /// Records a forward pass with parameters `theta` (which need not be this
    /// model's own; teachers share the architecture).
    pub fn record(&self, tape: &mut Tape, theta: Var, image: &ImageTensor) -> Result<ForwardVars> {
        self.check_image(image)?;
        if tape.value(theta).len() != self.layout.total {
            return Err(Error::DimensionMismatch(format!(
                "parameter node has {} entries, architecture needs {}",
                tape.value(theta).len(),
                self.layout.total
            )));
        }
        tape.set_scope("input");
        let offset = self.config.input_offset;
        let mut x = tape.constant(image.data().iter().map(|v| v - offset).collect());
        for (i, c) in self.layout.convs.iter().enumerate() {
            tape.set_scope(&format!("conv{i}"));
            let w = tape.slice(theta, c.weight, c.geom.weight_len());
            let b = tape.slice(theta, c.bias, c.geom.out_channels);
            let y = tape.conv2d(x, w, b, c.geom);
            x = tape.activate(y, self.config.activation);
        }
        tape.set_scope("pool");
        let channels = self.layout.fc1.inputs;
        let pooled = tape.gem(x, channels, self.config.gem_p);
        tape.set_scope("head.fc1");
        let h = dense(tape, theta, &self.layout.fc1, pooled);
        let h = tape.activate(h, self.config.activation);
        tape.set_scope("head.fc2");
        let raw = dense(tape, theta, &self.layout.fc2, h);
        tape.set_scope("normalize");
        let descriptor = tape.l2_normalize(raw);
        Ok(ForwardVars {
            pooled,
            raw,
            descriptor,
        })
    }

    /// Unit-norm descriptor of one image.
    pub fn forward(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        forward_with(self, &self.params, image)
    }

    /// Value and exact gradient of a scalar built on a fresh tape from this
    /// model's parameters.
    pub fn loss_gradient<F>(&self, loss_fn: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&mut Tape, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let theta = self.params_on(&mut tape, true);
        let loss = loss_fn(&mut tape, theta)?;
        let grads = tape.backward(loss)?;
        Ok((tape.scalar_value(loss), grads.wrt(&tape, theta)))
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        write_container(w, PARAMS_MAGIC, &self.config, &self.params)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let (config, params) = read_container(r, PARAMS_MAGIC)?;
        Self::from_params(config, params)
    }
}

/// Forward pass using an explicit parameter vector with `model`'s
/// architecture.
pub fn forward_with(
    model: &DescriptorModel,
    params: &[f64],
    image: &ImageTensor,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let theta = tape.constant(params.to_vec());
    let vars = model.record(&mut tape, theta, image)?;
    tape.check_finite()?;
    Ok(tape.value(vars.descriptor).to_vec())
}

fn dense(tape: &mut Tape, theta: Var, slot: &DenseSlot, x: Var) -> Var {
    let w = tape.slice(theta, slot.weight, slot.inputs * slot.outputs);
    let b = tape.slice(theta, slot.bias, slot.outputs);
    tape.linear(x, w, b)
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine operands have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument(
            "cosine similarity of a zero vector".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity recorded on a tape.
pub fn cosine_on(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.dot(a, b);
    let na = tape.norm(a);
    let nb = tape.norm(b);
    let den = tape.mul(na, nb);
    tape.div(d, den)
}

/// Pairwise cosine similarities of an (anchor, positive, negative) triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramTriplet(pub [[f64; 3]; 3]);

impl GramTriplet {
    pub fn from_descriptors(d: [&[f64]; 3]) -> Result<Self> {
        let ap = cosine_sim(d[0], d[1])?;
        let an = cosine_sim(d[0], d[2])?;
        let pn = cosine_sim(d[1], d[2])?;
        Ok(Self([[1.0, ap, an], [ap, 1.0, pn], [an, pn, 1.0]]))
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn entries(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }
}

/// Row-major 3x3 Gram matrix of three descriptors as a 9-entry node, with a
/// constant unit diagonal.
pub fn gram_on(tape: &mut Tape, d: [Var; 3]) -> Var {
    let ap = cosine_on(tape, d[0], d[1]);
    let an = cosine_on(tape, d[0], d[2]);
    let pn = cosine_on(tape, d[1], d[2]);
    let one = tape.scalar(1.0);
    tape.concat(&[one, ap, an, ap, one, pn, an, pn, one])
}

/// Gram matrix of the descriptors of three images under `model`.
pub fn gram_triplet(model: &DescriptorModel, images: [&ImageTensor; 3]) -> Result<GramTriplet> {
    let a = model.forward(images[0])?;
    let p = model.forward(images[1])?;
    let n = model.forward(images[2])?;
    GramTriplet::from_descriptors([&a, &p, &n])
}

const PARAMS_MAGIC: &[u8; 8] = b"LLCDPRM\0";
pub(crate) const CONTAINER_VERSION: u32 = 1;

/// Versioned parameter container: magic, version, JSON architecture, a
/// little-endian `f64` array and a SHA-256 of everything before it.
pub(crate) fn write_container<W: Write, C: Serialize>(
    mut w: W,
    magic: &[u8; 8],
    config: &C,
    params: &[f64],
) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + params.len() * 8);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    let json = serde_json::to_vec(config)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_container<R: Read, C: for<'de> Deserialize<'de>>(
    mut r: R,
    magic: &[u8; 8],
) -> Result<(C, Vec<f64>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 + 4 + 4 + 8 + 32 {
        return Err(Error::corrupt("container truncated"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::corrupt("checksum mismatch"));
    }
    let mut cur = ByteCursor::new(body);
    if cur.take(8)? != magic {
        return Err(Error::corrupt("bad magic"));
    }
    let version = cur.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::corrupt(format!("unsupported version {version}")));
    }
    let json_len = cur.u32()? as usize;
    let config = serde_json::from_slice(cur.take(json_len)?)?;
    let n = cur.u64()? as usize;
    let params = cur.f64s(n)?;
    if !cur.is_empty() {
        return Err(Error::corrupt("trailing bytes"));
    }
    Ok((config, params))
}

pub(crate) struct ByteCursor<'a> {
    data: &'a [u8],
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(data: &'a [u8]) -> Self {
        Self { data }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() < n {
            return Err(Error::corrupt("unexpected end of data"));
        }
        let (head, tail) = self.data.split_at(n);
        self.data = tail;
        Ok(head)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::corrupt("length overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            input: [2, 6, 6],
            conv: vec![
                ConvLayer {
                    channels: 4,
                    kernel: 3,
                    stride: 1,
                },
                ConvLayer {
                    channels: 5,
                    kernel: 3,
                    stride: 2,
                },
            ],
            activation: Activation::Softplus,
            gem_p: 1.0,
            input_offset: 0.5,
            hidden: 6,
            dim: 4,
        }
    }

    fn random_image(shape: [usize; 3], seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        ImageTensor::new(
            shape[0],
            shape[1],
            shape[2],
            (0..n).map(|_| rng.random()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parameter_count_matches_layout() {
        let m = DescriptorModel::new(small(), 0).unwrap();
        // conv0: 4*2*9+4, conv1: 5*4*9+5, fc1: 5*6+6, fc2: 6*4+4
        assert_eq!(m.num_params(), 76 + 185 + 36 + 28);
    }

    #[test]
    fn descriptor_has_unit_norm() {
        let m = DescriptorModel::new(ModelConfig::default(), 3).unwrap();
        for s in 0..5 {
            let d = m.forward(&random_image([3, 16, 16], s)).unwrap();
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
            assert_eq!(d.len(), 64);
        }
    }

    #[test]
    fn wrong_shape_rejected() {
        let m = DescriptorModel::new(small(), 0).unwrap();
        assert!(matches!(
            m.forward(&random_image([3, 6, 6], 0)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn constant_feature_map_pools_to_constant() {
        // a single 1x1 conv with zero weights and bias c produces softplus(c)
        // everywhere; the pooled vector must be exactly that per channel
        let cfg = ModelConfig {
            input: [1, 5, 5],
            conv: vec![ConvLayer {
                channels: 3,
                kernel: 1,
                stride: 1,
            }],
            ..small()
        };
        let mut m = DescriptorModel::new(cfg, 0).unwrap();
        let biases = [0.5, -1.0, 2.0];
        m.params_mut()[..3].fill(0.0);
        m.params_mut()[3..6].copy_from_slice(&biases);
        let mut tape = Tape::new();
        let theta = m.params_on(&mut tape, false);
        let vars = m
            .record(&mut tape, theta, &random_image([1, 5, 5], 1))
            .unwrap();
        for (got, b) in tape.value(vars.pooled).iter().zip(biases) {
            let c = Activation::Softplus;
            let expect = b.max(0.0) + (-b.abs()).exp().ln_1p();
            assert!((got - expect).abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn high_gem_exponent_approaches_max() {
        // two 3x3 channels, the maximum attained at 8 of 9 positions
        let mut a = vec![0.7; 9];
        a[4] = 0.1;
        let mut b = vec![0.4; 9];
        b[0] = 0.35;
        let maxima = [0.7, 0.4];
        let mut tape = Tape::new();
        let x = tape.constant([a, b].concat());
        let pooled = tape.gem(x, 2, 100.0);
        for (got, want) in tape.value(pooled).iter().zip(maxima) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
        // p = 1 is the mean
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.1, 0.2, 0.3, 0.6]);
        let pooled = tape.gem(x, 1, 1.0);
        assert!((tape.scalar_value(pooled) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn gram_of_identical_and_orthogonal() {
        let a = [1.0, 0.0, 0.0];
        let g = GramTriplet::from_descriptors([&a, &a, &a]).unwrap();
        assert!((g.frobenius() - 3.0).abs() < 1e-12);
        let g =
            GramTriplet::from_descriptors([&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]])
                .unwrap();
        assert_eq!(g.0, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!((g.frobenius() - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gram_matches_independent_forwards() {
        let m = DescriptorModel::new(ModelConfig::default(), 11).unwrap();
        let imgs: Vec<_> = (0..3).map(|s| random_image([3, 16, 16], 100 + s)).collect();
        let g = gram_triplet(&m, [&imgs[0], &imgs[1], &imgs[2]]).unwrap();
        let d: Vec<_> = imgs.iter().map(|i| m.forward(i).unwrap()).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!((g.0[0][1] - dot(&d[0], &d[1])).abs() < 1e-12);
        assert!((g.0[0][2] - dot(&d[0], &d[2])).abs() < 1e-12);
        assert!((g.0[1][2] - dot(&d[1], &d[2])).abs() < 1e-12);
        for i in 0..3 {
            assert_eq!(g.0[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(g.0[i][j], g.0[j][i]);
            }
        }
        // tape version agrees
        let mut tape = Tape::new();
        let theta = m.params_on(&mut tape, false);
        let vs: Vec<_> = imgs
            .iter()
            .map(|i| m.record(&mut tape, theta, i).unwrap().descriptor)
            .collect();
        let gram = gram_on(&mut tape, [vs[0], vs[1], vs[2]]);
        for (a, b) in tape.value(gram).iter().zip(g.entries()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn trivial_gradients() {
        let m = DescriptorModel::new(small(), 5).unwrap();
        let (_, g) = m.loss_gradient(|t, _| Ok(t.scalar(4.2))).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let (v, g) = m
            .loss_gradient(|t, theta| {
                let sq = t.dot(theta, theta);
                Ok(t.scale(sq, 0.5))
            })
            .unwrap();
        assert_eq!(g, m.params());
        let expect: f64 = m.params().iter().map(|p| p * p).sum::<f64>() / 2.0;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = DescriptorModel::new(ModelConfig::default(), 1).unwrap();
        let img = random_image([3, 16, 16], 4);
        assert_eq!(m.forward(&img).unwrap(), m.forward(&img).unwrap());
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let m = DescriptorModel::new(small(), 8).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = DescriptorModel::load(buf.as_slice()).unwrap();
        assert_eq!(back.config(), m.config());
        let a: Vec<u64> = m.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        // corrupt one payload byte
        let mut bad = buf.clone();
        let mid = bad.len() - 40;
        bad[mid] ^= 1;
        assert!(DescriptorModel::load(bad.as_slice()).is_err());
    }
}
