//! Model family: a small ConvNet, an MLP and multinomial logistic regression,
//! all evaluated from a flat parameter vector.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ddlab_autodiff::{Graph, Tensor, Var};
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::rng;

pub const INSTANCE_NORM_EPS: f64 = 1e-8;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// `depth` blocks of 3x3 conv, optional instance norm, relu, 2x2 average pool; linear head.
    ConvNet,
    /// `depth` hidden relu layers of `width` units; linear head.
    Mlp,
    /// Linear head on the flattened input (multinomial logistic regression).
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Norm {
    InstanceNorm,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub depth: usize,
    pub width: usize,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub norm: Norm,
}

impl ModelSpec {
    /// Desk default ConvNet: depth 3, width 32, instance norm.
    pub fn convnet(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec { kind: ModelKind::ConvNet, depth: 3, width: 32, input_shape, num_classes, norm: Norm::InstanceNorm }
    }

    pub fn mlp(input_shape: [usize; 3], num_classes: usize, depth: usize, width: usize) -> Self {
        ModelSpec { kind: ModelKind::Mlp, depth, width, input_shape, num_classes, norm: Norm::None }
    }

    pub fn linear(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec { kind: ModelKind::Linear, depth: 1, width: 1, input_shape, num_classes, norm: Norm::None }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::invalid("model spec", msg));
        if self.depth == 0 || self.width == 0 {
            return bad(format!("depth {} and width {} must be positive", self.depth, self.width));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.input_shape.contains(&0) {
            return bad(format!("empty input shape {:?}", self.input_shape));
        }
        if self.kind == ModelKind::ConvNet {
            let div = 1usize << self.depth;
            let [_, h, w] = self.input_shape;
            if h % div != 0 || w % div != 0 {
                return bad(format!("{h}x{w} input cannot be pooled {} times", self.depth));
            }
        } else if self.norm != Norm::None {
            return bad(format!("{:?} does not support normalisation", self.kind));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Width of the penultimate representation fed to the classifier head.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            ModelKind::ConvNet => {
                let [_, h, w] = self.input_shape;
                self.width * (h >> self.depth) * (w >> self.depth)
            }
            ModelKind::Mlp => self.width,
            ModelKind::Linear => self.input_dim(),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        let mut segs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, fan: Option<(usize, usize)>| {
            segs.push((name, shape, fan));
        };
        match self.kind {
            ModelKind::ConvNet => {
                let mut cin = self.input_shape[0];
                for d in 0..self.depth {
                    let w = self.width;
                    push(format!("conv{d}.weight"), vec![w, cin, 3, 3], Some((cin * 9, w * 9)));
                    push(format!("conv{d}.bias"), vec![w], None);
                    cin = w;
                }
            }
            ModelKind::Mlp => {
                let mut fin = self.input_dim();
                for d in 0..self.depth {
                    push(format!("fc{d}.weight"), vec![fin, self.width], Some((fin, self.width)));
                    push(format!("fc{d}.bias"), vec![self.width], None);
                    fin = self.width;
                }
            }
            ModelKind::Linear => {}
        }
        let f = self.feature_dim();
        push("head.weight".into(), vec![f, self.num_classes], Some((f, self.num_classes)));
        push("head.bias".into(), vec![self.num_classes], None);
        ParamLayout::new(segs)
    }

    pub fn num_params(&self) -> usize {
        self.layout().len()
    }

    /// Canonical text form, also the input to [`ModelSpec::digest`].
    pub fn canonical(&self) -> String {
        format!(
            "kind={:?};depth={};width={};input={}x{}x{};classes={};norm={:?}",
            self.kind,
            self.depth,
            self.width,
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
            self.num_classes,
            self.norm
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn init(&self, mode: InitMode, seed: u64) -> ParamVector {
        let layout = Arc::new(self.layout());
        let mut values = vec![0.0; layout.len()];
        if mode == InitMode::XavierUniform {
            let mut r = rng::seeded(seed, rng::stream::INIT);
            for seg in &layout.segments {
                if let Some((fan_in, fan_out)) = seg.fan {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for v in &mut values[seg.offset..seg.offset + seg.len()] {
                        *v = r.random_range(-bound..=bound);
                    }
                }
            }
        }
        ParamVector { layout, values }
    }

    /// Runs the model on a graph. `theta` is the flat parameter vector.
    pub fn forward<'g>(&self, theta: Var<'g>, x: Var<'g>) -> Result<Forward<'g>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != self.input_shape {
            return Err(CoreError::invalid(
                "model input",
                format!(
                    "expected [n, {}, {}, {}], got {xs:?}",
                    self.input_shape[0], self.input_shape[1], self.input_shape[2]
                ),
            ));
        }
        if theta.numel() != self.num_params() {
            return Err(CoreError::invalid(
                "parameters",
                format!("expected {} values, got {}", self.num_params(), theta.numel()),
            ));
        }
        let layout = self.layout();
        let param = |i: usize| -> Result<Var<'g>> {
            let s = &layout.segments[i];
            Ok(theta.slice(s.offset, &s.shape)?)
        };
        let n = xs[0];
        let mut next = 0;
        let features = match self.kind {
            ModelKind::ConvNet => {
                let mut h = x;
                for _ in 0..self.depth {
                    h = h.conv2d(param(next)?, 1, 1)?.add_bias(param(next + 1)?)?;
                    next += 2;
                    if self.norm == Norm::InstanceNorm {
                        h = h.instance_norm(INSTANCE_NORM_EPS)?;
                    }
                    h = h.relu()?.avg_pool2d(2)?;
                }
                h.flatten()?
            }
            ModelKind::Mlp => {
                let mut h = x.reshape(&[n, self.input_dim()])?;
                for _ in 0..self.depth {
                    h = h.matmul(param(next)?)?.add_bias(param(next + 1)?)?.relu()?;
                    next += 2;
                }
                h
            }
            ModelKind::Linear => x.reshape(&[n, self.input_dim()])?,
        };
        let logits = features.matmul(param(next)?)?.add_bias(param(next + 1)?)?;
        Ok(Forward { logits, features })
    }

    /// Logits for a batch of images, evaluated in chunks without recording gradients.
    pub fn logits(&self, params: &ParamVector, images: &Tensor) -> Result<Tensor> {
        self.map_chunks(params, images, self.num_classes, |f| f.logits)
    }

    /// Penultimate features for a batch of images.
    pub fn features(&self, params: &ParamVector, images: &Tensor) -> Result<Tensor> {
        self.map_chunks(params, images, self.feature_dim(), |f| f.features)
    }

    fn map_chunks(
        &self,
        params: &ParamVector,
        images: &Tensor,
        width: usize,
        pick: impl for<'g> Fn(Forward<'g>) -> Var<'g>,
    ) -> Result<Tensor> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(CoreError::invalid(
                "model input",
                format!("expected [n, {:?}] images, got {shape:?}", self.input_shape),
            ));
        }
        let n = shape[0];
        let per = self.input_dim();
        let mut out = Vec::with_capacity(n * width);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let m = EVAL_CHUNK.min(n - start);
            let g = Graph::new();
            let theta = g.constant(Tensor::vector(params.values.clone()));
            let chunk = Tensor::new(
                vec![m, shape[1], shape[2], shape[3]],
                images.data()[start * per..(start + m) * per].to_vec(),
            )?;
            let x = g.constant(chunk);
            let f = self.forward(theta, x)?;
            out.extend_from_slice(pick(f).value().data());
        }
        Ok(Tensor::new(vec![n, width], out)?)
    }
}

pub struct Forward<'g> {
    pub logits: Var<'g>,
    pub features: Var<'g>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitMode {
    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
    XavierUniform,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// (fan_in, fan_out) for weight tensors.
    pub fan: Option<(usize, usize)>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Maps contiguous segments of a flat parameter vector to layer tensors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
}

impl ParamLayout {
    fn new(parts: Vec<(String, Vec<usize>, Option<(usize, usize)>)>) -> Self {
        let mut offset = 0;
        let segments = parts
            .into_iter()
            .map(|(name, shape, fan)| {
                let s = Segment { name, shape, offset, fan };
                offset += s.len();
                s
            })
            .collect();
        ParamLayout { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Groups of segments belonging to one layer (weight plus bias).
    pub fn layers(&self) -> Vec<std::ops::Range<usize>> {
        self.segments
            .chunks(2)
            .map(|pair| pair[0].offset..pair[pair.len() - 1].offset + pair[pair.len() - 1].len())
            .collect()
    }
}

/// Flat parameter vector with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    pub values: Vec<f64>,
}

const PARAM_MAGIC: &[u8; 4] = b"DDLP";
const PARAM_VERSION: u16 = 1;

impl ParamVector {
    pub fn new(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        let layout = spec.layout();
        if layout.len() != values.len() {
            return Err(CoreError::invalid(
                "parameters",
                format!("layout holds {} values, got {}", layout.len(), values.len()),
            ));
        }
        Ok(ParamVector { layout: Arc::new(layout), values })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        ParamVector { layout: self.layout.clone(), values }
    }

    /// Per-segment copies of the parameters.
    pub fn unflatten(&self) -> Vec<Tensor> {
        self.layout
            .segments
            .iter()
            .map(|s| Tensor::new(s.shape.clone(), self.values[s.range()].to_vec()).expect("layout shape"))
            .collect()
    }

    pub fn flatten(spec: &ModelSpec, parts: &[Tensor]) -> Result<Self> {
        let values: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        let pv = ParamVector::new(spec, values)?;
        for (seg, t) in pv.layout.segments.iter().zip(parts) {
            if seg.shape != t.shape() {
                return Err(CoreError::invalid("parameters", format!("{} has shape {:?}", seg.name, t.shape())));
            }
        }
        Ok(pv)
    }

    pub fn sha256(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn write_to(&self, spec: &ModelSpec, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&PARAM_VERSION.to_le_bytes())?;
        w.write_all(&spec.digest())?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(spec: &ModelSpec, r: &mut impl Read) -> Result<Self> {
        let what = "parameter file";
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, what)?;
        if &magic != PARAM_MAGIC {
            return Err(CoreError::format(what, "bad magic"));
        }
        let mut ver = [0u8; 2];
        read_exact(r, &mut ver, what)?;
        if u16::from_le_bytes(ver) != PARAM_VERSION {
            return Err(CoreError::format(what, format!("unsupported version {}", u16::from_le_bytes(ver))));
        }
        let mut digest = [0u8; 32];
        read_exact(r, &mut digest, what)?;
        if digest != spec.digest() {
            return Err(CoreError::format(what, "written for a different model spec"));
        }
        let mut count = [0u8; 8];
        read_exact(r, &mut count, what)?;
        let count = u64::from_le_bytes(count) as usize;
        if count != spec.num_params() {
            return Err(CoreError::format(what, format!("{count} values, spec needs {}", spec.num_params())));
        }
        let mut buf = vec![0u8; count * 8];
        read_exact(r, &mut buf, what)?;
        let values = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        ParamVector::new(spec, values)
    }

    pub fn save(&self, spec: &ModelSpec, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(46 + 8 * self.len());
        self.write_to(spec, &mut buf).expect("in-memory write");
        std::fs::write(path, buf).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(spec: &ModelSpec, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        ParamVector::read_from(spec, &mut bytes.as_slice())
    }
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|_| CoreError::format(what, "truncated"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_convnet_layout() {
        let spec = ModelSpec::convnet([3, 16, 16], 3);
        spec.validate().unwrap();
        let layout = spec.layout();
        let names: Vec<&str> = layout.segments.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "conv0.weight",
                "conv0.bias",
                "conv1.weight",
                "conv1.bias",
                "conv2.weight",
                "conv2.bias",
                "head.weight",
                "head.bias"
            ]
        );
        assert_eq!(spec.feature_dim(), 32 * 2 * 2);
        assert_eq!(spec.num_params(), 864 + 32 + 9216 + 32 + 9216 + 32 + 128 * 3 + 3);
        // segments partition the vector
        let mut next = 0;
        for s in &layout.segments {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, layout.len());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec { depth: 0, ..ModelSpec::convnet([3, 16, 16], 3) }.validate().is_err());
        assert!(ModelSpec::convnet([3, 16, 16], 1).validate().is_err());
        assert!(ModelSpec { depth: 5, ..ModelSpec::convnet([3, 16, 16], 3) }.validate().is_err());
        assert!(ModelSpec { norm: Norm::InstanceNorm, ..ModelSpec::mlp([1, 2, 2], 2, 1, 4) }.validate().is_err());
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let spec = ModelSpec::mlp([1, 2, 2], 4, 1, 4);
        let a = spec.init(InitMode::XavierUniform, 9);
        let b = spec.init(InitMode::XavierUniform, 9);
        assert_eq!(a, b);
        let bound = (6.0f64 / 8.0).sqrt();
        let fc = &a.layout().segments[0];
        assert_eq!(fc.fan, Some((4, 4)));
        assert!(a.values[fc.range()].iter().all(|v| v.abs() <= bound));
        assert_ne!(a, spec.init(InitMode::XavierUniform, 10));
        assert!(spec.init(InitMode::Zeros, 0).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn xavier_variance_matches_fan() {
        // 100 x 100 weight = 10^4 draws; Var(U(-b, b)) = b^2 / 3 = 2 / (fan_in + fan_out)
        let spec = ModelSpec::linear([1, 10, 10], 100);
        let p = spec.init(InitMode::XavierUniform, 1);
        let w = &p.values[p.layout().segments[0].range()];
        assert_eq!(w.len(), 10_000);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / 200.0;
        assert!((var - expect).abs() / expect < 0.1, "{var} vs {expect}");
    }

    #[test]
    fn flatten_roundtrip() {
        let spec = ModelSpec::convnet([3, 8, 8], 2);
        let p = spec.init(InitMode::XavierUniform, 3);
        let back = ParamVector::flatten(&spec, &p.unflatten()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn serialization_roundtrip_and_digest_check() {
        let spec = ModelSpec::convnet([3, 8, 8], 2);
        let p = spec.init(InitMode::XavierUniform, 3);
        let mut buf = Vec::new();
        p.write_to(&spec, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"DDLP");
        let back = ParamVector::read_from(&spec, &mut buf.as_slice()).unwrap();
        assert!(back.values.iter().zip(&p.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        let other = ModelSpec { width: 16, ..spec.clone() };
        assert!(ParamVector::read_from(&other, &mut buf.as_slice()).is_err());
        assert!(ParamVector::read_from(&spec, &mut &buf[..40]).is_err());
    }

    #[test]
    fn zero_input_zero_params_gives_zero_logits() {
        for spec in [ModelSpec::convnet([3, 8, 8], 3), ModelSpec::mlp([3, 8, 8], 3, 2, 5)] {
            let p = spec.init(InitMode::Zeros, 0);
            let logits = spec.logits(&p, &Tensor::zeros(&[2, 3, 8, 8])).unwrap();
            assert_eq!(logits.shape(), &[2, 3]);
            assert!(logits.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn wrong_input_shape_is_error() {
        let spec = ModelSpec::convnet([3, 8, 8], 3);
        let p = spec.init(InitMode::Zeros, 0);
        assert!(spec.logits(&p, &Tensor::zeros(&[2, 1, 8, 8])).is_err());
    }
}
