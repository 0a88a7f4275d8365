//! The six network configurations (A, A-LRN, B, C, D, E), parameter
//! initialization, layer freezing, the binary checkpoint format and the live
//! [`Model`] that runs forward/backward over a configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    cross_entropy_loss, softmax_cross_entropy_grad, Exec, LayerKind, LayerSpec, LayerState,
    LrnParams, Mode, Params,
};
use crate::tensor::{uniform_vec, DType, Scalar, Tensor};

/// Dropout rate of the classifier head.
pub const HEAD_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConfigName {
    A,
    ALrn,
    B,
    C,
    D,
    E,
}

impl ConfigName {
    pub const ALL: [ConfigName; 6] = [Self::A, Self::ALrn, Self::B, Self::C, Self::D, Self::E];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::ALrn => "A-LRN",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
            Self::E => "E",
        }
    }

    /// Convolution kernel sizes per block, in order.
    fn blocks(self) -> [&'static [usize]; 5] {
        match self {
            Self::A | Self::ALrn => [&[3], &[3], &[3, 3], &[3, 3], &[3, 3]],
            Self::B => [&[3, 3], &[3, 3], &[3, 3], &[3, 3], &[3, 3]],
            Self::C => [&[3, 3], &[3, 3], &[3, 3, 1], &[3, 3, 1], &[3, 3, 1]],
            Self::D => [&[3, 3], &[3, 3], &[3, 3, 3], &[3, 3, 3], &[3, 3, 3]],
            Self::E => [
                &[3, 3],
                &[3, 3],
                &[3, 3, 3, 3],
                &[3, 3, 3, 3],
                &[3, 3, 3, 3],
            ],
        }
    }
}

impl fmt::Display for ConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(s.to_string()))
    }
}

/// `Full` is the 224×224 network. `Tiny` keeps the exact layer sequence with
/// a 32×32 input, channel widths divided by 8 and a 64-unit head, so every
/// mechanism runs at test speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Full,
    Tiny,
}

impl Scale {
    fn tag(self) -> u8 {
        match self {
            Scale::Full => 0,
            Scale::Tiny => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Scale::Full),
            1 => Some(Scale::Tiny),
            _ => None,
        }
    }

    pub fn input_side(self) -> usize {
        match self {
            Scale::Full => 224,
            Scale::Tiny => 32,
        }
    }

    fn block_channels(self) -> [usize; 5] {
        let full = [64, 128, 256, 512, 512];
        match self {
            Scale::Full => full,
            Scale::Tiny => full.map(|c| c / 8),
        }
    }

    fn head_units(self) -> usize {
        match self {
            Scale::Full => 1024,
            Scale::Tiny => 64,
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Full => "full",
            Scale::Tiny => "tiny",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "tiny" => Ok(Scale::Tiny),
            other => Err(Error::InvalidParameter(format!(
                "unknown scale {other:?} (expected full or tiny)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: ConfigName,
    pub scale: Scale,
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape, `[3, H, W]`.
    pub input_shape: [usize; 3],
}

/// Builds a configuration as an ordered layer list: conv blocks with ReLU
/// after every convolution (LRN after the first one in A-LRN), five 2×2
/// max-pools, then flatten, FC/ReLU, dropout, FC/ReLU, FC-2 and softmax.
pub fn build_config(name: ConfigName, scale: Scale) -> NetworkSpec {
    let mut layers = Vec::new();
    let channels = scale.block_channels();
    for (b, kernels) in name.blocks().into_iter().enumerate() {
        for (i, &kernel) in kernels.iter().enumerate() {
            let tag = format!("{}_{}", b + 1, i + 1);
            layers.push(LayerSpec::new(
                format!("conv{tag}"),
                LayerKind::Conv {
                    kernel,
                    channels: channels[b],
                },
            ));
            layers.push(LayerSpec::new(format!("relu{tag}"), LayerKind::Relu));
            if name == ConfigName::ALrn && b == 0 && i == 0 {
                layers.push(LayerSpec::new("lrn1", LayerKind::Lrn(LrnParams::default())));
            }
        }
        layers.push(LayerSpec::new(format!("pool{}", b + 1), LayerKind::MaxPool));
    }
    let units = scale.head_units();
    layers.extend([
        LayerSpec::new("flatten", LayerKind::Flatten),
        LayerSpec::new("fc1", LayerKind::Dense { units }),
        LayerSpec::new("relu_fc1", LayerKind::Relu),
        LayerSpec::new("dropout", LayerKind::Dropout { rate: HEAD_DROPOUT }),
        LayerSpec::new("fc2", LayerKind::Dense { units }),
        LayerSpec::new("relu_fc2", LayerKind::Relu),
        LayerSpec::new("fc3", LayerKind::Dense { units: 2 }),
        LayerSpec::new("softmax", LayerKind::Softmax),
    ]);
    let side = scale.input_side();
    NetworkSpec {
        name,
        scale,
        layers,
        input_shape: [3, side, side],
    }
}

/// [`build_config`] from a CLI-style name such as `"A-LRN"`.
pub fn build_named(name: &str, scale: Scale) -> Result<NetworkSpec> {
    Ok(build_config(name.parse()?, scale))
}

/// Shapes of one weight layer's parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub weight: Vec<usize>,
    pub bias: Vec<usize>,
}

impl NetworkSpec {
    pub fn weight_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_weight_layer())
    }

    pub fn weight_layer_count(&self) -> usize {
        self.weight_layers().count()
    }

    pub fn maxpool_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::MaxPool)
            .count()
    }

    /// Per-sample output shape after every layer, in order.
    pub fn shape_trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        self.layers
            .iter()
            .map(|layer| {
                shape = layer.output_shape(&shape)?;
                Ok(shape.clone())
            })
            .collect()
    }

    pub fn param_shapes(&self) -> Result<Vec<ParamShape>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Some((weight, bias)) = layer.param_shapes(&shape)? {
                out.push(ParamShape {
                    name: layer.name.clone(),
                    weight,
                    bias,
                });
            }
            shape = layer.output_shape(&shape)?;
        }
        Ok(out)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|p| p.weight.iter().product::<usize>() + p.bias.iter().product::<usize>())
            .sum())
    }

    /// Replaces the rate of every dropout layer.
    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        for layer in &mut self.layers {
            if let LayerKind::Dropout { rate: r } = &mut layer.kind {
                *r = rate;
            }
        }
        Ok(self)
    }
}

/// Marks the first `n` weight layers non-trainable; every other layer keeps
/// its flag.
pub fn freeze_prefix(spec: &NetworkSpec, n: usize) -> Result<NetworkSpec> {
    let total = spec.weight_layer_count();
    if n > total {
        return Err(Error::InvalidParameter(format!(
            "cannot freeze {n} weight layers; configuration {} has {total}",
            spec.name
        )));
    }
    let mut out = spec.clone();
    for layer in out
        .layers
        .iter_mut()
        .filter(|l| l.is_weight_layer())
        .take(n)
    {
        layer.trainable = false;
    }
    Ok(out)
}

// ---------------------------------------------------------------- checkpoint

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub name: String,
    pub trainable: bool,
    pub params: Params<T>,
    /// Momentum buffers, present once a step with nonzero momentum has run.
    pub velocity: Option<Params<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainingMeta {
    pub epoch: u32,
    pub seed: u64,
    pub steps: u64,
    pub learning_rate: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ConfigName,
    pub scale: Scale,
    /// One entry per weight layer, in network order.
    pub layers: Vec<LayerParams<T>>,
    pub meta: TrainingMeta,
}

/// He-uniform weights (`U(±sqrt(6/fan_in))`) and zero biases, drawn from a
/// single seeded stream in layer order.
pub fn init_params<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Checkpoint<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trainable: Vec<bool> = spec.weight_layers().map(|l| l.trainable).collect();
    let layers = spec
        .param_shapes()?
        .into_iter()
        .zip(trainable)
        .map(|(shape, trainable)| {
            let fan_in: usize = match shape.weight.as_slice() {
                [_, c_in, kh, kw] => c_in * kh * kw,
                [fan_in, _] => *fan_in,
                other => unreachable!("weight shape {other:?}"),
            };
            let limit = T::from_f64_lossy((6.0 / fan_in as f64).sqrt());
            let len = shape.weight.iter().product();
            let weight = Tensor::new(&shape.weight, uniform_vec(&mut rng, len, -limit, limit))?;
            Ok(LayerParams {
                name: shape.name,
                trainable,
                params: Params {
                    weight,
                    bias: Tensor::zeros(&shape.bias)?,
                },
                velocity: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Checkpoint {
        config: spec.name,
        scale: spec.scale,
        layers,
        meta: TrainingMeta {
            seed,
            ..TrainingMeta::default()
        },
    })
}

const MAGIC: &[u8; 4] = b"ADNT";
const VERSION: u32 = 1;

impl<T: Scalar> Checkpoint<T> {
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.params.weight.len() + l.params.bias.len())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.iter().filter(|l| l.trainable).count()
    }

    /// Checks that this checkpoint carries exactly the parameters `spec` needs.
    pub fn check_matches(&self, spec: &NetworkSpec) -> Result<()> {
        if self.config != spec.name || self.scale != spec.scale {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds configuration {} ({}), expected {} ({})",
                self.config, self.scale, spec.name, spec.scale
            )));
        }
        let shapes = spec.param_shapes()?;
        if shapes.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} weight layers, configuration {} has {}",
                self.layers.len(),
                spec.name,
                shapes.len()
            )));
        }
        for (want, have) in shapes.iter().zip(&self.layers) {
            let p = &have.params;
            let velocity_ok = have
                .velocity
                .as_ref()
                .is_none_or(|v| v.weight.shape() == want.weight && v.bias.shape() == want.bias);
            if want.name != have.name
                || p.weight.shape() != want.weight
                || p.bias.shape() != want.bias
                || !velocity_ok
            {
                return Err(Error::ShapeMismatch(format!(
                    "layer {}: checkpoint has {} {:?}/{:?}, configuration expects {} {:?}/{:?}",
                    want.name,
                    have.name,
                    p.weight.shape(),
                    p.bias.shape(),
                    want.name,
                    want.weight,
                    want.bias
                )));
            }
        }
        Ok(())
    }

    /// Copies the trainable flags of `spec`'s weight layers.
    pub fn apply_trainability(&mut self, spec: &NetworkSpec) {
        for (entry, layer) in self.layers.iter_mut().zip(spec.weight_layers()) {
            entry.trainable = layer.trainable;
        }
    }

    /// Serializes to the little-endian `ADNT` format:
    ///
    /// ```text
    /// "ADNT" | version u32 | config str | scale u8
    /// | epoch u32 | seed u64 | steps u64 | learning_rate f64 | momentum f64
    /// | layer count u32
    /// | per layer: name str | trainable u8 | tensor count u32 (2, or 4 with velocity)
    /// |   per tensor: dtype u8 | rank u32 | extents u64 × rank | values
    /// ```
    ///
    /// Strings are a u32 byte length followed by UTF-8.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.parameter_count() * T::DTYPE.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, self.config.as_str());
        out.push(self.scale.tag());
        out.extend_from_slice(&self.meta.epoch.to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&self.meta.steps.to_le_bytes());
        out.extend_from_slice(&self.meta.learning_rate.to_le_bytes());
        out.extend_from_slice(&self.meta.momentum.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            put_str(&mut out, &layer.name);
            out.push(u8::from(layer.trainable));
            let mut tensors = vec![&layer.params.weight, &layer.params.bias];
            if let Some(v) = &layer.velocity {
                tensors.extend([&v.weight, &v.bias]);
            }
            out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
            for t in tensors {
                out.push(T::DTYPE.tag());
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &e in t.shape() {
                    out.extend_from_slice(&(e as u64).to_le_bytes());
                }
                for &v in t.data() {
                    v.write_le(&mut out);
                }
            }
        }
        out
    }

    /// Parses the format written by [`Checkpoint::to_bytes`] and validates it
    /// against the configuration it names.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic (not an ADNT checkpoint)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let config: ConfigName = r
            .string()?
            .parse()
            .map_err(|e: Error| corrupt(e.to_string()))?;
        let scale = Scale::from_tag(r.u8()?).ok_or_else(|| corrupt("unknown scale tag"))?;
        let meta = TrainingMeta {
            epoch: r.u32()?,
            seed: r.u64()?,
            steps: r.u64()?,
            learning_rate: r.f64()?,
            momentum: r.f64()?,
        };
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name = r.string()?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(corrupt(format!("layer {name}: bad trainable flag {other}"))),
            };
            let tensors = r.u32()?;
            if tensors != 2 && tensors != 4 {
                return Err(corrupt(format!(
                    "layer {name}: {tensors} tensors, expected 2 or 4"
                )));
            }
            let weight = r.tensor::<T>()?;
            let bias = r.tensor::<T>()?;
            let velocity = if tensors == 4 {
                Some(Params {
                    weight: r.tensor::<T>()?,
                    bias: r.tensor::<T>()?,
                })
            } else {
                None
            };
            layers.push(LayerParams {
                name,
                trainable,
                params: Params { weight, bias },
                velocity,
            });
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Checkpoint {
            config,
            scale,
            layers,
            meta,
        };
        ckpt.check_matches(&build_config(config, scale))
            .map_err(|e| corrupt(e.to_string()))?;
        Ok(ckpt)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| corrupt("string is not UTF-8"))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let tag = self.u8()?;
        match DType::from_tag(tag) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => {
                return Err(corrupt(format!(
                    "tensor dtype {d:?}, expected {:?}",
                    T::DTYPE
                )))
            }
            None => return Err(corrupt(format!("unknown dtype tag {tag}"))),
        }
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(corrupt(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let e = usize::try_from(self.u64()?).map_err(|_| corrupt("extent overflow"))?;
            len = len
                .checked_mul(e)
                .ok_or_else(|| corrupt("extent overflow"))?;
            shape.push(e);
        }
        let size = T::DTYPE.size();
        let raw = self.take(
            len.checked_mul(size)
                .ok_or_else(|| corrupt("extent overflow"))?,
        )?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(&shape, data).map_err(|e| corrupt(e.to_string()))
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks it against an expected configuration;
/// a checkpoint for any other configuration is a shape mismatch.
pub fn load_checkpoint_for<T: Scalar>(
    path: impl AsRef<Path>,
    spec: &NetworkSpec,
) -> Result<Checkpoint<T>> {
    let mut ckpt = load_checkpoint(path)?;
    ckpt.check_matches(spec)?;
    ckpt.apply_trainability(spec);
    Ok(ckpt)
}

// ---------------------------------------------------------------- live model

/// Parameter gradients, one entry per weight layer. `None` marks a layer the
/// backward pass did not reach because nothing before it is trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<Params<T>>>,
}

/// A configuration bound to parameters, with per-layer activation caches.
/// A model is single-threaded across calls; kernels inside a call may fan
/// out according to its [`Exec`] setting.
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: NetworkSpec,
    params: Checkpoint<T>,
    layers: Vec<LayerState<T>>,
    /// Index into `params.layers` for each weight layer.
    slots: Vec<Option<usize>>,
    exec: Exec,
}

impl<T: Scalar> Model<T> {
    /// Binds `params` to `spec`. Trainable flags are taken from the spec.
    pub fn new(spec: NetworkSpec, mut params: Checkpoint<T>) -> Result<Self> {
        params.check_matches(&spec)?;
        params.apply_trainability(&spec);
        let mut next = 0;
        let slots = spec
            .layers
            .iter()
            .map(|l| {
                l.is_weight_layer().then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerState::new(l.clone(), i))
            .collect();
        Ok(Self {
            spec,
            params,
            layers,
            slots,
            exec: Exec::default(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn checkpoint(&self) -> &Checkpoint<T> {
        &self.params
    }

    pub fn checkpoint_mut(&mut self) -> &mut Checkpoint<T> {
        &mut self.params
    }

    pub fn into_checkpoint(self) -> Checkpoint<T> {
        self.params
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.rank() != 4 || input.shape()[1..] != self.spec.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "configuration {} ({}) expects input [N, {}, {}, {}], got {:?}",
                self.spec.name,
                self.spec.scale,
                self.spec.input_shape[0],
                self.spec.input_shape[1],
                self.spec.input_shape[2],
                input.shape()
            )));
        }
        Ok(())
    }

    /// Runs every layer, returning the `[N, 2]` class probabilities.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.forward_traced(input, mode, |_, _| {})
    }

    /// Like [`Model::forward`], calling `observe(layer, output)` after each layer.
    pub fn forward_traced(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        mut observe: impl FnMut(&LayerSpec, &Tensor<T>),
    ) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for (layer, slot) in self.layers.iter_mut().zip(&self.slots) {
            let params = slot.map(|i| &self.params.layers[i].params);
            x = layer.forward(x, params, mode, self.exec)?;
            observe(layer.spec(), &x);
        }
        Ok(x)
    }

    /// Back-propagates a gradient with respect to the pre-softmax logits
    /// (the fused softmax + cross-entropy gradient). Stops once no earlier
    /// layer is trainable.
    pub fn backward_from_logits(&mut self, grad_logits: Tensor<T>) -> Result<Gradients<T>> {
        let last = self.layers.len() - 1;
        if self.layers[last].spec().kind != LayerKind::Softmax {
            return Err(Error::InvalidParameter(
                "network does not end in softmax".into(),
            ));
        }
        self.layers[last].clear_cache();
        // Earliest weight layer whose parameters we still need gradients for.
        let first_trainable = self
            .layers
            .iter()
            .position(|l| l.spec().is_weight_layer() && l.spec().trainable);
        let mut grads = vec![None; self.params.layers.len()];
        let mut g = grad_logits;
        for i in (0..last).rev() {
            if first_trainable.is_none_or(|f| i < f) {
                self.layers[i].clear_cache();
                continue;
            }
            let slot = self.slots[i];
            let params = slot.map(|s| &self.params.layers[s].params);
            let (gx, gp) = self.layers[i].backward(g, params, self.exec)?;
            if let (Some(s), Some(gp)) = (slot, gp) {
                grads[s] = Some(gp);
            }
            g = gx;
        }
        Ok(Gradients { layers: grads })
    }

    /// One training-mode forward pass plus backward pass on a batch with
    /// one-hot `targets`. Returns the mean loss, the probabilities and the
    /// parameter gradients.
    pub fn loss_and_grads(
        &mut self,
        input: &Tensor<T>,
        targets: &Tensor<T>,
        seed: u64,
    ) -> Result<(T, Tensor<T>, Gradients<T>)> {
        let probs = self.forward(input, Mode::Train { seed })?;
        let loss = cross_entropy_loss(&probs, targets)?;
        let grad = softmax_cross_entropy_grad(&probs, targets)?;
        let grads = self.backward_from_logits(grad)?;
        Ok((loss, probs, grads))
    }

    /// Mean loss of a training-mode forward pass, without touching caches.
    pub fn loss(&mut self, input: &Tensor<T>, targets: &Tensor<T>, seed: u64) -> Result<T> {
        let probs = self.forward(input, Mode::Train { seed })?;
        self.layers.iter_mut().for_each(LayerState::clear_cache);
        cross_entropy_loss(&probs, targets)
    }
}
