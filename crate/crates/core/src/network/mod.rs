//! Dense blocks, MDenseNet branches and the three-branch mask network.
//!
//! Every block keeps a constant channel width `k` between scales: a dense
//! block consumes `n` channels and emits only its last layer's `k` feature
//! maps, while layer `i` inside it sees `n + (i - 1) k` channels.

mod checkpoint;
mod params;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use params::{param_count, BnUpdate, BoundParams, Param, ParamKind, ParamStore};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{self, BatchNormMode};
use crate::tensor::{Tensor, Var};

pub const BRANCH_KERNELS: [(usize, usize); 3] = [(3, 3), (13, 1), (1, 13)];
pub const FINAL_BLOCK_KERNEL: (usize, usize) = (3, 3);
/// Mono spectrogram input.
pub const INPUT_CHANNELS: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub growth_rate: usize,
    pub layers_per_block: usize,
    /// Number of 2x downsamplings per branch.
    pub depth: usize,
    pub branch_kernels: Vec<(usize, usize)>,
    pub leaky_alpha: f64,
    pub final_block_layers: usize,
}

impl Default for NetworkConfig {
    /// k=10, L=5, d=4 with a 4-layer fusion block: 552,062 trainable parameters.
    fn default() -> Self {
        Self {
            growth_rate: 10,
            layers_per_block: 5,
            depth: 4,
            branch_kernels: BRANCH_KERNELS.to_vec(),
            leaky_alpha: 0.01,
            final_block_layers: 4,
        }
    }
}

impl NetworkConfig {
    /// Tiny configuration for tests and smoke runs.
    pub fn small() -> Self {
        Self { growth_rate: 2, layers_per_block: 2, depth: 2, final_block_layers: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("growth_rate", self.growth_rate),
            ("layers_per_block", self.layers_per_block),
            ("depth", self.depth),
            ("final_block_layers", self.final_block_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if self.depth > 16 {
            return Err(Error::InvalidArgument(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.branch_kernels.is_empty() {
            return Err(Error::InvalidArgument("at least one branch is required".into()));
        }
        if let Some(&(kh, kw)) = self.branch_kernels.iter().find(|(kh, kw)| kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::InvalidArgument(format!("branch kernel {kh}x{kw} must have odd dims")));
        }
        if !self.leaky_alpha.is_finite() || self.leaky_alpha < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid leaky_alpha {}", self.leaky_alpha)));
        }
        Ok(())
    }

    /// Checks that an `h x w` input survives `depth` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::InvalidArgument(format!("input {h}x{w} is not divisible by 2^{} = {f}", self.depth)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

/// A parameter a layer needs, with its initializer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    init: Init,
}

impl ParamSpec {
    fn trainable(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self { name, shape, kind: ParamKind::Trainable, init }
    }

    fn running(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self { name, shape, kind: ParamKind::RunningStat, init }
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Tensor {
        match self.init {
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(self.shape.clone(), |_| rng.gen_range(-bound..bound))
            }
            Init::Zeros => Tensor::zeros(self.shape.clone()),
            Init::Ones => Tensor::ones(self.shape.clone()),
        }
    }
}

/// State threaded through one forward pass.
pub struct ForwardCtx<'a> {
    params: &'a BoundParams,
    mode: BatchNormMode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(params: &'a BoundParams, mode: BatchNormMode) -> Self {
        Self { params, mode, bn_updates: Vec::new() }
    }

    /// Running-stat updates gathered so far (training mode only).
    pub fn into_bn_updates(self) -> Vec<BnUpdate> {
        self.bn_updates
    }

    fn var(&self, name: &str) -> Result<&'a Var> {
        self.params.var(name)
    }
}

/// Convolution -> batch norm -> activation, emitting `out_channels` maps.
#[derive(Clone, Debug)]
pub struct CompositeLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub activation: Activation,
}

impl CompositeLayer {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        activation: Activation,
    ) -> Self {
        Self { name: name.into(), in_channels, out_channels, kernel, activation }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (kh, kw) = self.kernel;
        let (c_in, k) = (self.in_channels, self.out_channels);
        let n = &self.name;
        vec![
            ParamSpec::trainable(
                format!("{n}.conv.weight"),
                vec![k, c_in, kh, kw],
                Init::HeUniform { fan_in: c_in * kh * kw },
            ),
            ParamSpec::trainable(format!("{n}.conv.bias"), vec![k], Init::Zeros),
            ParamSpec::trainable(format!("{n}.bn.gamma"), vec![k], Init::Ones),
            ParamSpec::trainable(format!("{n}.bn.beta"), vec![k], Init::Zeros),
            ParamSpec::running(format!("{n}.bn.running_mean"), vec![k], Init::Zeros),
            ParamSpec::running(format!("{n}.bn.running_var"), vec![k], Init::Ones),
        ]
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: &Var) -> Result<Var> {
        let n = &self.name;
        let y = ops::conv2d(x, ctx.var(&format!("{n}.conv.weight"))?, ctx.var(&format!("{n}.conv.bias"))?)?;
        let bn = format!("{n}.bn");
        let mut stats = ctx.params.running_stats(&bn)?;
        let y = ops::batchnorm(
            &y,
            ctx.var(&format!("{bn}.gamma"))?,
            ctx.var(&format!("{bn}.beta"))?,
            &mut stats,
            ctx.mode,
        )?;
        if ctx.mode == BatchNormMode::Train {
            ctx.bn_updates.push(BnUpdate { prefix: bn, stats });
        }
        match self.activation {
            Activation::Relu => ops::relu(&y),
            Activation::LeakyRelu(a) => ops::leaky_relu(&y, a),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wiring {
    /// Layer `i` reads only layer `i - 1`.
    Chain,
    /// Layer `i` reads the block input and every earlier layer.
    Dense,
}

/// A stack of composite layers with chain or dense wiring. The output is the
/// last layer's feature maps.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub name: String,
    pub in_channels: usize,
    pub growth_rate: usize,
    pub wiring: Wiring,
    pub layers: Vec<CompositeLayer>,
    /// For each layer, the feature maps it concatenates (0 = block input).
    sources: Vec<Vec<usize>>,
}

impl DenseBlock {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        n_layers: usize,
        growth_rate: usize,
        kernel: (usize, usize),
        activation: Activation,
    ) -> Self {
        Self::with_wiring(name, in_channels, n_layers, growth_rate, kernel, activation, Wiring::Dense)
    }

    pub fn with_wiring(
        name: impl Into<String>,
        in_channels: usize,
        n_layers: usize,
        growth_rate: usize,
        kernel: (usize, usize),
        activation: Activation,
        wiring: Wiring,
    ) -> Self {
        let name = name.into();
        let mut layers = Vec::with_capacity(n_layers);
        let mut sources = Vec::with_capacity(n_layers);
        for i in 1..=n_layers {
            let (src, c_in) = match wiring {
                Wiring::Dense => ((0..i).collect::<Vec<_>>(), in_channels + (i - 1) * growth_rate),
                Wiring::Chain => (vec![i - 1], if i == 1 { in_channels } else { growth_rate }),
            };
            if wiring == Wiring::Dense {
                assert_eq!(c_in, in_channels + (i - 1) * growth_rate, "dense channel rule violated in {name}");
            }
            layers.push(CompositeLayer::new(format!("{name}.layer{i}"), c_in, growth_rate, kernel, activation));
            sources.push(src);
        }
        Self { name, in_channels, growth_rate, wiring, layers, sources }
    }

    pub fn layer_input_channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.in_channels).collect()
    }

    /// Number of feature-map connections feeding the layers.
    pub fn connection_count(&self) -> usize {
        self.sources.iter().map(Vec::len).sum()
    }

    pub fn out_channels(&self) -> usize {
        self.growth_rate
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers.iter().flat_map(CompositeLayer::param_specs).collect()
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: &Var) -> Result<Var> {
        let mut features = vec![x.clone()];
        for (layer, src) in self.layers.iter().zip(&self.sources) {
            let input = if src.len() == 1 {
                features[src[0]].clone()
            } else {
                let refs: Vec<&Var> = src.iter().map(|&j| &features[j]).collect();
                ops::concat_channels(&refs)?
            };
            debug_assert_eq!(input.value().dims4()?.1, layer.in_channels);
            features.push(layer.forward(ctx, &input)?);
        }
        Ok(features.pop().expect("block has at least one layer"))
    }
}

/// 2x2 stride-2 transposed convolution, `channels -> channels`.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub name: String,
    pub channels: usize,
}

impl Upsample {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.channels;
        vec![
            ParamSpec::trainable(format!("{}.weight", self.name), vec![c, c, 2, 2], Init::HeUniform { fan_in: c }),
            ParamSpec::trainable(format!("{}.bias", self.name), vec![c], Init::Zeros),
        ]
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: &Var) -> Result<Var> {
        let n = &self.name;
        ops::transposed_conv2(x, ctx.var(&format!("{n}.weight"))?, ctx.var(&format!("{n}.bias"))?)
    }
}

/// One multi-scale DenseNet encoder-decoder with a single kernel shape.
#[derive(Clone, Debug)]
pub struct Branch {
    pub name: String,
    pub kernel: (usize, usize),
    /// Indexed by scale, 0 = full resolution.
    pub encoders: Vec<DenseBlock>,
    pub bottleneck: DenseBlock,
    pub upsamplers: Vec<Upsample>,
    pub decoders: Vec<DenseBlock>,
}

impl Branch {
    pub fn new(name: impl Into<String>, cfg: &NetworkConfig, kernel: (usize, usize)) -> Self {
        let name = name.into();
        let (k, l) = (cfg.growth_rate, cfg.layers_per_block);
        let block = |tag: String, n: usize| DenseBlock::new(format!("{name}.{tag}"), n, l, k, kernel, Activation::Relu);
        let encoders =
            (0..cfg.depth).map(|j| block(format!("enc{j}"), if j == 0 { INPUT_CHANNELS } else { k })).collect();
        let bottleneck = block("bottleneck".into(), k);
        let upsamplers = (0..cfg.depth).map(|j| Upsample { name: format!("{name}.up{j}"), channels: k }).collect();
        // decoder input = upsampled path + same-scale encoder output
        let decoders = (0..cfg.depth).map(|j| block(format!("dec{j}"), 2 * k)).collect();
        Self { name, kernel, encoders, bottleneck, upsamplers, decoders }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &DenseBlock> {
        self.encoders.iter().chain(std::iter::once(&self.bottleneck)).chain(&self.decoders)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs: Vec<ParamSpec> = self.encoders.iter().flat_map(DenseBlock::param_specs).collect();
        specs.extend(self.bottleneck.param_specs());
        for (up, dec) in self.upsamplers.iter().zip(&self.decoders).rev() {
            specs.extend(up.param_specs());
            specs.extend(dec.param_specs());
        }
        specs
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: &Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut cur = x.clone();
        for enc in &self.encoders {
            let e = enc.forward(ctx, &cur)?;
            cur = ops::maxpool2(&e)?;
            skips.push(e);
        }
        cur = self.bottleneck.forward(ctx, &cur)?;
        for ((up, dec), skip) in self.upsamplers.iter().zip(&self.decoders).zip(&skips).rev() {
            let u = up.forward(ctx, &cur)?;
            cur = dec.forward(ctx, &ops::concat_channels(&[&u, skip])?)?;
        }
        Ok(cur)
    }
}

/// 1x1 convolution to a single channel followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub name: String,
    pub in_channels: usize,
}

impl MaskHead {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::trainable(
                format!("{}.weight", self.name),
                vec![1, self.in_channels, 1, 1],
                Init::HeUniform { fan_in: self.in_channels },
            ),
            ParamSpec::trainable(format!("{}.bias", self.name), vec![1], Init::Zeros),
        ]
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: &Var) -> Result<Var> {
        let n = &self.name;
        ops::sigmoid(&ops::conv2d(x, ctx.var(&format!("{n}.weight"))?, ctx.var(&format!("{n}.bias"))?)?)
    }
}

/// Percussive and harmonic soft masks.
#[derive(Clone, Debug)]
pub struct MaskPair {
    pub percussive: Var,
    pub harmonic: Var,
}

/// Three MDenseNet branches (3x3, 13x1, 1x13 kernels) fused by a LeakyReLU
/// dense block, followed by two independent 1x1 sigmoid mask heads.
#[derive(Clone, Debug)]
pub struct ThreeWayMDenseNet {
    pub config: NetworkConfig,
    pub branches: Vec<Branch>,
    pub final_block: DenseBlock,
    pub head_percussive: MaskHead,
    pub head_harmonic: MaskHead,
}

pub fn branch_name((kh, kw): (usize, usize)) -> String {
    format!("branch_{kh}x{kw}")
}

impl ThreeWayMDenseNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let k = config.growth_rate;
        let branches: Vec<Branch> =
            config.branch_kernels.iter().map(|&kern| Branch::new(branch_name(kern), &config, kern)).collect();
        let final_block = DenseBlock::new(
            "final",
            branches.len() * k,
            config.final_block_layers,
            k,
            FINAL_BLOCK_KERNEL,
            Activation::LeakyRelu(config.leaky_alpha),
        );
        let head_percussive = MaskHead { name: "head_percussive".into(), in_channels: k };
        let head_harmonic = MaskHead { name: "head_harmonic".into(), in_channels: k };
        Ok(Self { config, branches, final_block, head_percussive, head_harmonic })
    }

    /// All dense blocks in the model, fusion block last.
    pub fn blocks(&self) -> impl Iterator<Item = &DenseBlock> {
        self.branches.iter().flat_map(Branch::blocks).chain(std::iter::once(&self.final_block))
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs: Vec<ParamSpec> = self.branches.iter().flat_map(Branch::param_specs).collect();
        specs.extend(self.final_block.param_specs());
        specs.extend(self.head_percussive.param_specs());
        specs.extend(self.head_harmonic.param_specs());
        specs
    }

    /// Trainable parameter total implied by the architecture.
    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .filter(|s| s.kind == ParamKind::Trainable)
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// Deterministic He-uniform initialization from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in self.param_specs() {
            let t = spec.init(&mut rng);
            store.insert(spec.name, t, spec.kind).expect("parameter names are unique by construction");
        }
        store
    }

    /// Checks that `store` holds exactly the tensors this model expects.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let specs = self.param_specs();
        if specs.len() != store.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", specs.len(), store.len())));
        }
        for spec in specs {
            let p = store.get(&spec.name).ok_or_else(|| Error::Checkpoint(format!("missing `{}`", spec.name)))?;
            if p.tensor.shape() != spec.shape.as_slice() || p.kind != spec.kind {
                return Err(Error::Checkpoint(format!("`{}` has shape {:?}", spec.name, p.tensor.shape())));
            }
        }
        Ok(())
    }

    /// Runs the network on a normalized `[1, H, W]` or `[N, 1, H, W]` input.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: &Var) -> Result<MaskPair> {
        let (_, c, h, w) = x.value().dims4()?;
        if c != INPUT_CHANNELS {
            return Err(Error::shape("three_w_mdensenet", format!("expected 1 input channel, got {c}")));
        }
        self.config.check_input(h, w)?;
        let outs = self.branches.iter().map(|b| b.forward(ctx, x)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Var> = outs.iter().collect();
        let fused = self.final_block.forward(ctx, &ops::concat_channels(&refs)?)?;
        Ok(MaskPair {
            percussive: self.head_percussive.forward(ctx, &fused)?,
            harmonic: self.head_harmonic.forward(ctx, &fused)?,
        })
    }

    /// Inference with running statistics and no graph recording.
    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        crate::tensor::no_grad(|| {
            let bound = store.bind(false);
            let mut ctx = ForwardCtx::new(&bound, BatchNormMode::Infer);
            let masks = self.forward(&mut ctx, &Var::constant(x.clone()))?;
            Ok((masks.percussive.value().clone(), masks.harmonic.value().clone()))
        })
    }
}
