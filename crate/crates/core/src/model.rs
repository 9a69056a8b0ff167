//! Learnable parts of the adaptation network.
//!
//! * `F`: patch embedding + transformer blocks, with access to every block's
//!   input token sequence,
//! * `G`: enhancement head projecting the class-token feature into the
//!   teacher's embedding space,
//! * `C`: dropout + affine classifier on `G`'s output,
//! * `D`: domain discriminator on the raw class-token feature, coupled to
//!   `F` through gradient reversal.
//!
//! Parameters live in one [`ParamStore`] under the prefixes `F.`, `G.`, `C.`
//! and `D.`, created from a seeded stream so initialization is reproducible.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, DType, Device, IndexOp, Layout, Shape, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_domains::ImageSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Output width of `G`; must equal the embedding provider's dimension.
    pub embed_dim: usize,
    pub num_classes: usize,
    pub classifier_dropout: f64,
    pub disc_hidden: usize,
    pub enhance_init_std: f64,
    /// Std of backbone and classifier weights; `None` scales by `1/sqrt(fan_in)`.
    pub init_std: Option<f64>,
    /// Standardize each image to zero mean and unit variance before patching.
    pub standardize_input: bool,
}

impl ModelConfig {
    /// ViT-B/16 at 224 px.
    pub fn vit_b16(num_classes: usize, embed_dim: usize) -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            embed_dim,
            num_classes,
            classifier_dropout: 0.1,
            disc_hidden: 256,
            enhance_init_std: (1.0f64 / 768.0).sqrt(),
            init_std: Some(0.02),
            standardize_input: false,
        }
    }

    /// Four-block backbone for 16 px toy images.
    pub fn toy(num_classes: usize, embed_dim: usize) -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            dim: 32,
            depth: 4,
            heads: 2,
            mlp_ratio: 2,
            embed_dim,
            num_classes,
            classifier_dropout: 0.1,
            disc_hidden: 256,
            enhance_init_std: (1.0f64 / 32.0).sqrt(),
            init_std: None,
            standardize_input: true,
        }
    }

    fn weight_std(&self, fan_in: usize) -> f64 {
        self.init_std
            .unwrap_or_else(|| (1.0 / fan_in as f64).sqrt())
    }

    pub fn image_spec(&self) -> ImageSpec {
        ImageSpec::square(self.channels, self.image_size)
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size must be a multiple of patch_size");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be a multiple of heads");
        }
        if self.depth == 0 || self.num_classes == 0 || self.embed_dim == 0 {
            return bad("depth, num_classes and embed_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.classifier_dropout) {
            return bad("classifier_dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Named trainable tensors.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    fn create(
        &mut self,
        name: String,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        if self.vars.insert(name.clone(), var).is_some() {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        Ok(out)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Parameters whose name starts with `prefix` (e.g. `"F."`).
    pub fn group<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

#[derive(Clone)]
struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let init = if std == 0.0 {
            Init::Zeros
        } else {
            Init::Normal(std)
        };
        let weight = ps.create(format!("{name}.weight"), &[d_out, d_in], init, rng)?;
        let bias = ps.create(format!("{name}.bias"), &[d_out], Init::Zeros, rng)?;
        Ok(Self { weight, bias })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / d_in;
        let y = x
            .reshape((rows, d_in))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar input") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone)]
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn new(ps: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            weight: ps.create(format!("{name}.weight"), &[d], Init::Ones, rng)?,
            bias: ps.create(format!("{name}.bias"), &[d], Init::Zeros, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / n)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / n)?;
        let normed = centered.broadcast_div(&(var + 1e-6)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

#[derive(Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d, rng)?,
            qkv: Linear::new(
                ps,
                &format!("{name}.attn.qkv"),
                d,
                3 * d,
                cfg.weight_std(d),
                rng,
            )?,
            proj: Linear::new(
                ps,
                &format!("{name}.attn.proj"),
                d,
                d,
                cfg.weight_std(d),
                rng,
            )?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d, rng)?,
            fc1: Linear::new(
                ps,
                &format!("{name}.mlp.fc1"),
                d,
                cfg.mlp_ratio * d,
                cfg.weight_std(d),
                rng,
            )?,
            fc2: Linear::new(
                ps,
                &format!("{name}.mlp.fc2"),
                cfg.mlp_ratio * d,
                d,
                cfg.weight_std(cfg.mlp_ratio * d),
                rng,
            )?,
            heads: cfg.heads,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let h = self.norm1.forward(x)?;
        let qkv = self
            .qkv
            .forward(&h)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let o = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        let x = (x + self.proj.forward(&o)?)?;
        let h = self
            .fc2
            .forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        Ok((x + h)?)
    }
}

/// Batch x tokens x channels input of block `block_index` (`depth` means the
/// output of the last block).
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub data: Tensor,
    pub block_index: usize,
}

/// Observes and optionally replaces each block's input.
pub trait BlockHook {
    fn block_input(&mut self, seq: TokenSequence) -> Result<TokenSequence>;
}

pub struct IdentityHook;

impl BlockHook for IdentityHook {
    fn block_input(&mut self, seq: TokenSequence) -> Result<TokenSequence> {
        Ok(seq)
    }
}

struct RecordingHook<'a> {
    wanted: &'a [usize],
    recorded: Vec<TokenSequence>,
}

impl BlockHook for RecordingHook<'_> {
    fn block_input(&mut self, seq: TokenSequence) -> Result<TokenSequence> {
        if self.wanted.contains(&seq.block_index) {
            self.recorded.push(seq.clone());
        }
        Ok(seq)
    }
}

/// `F`: patch embedding followed by transformer blocks.
#[derive(Clone)]
pub struct FeatureExtractor {
    patch: Linear,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    spec: ImageSpec,
    patch_size: usize,
    dim: usize,
    standardize: bool,
}

impl FeatureExtractor {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let p = cfg.patch_size;
        let patch = Linear::new(
            ps,
            "F.patch_embed",
            cfg.channels * p * p,
            cfg.dim,
            cfg.weight_std(cfg.channels * p * p),
            rng,
        )?;
        let cls_token = ps.create(
            "F.cls_token".into(),
            &[1, 1, cfg.dim],
            Init::Normal(0.02),
            rng,
        )?;
        let pos_embed = ps.create(
            "F.pos_embed".into(),
            &[1, cfg.num_patches() + 1, cfg.dim],
            Init::Normal(0.02),
            rng,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(ps, &format!("F.blocks.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(ps, "F.norm", cfg.dim, rng)?;
        Ok(Self {
            patch,
            cls_token,
            pos_embed,
            blocks,
            norm,
            spec: cfg.image_spec(),
            patch_size: p,
            dim: cfg.dim,
            standardize: cfg.standardize_input,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Patch embedding plus class token and positions: the input of block 0.
    pub fn embed(&self, images: &Tensor) -> Result<TokenSequence> {
        let (b, c, h, w) = images.dims4()?;
        if (c, h, w) != (self.spec.channels, self.spec.height, self.spec.width) {
            return Err(Error::invalid(format!(
                "image batch is {c}x{h}x{w}, backbone expects {}x{}x{}",
                self.spec.channels, self.spec.height, self.spec.width
            )));
        }
        let p = self.patch_size;
        let images = if self.standardize {
            let flat = images.flatten_from(1)?;
            let n = (c * h * w) as f64;
            let centered = flat.broadcast_sub(&(flat.sum_keepdim(1)? / n)?)?;
            let std = ((centered.sqr()?.sum_keepdim(1)? / n)? + 1e-6)?.sqrt()?;
            centered.broadcast_div(&std)?.reshape((b, c, h, w))?
        } else {
            images.clone()
        };
        let patches = images
            .reshape((b, c, h / p, p, w / p, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, (h / p) * (w / p), c * p * p))?;
        let tokens = self.patch.forward(&patches)?;
        let cls = self.cls_token.broadcast_as((b, 1, self.dim))?;
        let data = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos_embed)?;
        Ok(TokenSequence {
            data,
            block_index: 0,
        })
    }

    /// Advances `seq` through blocks `seq.block_index .. until`.
    pub fn run_blocks(&self, seq: TokenSequence, until: usize) -> Result<TokenSequence> {
        self.run_blocks_hooked(seq, until, &mut IdentityHook)
    }

    fn run_blocks_hooked(
        &self,
        mut seq: TokenSequence,
        until: usize,
        hook: &mut dyn BlockHook,
    ) -> Result<TokenSequence> {
        if until > self.depth() || seq.block_index > until {
            return Err(Error::invalid(format!(
                "cannot run blocks {}..{until} of a {}-block backbone",
                seq.block_index,
                self.depth()
            )));
        }
        for l in seq.block_index..until {
            seq = hook.block_input(seq)?;
            seq = TokenSequence {
                data: self.blocks[l].forward(&seq.data)?,
                block_index: l + 1,
            };
        }
        Ok(seq)
    }

    /// Final norm and class-token readout of a fully processed sequence.
    pub fn readout(&self, seq: &TokenSequence) -> Result<Tensor> {
        if seq.block_index != self.depth() {
            return Err(Error::invalid("readout needs the output of the last block"));
        }
        Ok(self.norm.forward(&seq.data)?.i((.., 0, ..))?.contiguous()?)
    }

    pub fn forward_with_hook(&self, images: &Tensor, hook: &mut dyn BlockHook) -> Result<Tensor> {
        let seq = self.embed(images)?;
        let out = self.run_blocks_hooked(seq, self.depth(), hook)?;
        self.readout(&out)
    }

    /// Class-token feature plus the recorded inputs of the requested blocks.
    pub fn forward_features(
        &self,
        images: &Tensor,
        record: &[usize],
    ) -> Result<(Tensor, Vec<TokenSequence>)> {
        let mut hook = RecordingHook {
            wanted: record,
            recorded: Vec::new(),
        };
        let feature = self.forward_with_hook(images, &mut hook)?;
        Ok((feature, hook.recorded))
    }
}

/// `G`: `d -> d -> d_e` perceptron with GELU.
#[derive(Clone)]
pub struct EnhancementHead {
    fc1: Linear,
    fc2: Linear,
}

impl EnhancementHead {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(
                ps,
                "G.fc1",
                cfg.dim,
                cfg.dim,
                (1.0 / cfg.dim as f64).sqrt(),
                rng,
            )?,
            fc2: Linear::new(
                ps,
                "G.fc2",
                cfg.dim,
                cfg.embed_dim,
                cfg.enhance_init_std,
                rng,
            )?,
        })
    }

    pub fn forward(&self, feature: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(feature)?.gelu()?)
    }
}

/// `C` output for a batch.
pub struct ClassOutput {
    pub logits: Tensor,
    pub probs: Tensor,
}

/// `C`: dropout then affine map to `K` logits.
#[derive(Clone)]
pub struct ClassifierHead {
    fc: Linear,
    dropout: f64,
}

impl ClassifierHead {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(
                ps,
                "C.fc",
                cfg.embed_dim,
                cfg.num_classes,
                cfg.weight_std(cfg.embed_dim),
                rng,
            )?,
            dropout: cfg.classifier_dropout,
        })
    }

    /// Passing a dropout stream puts the head in training mode.
    pub fn forward(
        &self,
        enhanced: &Tensor,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ClassOutput> {
        let x = match dropout_rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mask: Vec<f64> = (0..enhanced.elem_count())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mask = Tensor::from_vec(mask, enhanced.shape(), enhanced.device())?
                    .to_dtype(enhanced.dtype())?;
                (enhanced * mask)?
            }
            _ => enhanced.clone(),
        };
        let logits = self.fc.forward(&x)?;
        let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
        Ok(ClassOutput { logits, probs })
    }
}

/// Identity forward; backward multiplies the incoming gradient by `-scale`.
pub struct GradientReversal {
    pub scale: f64,
}

impl candle_core::CustomOp1 for GradientReversal {
    fn name(&self) -> &'static str {
        "gradient-reversal"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout.contiguous_offsets().ok_or_else(|| {
            candle_core::Error::Msg("gradient reversal needs contiguous input".into())
        })?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].to_vec()),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(
                    candle_core::backend::BackendStorage::dtype(other),
                    "gradient-reversal",
                ))
            }
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.affine(-self.scale, 0.0)?))
    }
}

pub fn reverse_gradient(x: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GradientReversal { scale })?)
}

/// `D`: three-layer perceptron to two domain logits (index 0 = source).
#[derive(Clone)]
pub struct DomainDiscriminator {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl DomainDiscriminator {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let h = cfg.disc_hidden;
        Ok(Self {
            fc1: Linear::new(ps, "D.fc1", cfg.dim, h, (2.0 / cfg.dim as f64).sqrt(), rng)?,
            fc2: Linear::new(ps, "D.fc2", h, h, (2.0 / h as f64).sqrt(), rng)?,
            fc3: Linear::new(ps, "D.fc3", h, 2, (1.0 / h as f64).sqrt(), rng)?,
        })
    }

    /// `reversal = Some(rho)` routes the input through gradient reversal;
    /// `None` is a plain pass used for probes and gradient checks.
    pub fn forward(&self, feature: &Tensor, reversal: Option<f64>) -> Result<Tensor> {
        let x = match reversal {
            Some(rho) => reverse_gradient(feature, rho)?,
            None => feature.clone(),
        };
        let h = self.fc1.forward(&x)?.relu()?;
        let h = self.fc2.forward(&h)?.relu()?;
        self.fc3.forward(&h)
    }
}

/// The four parts plus their parameters.
pub struct UdaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: FeatureExtractor,
    pub enhance: EnhancementHead,
    pub classifier: ClassifierHead,
    pub discriminator: DomainDiscriminator,
}

impl UdaModel {
    pub fn new(config: ModelConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, Device::Cpu);
        let backbone = FeatureExtractor::new(&mut ps, &config, rng)?;
        let enhance = EnhancementHead::new(&mut ps, &config, rng)?;
        let classifier = ClassifierHead::new(&mut ps, &config, rng)?;
        let discriminator = DomainDiscriminator::new(&mut ps, &config, rng)?;
        Ok(Self {
            config,
            params: ps,
            backbone,
            enhance,
            classifier,
            discriminator,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Stacks channel-major images into a `B x C x H x W` tensor.
    pub fn images_tensor(&self, images: &[&[f32]]) -> Result<Tensor> {
        let spec = self.config.image_spec();
        let mut flat = Vec::with_capacity(images.len() * spec.numel());
        for img in images {
            if img.len() != spec.numel() {
                return Err(Error::DimensionMismatch {
                    what: "image",
                    expected: spec.numel(),
                    got: img.len(),
                });
            }
            flat.extend_from_slice(img);
        }
        Ok(Tensor::from_vec(
            flat,
            (images.len(), spec.channels, spec.height, spec.width),
            self.params.device(),
        )?
        .to_dtype(self.dtype())?)
    }

    /// Deterministic inference path `F -> G -> C`.
    pub fn predict_probs(&self, images: &Tensor) -> Result<Tensor> {
        let feature = self.backbone.forward_with_hook(images, &mut IdentityHook)?;
        let enhanced = self.enhance.forward(&feature)?;
        Ok(self.classifier.forward(&enhanced, None)?.probs)
    }

    pub fn predict(&self, images: &[&[f32]]) -> Result<Vec<usize>> {
        let probs = self.predict_probs(&self.images_tensor(images)?)?;
        Ok(probs
            .argmax(D::Minus1)?
            .to_vec1::<u32>()?
            .into_iter()
            .map(|v| v as usize)
            .collect())
    }

    /// Overwrites parameters from `tensors` where names match; returns how
    /// many were loaded. Shape mismatches are errors.
    pub fn load_named(&self, tensors: &BTreeMap<String, Tensor>) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in tensors {
            if let Some(var) = self.params.get(name) {
                if var.dims() != t.dims() {
                    return Err(Error::DimensionMismatch {
                        what: "parameter",
                        expected: var.elem_count(),
                        got: t.elem_count(),
                    });
                }
                var.set(&t.to_dtype(self.dtype())?)?;
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            dim: 8,
            depth: 4,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 6,
            num_classes: 15,
            classifier_dropout: 0.5,
            disc_hidden: 16,
            enhance_init_std: 1e-3,
            init_std: None,
            standardize_input: true,
        }
    }

    fn model(dtype: DType) -> UdaModel {
        UdaModel::new(tiny(), dtype, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn images(m: &UdaModel, b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = m.config.image_spec().numel();
        let data: Vec<f32> = (0..b * n)
            .map(|_| rng.random::<f32>() * 2.0 - 1.0)
            .collect();
        Tensor::from_vec(data, (b, 3, 8, 8), &Device::Cpu)
            .unwrap()
            .to_dtype(m.dtype())
            .unwrap()
    }

    #[test]
    fn feature_shapes_and_block_records() {
        let m = model(DType::F32);
        let x = images(&m, 2, 1);
        let (f, rec) = m.backbone.forward_features(&x, &[0, 2]).unwrap();
        assert_eq!(f.dims(), &[2, 8]);
        assert_eq!(
            rec.iter().map(|s| s.block_index).collect::<Vec<_>>(),
            vec![0, 2]
        );
        for s in &rec {
            assert_eq!(
                s.data.dims(),
                &[2, 5, 8],
                "token count constant across blocks"
            );
        }
    }

    #[test]
    fn identity_hook_matches_plain_forward() {
        let m = model(DType::F32);
        let x = images(&m, 3, 2);
        let plain = m
            .backbone
            .run_blocks(m.backbone.embed(&x).unwrap(), 4)
            .unwrap();
        let plain = m
            .backbone
            .readout(&plain)
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        let hooked = m.backbone.forward_with_hook(&x, &mut IdentityHook).unwrap();
        assert_eq!(plain, hooked.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn split_forward_equals_full_forward() {
        let m = model(DType::F64);
        let x = images(&m, 2, 3);
        let mid = m
            .backbone
            .run_blocks(m.backbone.embed(&x).unwrap(), 2)
            .unwrap();
        let out = m.backbone.run_blocks(mid, 4).unwrap();
        let a = m.backbone.readout(&out).unwrap().to_vec2::<f64>().unwrap();
        let b = m
            .backbone
            .forward_with_hook(&x, &mut IdentityHook)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let m = model(DType::F32);
        let x = Tensor::zeros((1, 3, 12, 12), DType::F32, &Device::Cpu).unwrap();
        assert!(m.backbone.embed(&x).is_err());
    }

    #[test]
    fn classifier_outputs_distributions() {
        let m = model(DType::F32);
        let x = images(&m, 4, 4);
        let f = m.backbone.forward_with_hook(&x, &mut IdentityHook).unwrap();
        let g = m.enhance.forward(&f).unwrap();
        assert_eq!(g.dims(), &[4, 6]);
        let a = m
            .classifier
            .forward(&g, None)
            .unwrap()
            .probs
            .to_vec2::<f32>()
            .unwrap();
        let b = m
            .classifier
            .forward(&g, None)
            .unwrap()
            .probs
            .to_vec2::<f32>()
            .unwrap();
        assert_eq!(a, b, "eval mode is deterministic");
        for row in &a {
            assert_eq!(row.len(), 15);
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|p| *p > 0.0 && *p < 1.0));
        }
        let mut drop = ChaCha8Rng::seed_from_u64(5);
        let c = m
            .classifier
            .forward(&g, Some(&mut drop))
            .unwrap()
            .probs
            .to_vec2::<f32>()
            .unwrap();
        assert_ne!(a, c, "training mode is stochastic");
    }

    #[test]
    fn enhance_is_a_per_row_map() {
        let m = model(DType::F64);
        let f = Tensor::from_vec(
            (0..24).map(|v| v as f64 * 0.1).collect::<Vec<_>>(),
            (3, 8),
            &Device::Cpu,
        )
        .unwrap();
        let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let a = m
            .enhance
            .forward(&f)
            .unwrap()
            .index_select(&perm, 0)
            .unwrap();
        let b = m
            .enhance
            .forward(&f.index_select(&perm, 0).unwrap())
            .unwrap();
        assert_eq!(a.to_vec2::<f64>().unwrap(), b.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let mut cfg = tiny();
        cfg.enhance_init_std = 0.0;
        let m = UdaModel::new(cfg, DType::F64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let z = Tensor::zeros((2, 8), DType::F64, &Device::Cpu).unwrap();
        let out = m.enhance.forward(&z).unwrap().to_vec2::<f64>().unwrap();
        assert!(out.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn discriminator_forward_ignores_reversal_scale() {
        let m = model(DType::F32);
        let f = m
            .backbone
            .forward_with_hook(&images(&m, 2, 6), &mut IdentityHook)
            .unwrap();
        let plain = m
            .discriminator
            .forward(&f, None)
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        for rho in [0.0, 1.0, 3.5] {
            let q = m.discriminator.forward(&f, Some(rho)).unwrap();
            assert_eq!(q.dims(), &[2, 2]);
            assert_eq!(q.to_vec2::<f32>().unwrap(), plain);
        }
    }

    #[test]
    fn zero_reversal_blocks_domain_gradient() {
        let m = model(DType::F64);
        let f = m
            .backbone
            .forward_with_hook(&images(&m, 2, 7), &mut IdentityHook)
            .unwrap();
        let loss = m
            .discriminator
            .forward(&f, Some(0.0))
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in m.params.group("F.") {
            if let Some(g) = grads.get(var) {
                let max = g
                    .abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap();
                assert_eq!(max, 0.0, "{name}");
            }
        }
        let d_grad = grads.get(m.params.get("D.fc3.weight").unwrap()).unwrap();
        assert!(
            d_grad
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
                > 0.0
        );
    }
}
