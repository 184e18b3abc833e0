//! The enhancement network: frame-wise input projection, a stack of backbone
//! blocks and a sigmoid mask head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{ConformerBlock, TransformerBlock};
use crate::autograd::Var;
use crate::config::KvMap;
use crate::dsp::{apply_mask, istft, stft, Mask, Spectrogram, Waveform, NUM_BINS};
use crate::error::{dim_err, Error, Result};
use crate::params::{LayerNorm, ParamBuilder, ParamId, ParamStore, Params};
use crate::posenc::{sinpe, PeKind};
use crate::ssm::{BiMambaBlock, MambaBlock, MambaDims};
use crate::tensor::{archive, Real, Tensor};
use crate::xlstm::{BiMode, BixlstmBlock, MlstmBlock, MlstmDims};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backbone {
    Transformer,
    Conformer,
    Mamba,
    BiMamba,
    Xlstm,
    CBixlstm,
    PBixlstm,
}

impl Backbone {
    pub const ALL: [Backbone; 7] = [
        Backbone::Transformer,
        Backbone::Conformer,
        Backbone::Mamba,
        Backbone::BiMamba,
        Backbone::Xlstm,
        Backbone::CBixlstm,
        Backbone::PBixlstm,
    ];

    /// Config-file spelling.
    pub fn key(self) -> &'static str {
        match self {
            Backbone::Transformer => "transformer",
            Backbone::Conformer => "conformer",
            Backbone::Mamba => "mamba",
            Backbone::BiMamba => "bimamba",
            Backbone::Xlstm => "xlstm",
            Backbone::CBixlstm => "c-bixlstm",
            Backbone::PBixlstm => "p-bixlstm",
        }
    }

    /// Display spelling used in model names.
    pub fn title(self) -> &'static str {
        match self {
            Backbone::Transformer => "Transformer",
            Backbone::Conformer => "Conformer",
            Backbone::Mamba => "Mamba",
            Backbone::BiMamba => "BiMamba",
            Backbone::Xlstm => "xLSTM",
            Backbone::CBixlstm => "C-BixLSTM",
            Backbone::PBixlstm => "P-BixLSTM",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Backbone::Transformer | Backbone::Conformer)
    }

    /// Bidirectional backbones are non-causal by construction.
    pub fn is_bidirectional(self) -> bool {
        matches!(self, Backbone::BiMamba | Backbone::CBixlstm | Backbone::PBixlstm)
    }

    /// Unidirectional recurrent backbones are causal by construction.
    pub fn is_recurrent_causal(self) -> bool {
        matches!(self, Backbone::Mamba | Backbone::Xlstm)
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Backbone::ALL
            .into_iter()
            .find(|b| b.key() == lower)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown backbone `{s}` (transformer|conformer|mamba|bimamba|xlstm|c-bixlstm|p-bixlstm)"
                ))
            })
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub blocks: usize,
    pub causal: bool,
    pub pe: PeKind,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub input_bins: usize,
    pub conv_kernel: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub mlstm_heads: usize,
    pub proj_factor: usize,
    pub qkv_block: usize,
}

impl ModelConfig {
    /// Defaults for a backbone and block count; causality follows the
    /// backbone (attention backbones default to causal).
    pub fn new(backbone: Backbone, blocks: usize) -> Self {
        Self {
            backbone,
            blocks,
            causal: !backbone.is_bidirectional(),
            pe: PeKind::None,
            d_model: 256,
            d_ff: 1024,
            heads: 8,
            input_bins: NUM_BINS,
            conv_kernel: 31,
            d_state: 16,
            expand: 2,
            d_conv: 4,
            mlstm_heads: 4,
            proj_factor: 2,
            qkv_block: 4,
        }
    }

    /// Parses `"<backbone>-<N>"`, e.g. `"C-BixLSTM-4"`.
    pub fn from_name(name: &str) -> Result<Self> {
        let (b, n) = name
            .rsplit_once('-')
            .ok_or_else(|| Error::Config(format!("model name `{name}` is not `<backbone>-<N>`")))?;
        let blocks = n
            .parse()
            .map_err(|_| Error::Config(format!("model name `{name}` has a bad block count")))?;
        let cfg = Self::new(b.parse()?, blocks);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.backbone.title(), self.blocks)
    }

    /// Name plus positional encoding and causality, e.g. `Transformer-4+RoPE (non-causal)`.
    pub fn label(&self) -> String {
        let pe = match self.pe {
            PeKind::None => "",
            PeKind::Sinusoidal => "+SinPE",
            PeKind::Rotary => "+RoPE",
        };
        let c = if self.causal { "causal" } else { "non-causal" };
        format!("{}{pe} ({c})", self.name())
    }

    pub fn mamba_dims(&self) -> MambaDims {
        MambaDims {
            d_model: self.d_model,
            d_state: self.d_state,
            expand: self.expand,
            d_conv: self.d_conv,
        }
    }

    pub fn mlstm_dims(&self) -> MlstmDims {
        MlstmDims {
            d_model: self.d_model,
            proj_factor: self.proj_factor,
            heads: self.mlstm_heads,
            conv_kernel: self.d_conv,
            qkv_block: self.qkv_block,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.blocks == 0 {
            return bad("blocks must be at least 1".into());
        }
        if self.d_model == 0 || self.input_bins == 0 {
            return bad("d_model and input_bins must be positive".into());
        }
        if self.pe != PeKind::None && !self.backbone.is_attention() {
            return bad(format!("pe = {} is only valid for attention backbones", self.pe));
        }
        if self.backbone.is_bidirectional() && self.causal {
            return bad(format!("{} is non-causal by construction; set causal = false", self.backbone));
        }
        if self.backbone.is_recurrent_causal() && !self.causal {
            return bad(format!(
                "{} is causal by construction; use the bidirectional variant for non-causal models",
                self.backbone
            ));
        }
        if self.backbone.is_attention() {
            if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
                return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
            }
            if self.pe == PeKind::Rotary && !(self.d_model / self.heads).is_multiple_of(2) {
                return bad("rotary encoding needs an even head size".into());
            }
            if self.backbone == Backbone::Conformer && self.conv_kernel.is_multiple_of(2) {
                return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
            }
        }
        if matches!(self.backbone, Backbone::Xlstm | Backbone::CBixlstm | Backbone::PBixlstm) {
            let di = self.proj_factor * self.d_model;
            if self.mlstm_heads == 0 || !di.is_multiple_of(self.mlstm_heads) || self.qkv_block == 0 || !di.is_multiple_of(self.qkv_block) {
                return bad(format!(
                    "inner width {di} must be divisible by mlstm_heads {} and qkv_block {}",
                    self.mlstm_heads, self.qkv_block
                ));
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let backbone: Backbone = kv
            .take_opt("backbone")?
            .ok_or_else(|| Error::Config("missing key `backbone`".into()))?;
        let blocks = kv
            .take_opt("blocks")?
            .ok_or_else(|| Error::Config("missing key `blocks`".into()))?;
        let d = Self::new(backbone, blocks);
        let cfg = Self {
            backbone,
            blocks,
            causal: kv.take("causal", d.causal)?,
            pe: kv.take("pe", d.pe)?,
            d_model: kv.take("d_model", d.d_model)?,
            d_ff: kv.take("d_ff", d.d_ff)?,
            heads: kv.take("heads", d.heads)?,
            input_bins: kv.take("input_bins", d.input_bins)?,
            conv_kernel: kv.take("conv_kernel", d.conv_kernel)?,
            d_state: kv.take("d_state", d.d_state)?,
            expand: kv.take("expand", d.expand)?,
            d_conv: kv.take("d_conv", d.d_conv)?,
            mlstm_heads: kv.take("mlstm_heads", d.mlstm_heads)?,
            proj_factor: kv.take("proj_factor", d.proj_factor)?,
            qkv_block: kv.take("qkv_block", d.qkv_block)?,
        };
        if let Some(order) = kv.take_str("bix_order") {
            if order != "forward-backward" {
                return Err(Error::Config(format!("bix_order `{order}` unsupported (forward-backward)")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "backbone = {}\nblocks = {}\ncausal = {}\npe = {}\nd_model = {}\nd_ff = {}\nheads = {}\ninput_bins = {}\nconv_kernel = {}\nd_state = {}\nexpand = {}\nd_conv = {}\nmlstm_heads = {}\nproj_factor = {}\nqkv_block = {}\n",
            self.backbone,
            self.blocks,
            self.causal,
            self.pe,
            self.d_model,
            self.d_ff,
            self.heads,
            self.input_bins,
            self.conv_kernel,
            self.d_state,
            self.expand,
            self.d_conv,
            self.mlstm_heads,
            self.proj_factor,
            self.qkv_block
        );
        if self.backbone == Backbone::CBixlstm {
            s.push_str("bix_order = forward-backward\n");
        }
        s
    }
}

#[derive(Clone, Copy, Debug)]
enum Block {
    Transformer(TransformerBlock),
    Conformer(ConformerBlock),
    Mamba(MambaBlock),
    BiMamba(BiMambaBlock),
    Mlstm(MlstmBlock),
    Bixlstm(BixlstmBlock),
}

impl Block {
    fn forward<T: Real>(&self, p: &Params<T>, x: &Var<T>, cfg: &ModelConfig) -> Result<Var<T>> {
        match self {
            Block::Transformer(b) => b.forward(p, x, cfg.causal, cfg.pe),
            Block::Conformer(b) => b.forward(p, x, cfg.causal, cfg.pe),
            Block::Mamba(b) => b.forward(p, x),
            Block::BiMamba(b) => b.forward(p, x),
            Block::Mlstm(b) => b.forward(p, x),
            Block::Bixlstm(b) => b.forward(p, x),
        }
    }
}

/// A built network together with its parameters.
#[derive(Clone, Debug)]
pub struct EnhancementModel<T: Real = f32> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    in_norm: LayerNorm,
    in_proj: ParamId,
    in_bias: ParamId,
    out_proj: ParamId,
    out_bias: ParamId,
    blocks: Vec<Block>,
}

/// Builds the default-precision model.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<EnhancementModel<f32>> {
    EnhancementModel::build(cfg, seed)
}

impl<T: Real> EnhancementModel<T> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (k, d) = (cfg.input_bins, cfg.d_model);
        let mut b = ParamBuilder::<T>::new(seed);
        let in_norm = LayerNorm::new(&mut b, "input.norm", k, true);
        let in_proj = b.fan_in("input.conv.weight", &[1, k, d], k);
        let in_bias = b.zeros("input.conv.bias", &[d]);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let blk = b.scoped(format!("blocks.{i}"), |b| -> Result<Block> {
                Ok(match cfg.backbone {
                    Backbone::Transformer => Block::Transformer(TransformerBlock::new(b, d, cfg.d_ff, cfg.heads)?),
                    Backbone::Conformer => {
                        Block::Conformer(ConformerBlock::new(b, d, cfg.d_ff, cfg.heads, cfg.conv_kernel)?)
                    }
                    Backbone::Mamba => Block::Mamba(MambaBlock::new(b, cfg.mamba_dims())?),
                    Backbone::BiMamba => Block::BiMamba(BiMambaBlock::new(b, cfg.mamba_dims())?),
                    Backbone::Xlstm => Block::Mlstm(MlstmBlock::new(b, cfg.mlstm_dims())?),
                    Backbone::CBixlstm => Block::Bixlstm(BixlstmBlock::new(b, cfg.mlstm_dims(), BiMode::Cascaded)?),
                    Backbone::PBixlstm => Block::Bixlstm(BixlstmBlock::new(b, cfg.mlstm_dims(), BiMode::Parallel)?),
                })
            })?;
            blocks.push(blk);
        }
        let out_proj = b.fan_in("output.conv.weight", &[1, d, k], d);
        let out_bias = b.zeros("output.conv.bias", &[k]);
        Ok(Self {
            cfg: cfg.clone(),
            store: b.finish(),
            in_norm,
            in_proj,
            in_bias,
            out_proj,
            out_bias,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    pub fn output_bias(&self) -> ParamId {
        self.out_bias
    }

    pub fn output_weight(&self) -> ParamId {
        self.out_proj
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> EnhancementModel<U> {
        EnhancementModel {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            in_norm: self.in_norm,
            in_proj: self.in_proj,
            in_bias: self.in_bias,
            out_proj: self.out_proj,
            out_bias: self.out_bias,
            blocks: self.blocks.clone(),
        }
    }

    /// Mask for a magnitude spectrogram `[L, K]`, differentiable through `p`.
    pub fn forward_var(&self, p: &Params<T>, mag: &Var<T>) -> Result<Var<T>> {
        let v = mag.value();
        if v.rank() != 2 || v.cols() != self.cfg.input_bins {
            return Err(dim_err!(
                "model expects [frames, {}] magnitudes, got {:?}",
                self.cfg.input_bins,
                v.shape()
            ));
        }
        if v.rows() == 0 {
            return Err(dim_err!("model input has no frames"));
        }
        let mut h = self
            .in_norm
            .forward(p, mag)?
            .relu()
            .conv1d(p.get(self.in_proj), Some(p.get(self.in_bias)), self.cfg.causal)?;
        if self.cfg.pe == PeKind::Sinusoidal {
            h = h.add(&Var::constant(sinpe(v.rows(), self.cfg.d_model)))?;
        }
        for blk in &self.blocks {
            h = blk.forward(p, &h, &self.cfg)?;
        }
        Ok(h
            .conv1d(p.get(self.out_proj), Some(p.get(self.out_bias)), self.cfg.causal)?
            .sigmoid())
    }

    /// Inference forward pass.
    pub fn forward(&self, mag: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.store.bind(false);
        Ok(self.forward_var(&p, &Var::constant(mag.clone()))?.value().clone())
    }

    pub fn predict_mask(&self, noisy: &Spectrogram) -> Result<Mask> {
        let mag = Tensor::new(
            vec![noisy.frames(), noisy.bins()],
            noisy.magnitude().into_iter().map(T::from_f64).collect(),
        )?;
        let m = self.forward(&mag)?;
        Mask::new(noisy.frames(), noisy.bins(), m.data().iter().map(|&v| Real::to_f64(v)).collect())
    }

    /// STFT, mask estimation, masking with the noisy phase and inverse STFT.
    pub fn enhance(&self, noisy: &Waveform) -> Result<Waveform> {
        noisy.require_pipeline_rate()?;
        let spec = stft(noisy)?;
        let mask = self.predict_mask(&spec)?;
        istft(&apply_mask(&spec, &mask)?, noisy.len())
    }

    /// Writes `model.cfg` and `model.tensors` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, seed: u64) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MODEL_CFG), format!("seed = {seed}\n{}", self.cfg.to_text()))?;
        let entries: Vec<(&str, &Tensor<T>)> = self
            .store
            .names()
            .iter()
            .map(String::as_str)
            .zip(self.store.values())
            .collect();
        archive::save(dir.join(MODEL_TENSORS), &entries)
    }

    /// Loads a directory written by [`EnhancementModel::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, u64)> {
        let dir = dir.as_ref();
        let cfg_path = dir.join(MODEL_CFG);
        let text = std::fs::read_to_string(&cfg_path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", cfg_path.display())))?;
        let mut kv = KvMap::parse(&text)?;
        let seed = kv.take("seed", 0u64)?;
        let cfg = ModelConfig::from_kv(&mut kv)?;
        kv.finish()?;
        let mut model = Self::build(&cfg, seed)?;
        let mut stored = ParamStore::default();
        for (name, t) in archive::load::<T>(dir.join(MODEL_TENSORS))? {
            stored.push(name, t);
        }
        model.store.load_from(&stored)?;
        Ok((model, seed))
    }
}

pub const MODEL_CFG: &str = "model.cfg";
pub const MODEL_TENSORS: &str = "model.tensors";

/// Parameter count of a configuration.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(EnhancementModel::<f32>::build(cfg, 0)?.count_params())
}
