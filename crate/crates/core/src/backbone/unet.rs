//! The miniature text-conditioned denoising UNet.
//!
//! Encoder: three levels (16/8/4 for the toy latent) of residual block,
//! self-attention and cross-attention, 2x2 mean pooling between levels, then a
//! residual mid block. Decoder: six attention-bearing layers, two per level,
//! numbered 1..=6 from the bottleneck toward the output:
//!
//! | layer | resolution | channels | skip input |
//! |-------|-----------|----------|------------|
//! | 1, 2  | 4x4       | c2       | layer 1    |
//! | 3, 4  | 8x8       | c1       | layer 3    |
//! | 5, 6  | 16x16     | c0       | layer 5    |
//!
//! Nearest-neighbour upsampling follows layers 2 and 4. The "feature" of a
//! decoder layer is its residual-block output.

use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{Binder, ParamId, ParamStore};
use super::prompt::{validate_tokens, PromptEmbedding, TokenId, MAX_TOKENS, VOCAB};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{LatentShape, LatentTensor, Real};

pub const DECODER_LAYERS: usize = 6;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent: LatentShape,
    pub channels: [usize; 3],
    pub heads: usize,
    pub head_dim: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl ModelConfig {
    /// The 16x16x12 latent model used for everything user-facing.
    pub fn toy() -> Self {
        Self {
            latent: super::codec::LATENT_SHAPE,
            channels: [32, 64, 64],
            heads: 4,
            head_dim: 16,
            time_dim: 64,
            text_dim: 64,
            vocab_size: VOCAB.len(),
            max_tokens: MAX_TOKENS,
        }
    }

    /// 4x4x12 latent, 8 channels: small enough for finite-difference checks.
    pub fn miniature() -> Self {
        Self {
            latent: LatentShape::new(4, 4, 12),
            channels: [8, 8, 8],
            heads: 2,
            head_dim: 4,
            time_dim: 8,
            text_dim: 8,
            vocab_size: VOCAB.len(),
            max_tokens: MAX_TOKENS,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.latent;
        if !l.height.is_multiple_of(4) || !l.width.is_multiple_of(4) || l.height == 0 || l.width == 0 {
            return Err(Error::ConfigMismatch(format!(
                "latent {}x{} must be a positive multiple of 4",
                l.height, l.width
            )));
        }
        if self.channels.contains(&0)
            || self.heads == 0
            || self.head_dim == 0
            || !self.time_dim.is_multiple_of(2)
            || self.time_dim == 0
            || self.text_dim == 0
        {
            return Err(Error::ConfigMismatch("model dimensions must be positive (time_dim even)".into()));
        }
        if self.vocab_size != VOCAB.len() || self.max_tokens != MAX_TOKENS {
            return Err(Error::ConfigMismatch("vocabulary does not match this build".into()));
        }
        Ok(())
    }

    /// Resolution `(h, w)` of decoder layer `layer` (1-based).
    pub fn decoder_resolution(&self, layer: usize) -> Result<(usize, usize)> {
        check_layer(layer)?;
        let level = decoder_level(layer);
        Ok((self.latent.height >> level, self.latent.width >> level))
    }

    pub fn decoder_channels(&self, layer: usize) -> Result<usize> {
        check_layer(layer)?;
        Ok(self.channels[decoder_level(layer)])
    }
}

pub fn check_layer(layer: usize) -> Result<()> {
    if (1..=DECODER_LAYERS).contains(&layer) {
        Ok(())
    } else {
        Err(Error::LayerIndex {
            index: layer,
            max: DECODER_LAYERS,
        })
    }
}

fn decoder_level(layer: usize) -> usize {
    2 - (layer - 1) / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    #[serde(rename = "self")]
    SelfAttn,
    #[serde(rename = "cross")]
    CrossAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    Out,
}

impl Projection {
    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "to_q",
            Projection::K => "to_k",
            Projection::V => "to_v",
            Projection::Out => "to_out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Encoder(usize),
    Decoder(usize),
}

/// One attention block of the network, e.g. `dec3.self`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId {
    pub stage: Stage,
    pub kind: AttnKind,
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            AttnKind::SelfAttn => "self",
            AttnKind::CrossAttn => "cross",
        };
        match self.stage {
            Stage::Encoder(i) => write!(f, "enc{i}.{kind}"),
            Stage::Decoder(i) => write!(f, "dec{i}.{kind}"),
        }
    }
}

impl BlockId {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::ConfigMismatch(format!("bad block id `{s}`"));
        let (stage, kind) = s.split_once('.').ok_or_else(bad)?;
        let kind = match kind {
            "self" => AttnKind::SelfAttn,
            "cross" => AttnKind::CrossAttn,
            _ => return Err(bad()),
        };
        let stage = if let Some(i) = stage.strip_prefix("enc") {
            Stage::Encoder(i.parse().map_err(|_| bad())?)
        } else if let Some(i) = stage.strip_prefix("dec") {
            Stage::Decoder(i.parse().map_err(|_| bad())?)
        } else {
            return Err(bad());
        };
        Ok(Self { stage, kind })
    }

    /// Every attention block, in parameter order.
    pub fn all() -> Vec<BlockId> {
        let mut out = Vec::new();
        for stage in (0..3).map(Stage::Encoder).chain((1..=DECODER_LAYERS).map(Stage::Decoder)) {
            for kind in [AttnKind::SelfAttn, AttnKind::CrossAttn] {
                out.push(BlockId { stage, kind });
            }
        }
        out
    }
}

/// Attention site visible to hooks: a decoder layer and the block kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttnSite {
    pub layer: usize,
    pub kind: AttnKind,
}

/// Observation/override points of a forward pass. Only decoder layers call
/// hooks. Returning `Some` replaces the value for the rest of the pass.
pub trait ForwardHooks<F: Real> {
    fn feature(&mut self, _layer: usize, _value: &Array2<F>) -> Result<Option<Array2<F>>> {
        Ok(None)
    }

    /// `probs` holds one row-stochastic map per head.
    fn attention(
        &mut self,
        _site: AttnSite,
        _q: &Array2<F>,
        _k: &Array2<F>,
        _probs: &[&Array2<F>],
    ) -> Result<Option<Vec<Array2<F>>>> {
        Ok(None)
    }
}

pub struct NoHooks;

impl<F: Real> ForwardHooks<F> for NoHooks {}

/// Low-rank residuals bound on a tape: `(A, B)` per adapted projection.
pub struct LoraVars<F> {
    pub multiplier: F,
    pub entries: HashMap<(BlockId, Projection), (Var, Var)>,
}

#[derive(Debug, Clone)]
struct ResIds {
    norm1: (ParamId, ParamId),
    conv1: (ParamId, ParamId),
    time: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    skip: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
struct AttnIds {
    block: BlockId,
    norm: (ParamId, ParamId),
    q: ParamId,
    k: ParamId,
    v: ParamId,
    out: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct LayerIds {
    res: ResIds,
    self_attn: AttnIds,
    cross_attn: AttnIds,
}

#[derive(Debug, Clone)]
struct Layout {
    token_embedding: ParamId,
    position_embedding: ParamId,
    time1: (ParamId, ParamId),
    time2: (ParamId, ParamId),
    conv_in: (ParamId, ParamId),
    encoder: Vec<LayerIds>,
    mid: ResIds,
    decoder: Vec<LayerIds>,
    out_norm: (ParamId, ParamId),
    conv_out: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct UNetModel<F: Real = f32> {
    config: ModelConfig,
    seed: u64,
    params: ParamStore<F>,
    layout: Layout,
}

struct Builder<'a, F: Real> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut rng::StageRng,
}

impl<F: Real> Builder<'_, F> {
    fn linear(&mut self, name: &str, out: usize, inp: usize) -> (ParamId, ParamId) {
        let w = self.store.gaussian(self.rng, &format!("{name}.weight"), out, inp);
        let b = self.store.filled(&format!("{name}.bias"), 1, out, 0.0);
        (w, b)
    }

    fn weight(&mut self, name: &str, out: usize, inp: usize) -> ParamId {
        self.store.gaussian(self.rng, &format!("{name}.weight"), out, inp)
    }

    fn norm(&mut self, name: &str, dim: usize) -> (ParamId, ParamId) {
        let g = self.store.filled(&format!("{name}.gain"), 1, dim, 1.0);
        let b = self.store.filled(&format!("{name}.bias"), 1, dim, 0.0);
        (g, b)
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, time_dim: usize) -> ResIds {
        ResIds {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.linear(&format!("{name}.conv1"), cout, 9 * cin),
            time: self.linear(&format!("{name}.time_proj"), cout, time_dim),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.linear(&format!("{name}.conv2"), cout, 9 * cout),
            skip: (cin != cout).then(|| self.linear(&format!("{name}.skip"), cout, cin)),
        }
    }

    fn attn(&mut self, block: BlockId, dim: usize, ctx_dim: usize, inner: usize) -> AttnIds {
        let name = block.to_string();
        AttnIds {
            block,
            norm: self.norm(&format!("{name}.norm"), dim),
            q: self.weight(&format!("{name}.to_q"), inner, dim),
            k: self.weight(&format!("{name}.to_k"), inner, ctx_dim),
            v: self.weight(&format!("{name}.to_v"), inner, ctx_dim),
            out: self.linear(&format!("{name}.to_out"), dim, inner),
        }
    }

    fn layer(&mut self, stage: Stage, cin: usize, cout: usize, cfg: &ModelConfig) -> LayerIds {
        let prefix = match stage {
            Stage::Encoder(i) => format!("enc{i}"),
            Stage::Decoder(i) => format!("dec{i}"),
        };
        let inner = cfg.inner_dim();
        LayerIds {
            res: self.res(&format!("{prefix}.res"), cin, cout, cfg.time_dim),
            self_attn: self.attn(
                BlockId {
                    stage,
                    kind: AttnKind::SelfAttn,
                },
                cout,
                cout,
                inner,
            ),
            cross_attn: self.attn(
                BlockId {
                    stage,
                    kind: AttnKind::CrossAttn,
                },
                cout,
                cfg.text_dim,
                inner,
            ),
        }
    }
}

impl<F: Real> UNetModel<F> {
    /// Fresh weights: fan-in scaled Gaussians, zero biases, unit norm gains.
    /// Embedding tables use unit variance.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "backbone/init");
        let cfg = &config;
        let [c0, c1, c2] = cfg.channels;
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let token_embedding =
            b.store
                .gaussian_std(b.rng, "prompt.token_embedding", cfg.vocab_size, cfg.text_dim, 1.0);
        let position_embedding =
            b.store
                .gaussian_std(b.rng, "prompt.position_embedding", cfg.max_tokens, cfg.text_dim, 1.0);
        let time1 = b.linear("time.mlp1", cfg.time_dim, cfg.time_dim);
        let time2 = b.linear("time.mlp2", cfg.time_dim, cfg.time_dim);
        let conv_in = b.linear("conv_in", c0, 9 * cfg.latent.channels);
        let encoder = vec![
            b.layer(Stage::Encoder(0), c0, c0, cfg),
            b.layer(Stage::Encoder(1), c0, c1, cfg),
            b.layer(Stage::Encoder(2), c1, c2, cfg),
        ];
        let mid = b.res("mid.res", c2, c2, cfg.time_dim);
        let mut decoder = Vec::with_capacity(DECODER_LAYERS);
        let mut prev = c2;
        for layer in 1..=DECODER_LAYERS {
            let level = decoder_level(layer);
            let cout = cfg.channels[level];
            let cin = if layer % 2 == 1 { prev + cout } else { cout };
            decoder.push(b.layer(Stage::Decoder(layer), cin, cout, cfg));
            prev = cout;
        }
        let out_norm = b.norm("out.norm", c0);
        let conv_out = b.linear("conv_out", cfg.latent.channels, 9 * c0);
        let layout = Layout {
            token_embedding,
            position_embedding,
            time1,
            time2,
            conv_in,
            encoder,
            mid,
            decoder,
            out_norm,
            conv_out,
        };
        Ok(Self {
            config,
            seed,
            params: store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn cast<G: Real>(&self) -> UNetModel<G> {
        UNetModel {
            config: self.config.clone(),
            seed: self.seed,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Input and output widths of an attention projection.
    pub fn projection_dims(&self, block: BlockId, proj: Projection) -> Result<(usize, usize)> {
        let w = self.projection_weight(block, proj)?;
        Ok((w.ncols(), w.nrows()))
    }

    pub fn projection_weight(&self, block: BlockId, proj: Projection) -> Result<&Array2<F>> {
        Ok(self.params.get(self.projection_param(block, proj)?))
    }

    pub fn projection_param(&self, block: BlockId, proj: Projection) -> Result<ParamId> {
        let ids = self.attn_ids(block)?;
        Ok(match proj {
            Projection::Q => ids.q,
            Projection::K => ids.k,
            Projection::V => ids.v,
            Projection::Out => ids.out.0,
        })
    }

    fn attn_ids(&self, block: BlockId) -> Result<&AttnIds> {
        let layer = match block.stage {
            Stage::Encoder(i) => self.layout.encoder.get(i),
            Stage::Decoder(i) => i.checked_sub(1).and_then(|i| self.layout.decoder.get(i)),
        }
        .ok_or_else(|| Error::ConfigMismatch(format!("no attention block {block}")))?;
        Ok(match block.kind {
            AttnKind::SelfAttn => &layer.self_attn,
            AttnKind::CrossAttn => &layer.cross_attn,
        })
    }

    pub fn new_binder(&self, trainable: bool) -> Binder {
        Binder::new(self.params.len(), trainable)
    }

    /// Prompt rows `token_embedding[token] + position_embedding[i]`.
    pub fn embed_tape(&self, tape: &mut Tape<F>, bind: &mut Binder, tokens: &[TokenId]) -> Result<Var> {
        validate_tokens(tokens)?;
        let table = bind.get(tape, &self.params, self.layout.token_embedding);
        let pos = bind.get(tape, &self.params, self.layout.position_embedding);
        let rows: Vec<usize> = tokens.iter().map(|t| t.index()).collect();
        let tok = tape.gather_rows(table, &rows);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(pos, &positions);
        Ok(tape.add(tok, pos))
    }

    fn time_embedding(&self, tape: &mut Tape<F>, bind: &mut Binder, t: usize) -> Var {
        let dim = self.config.time_dim;
        let half = dim / 2;
        let mut row = Array2::<F>::zeros((1, dim));
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[[0, i]] = F::from_f64c(arg.cos());
            row[[0, half + i]] = F::from_f64c(arg.sin());
        }
        let x = tape.constant(row);
        let h = self.linear(tape, bind, x, self.layout.time1);
        let h = tape.silu(h);
        self.linear(tape, bind, h, self.layout.time2)
    }

    fn linear(&self, tape: &mut Tape<F>, bind: &mut Binder, x: Var, (w, b): (ParamId, ParamId)) -> Var {
        let w = bind.get(tape, &self.params, w);
        let b = bind.get(tape, &self.params, b);
        let y = tape.matmul_bt(x, w);
        tape.add_row(y, b)
    }

    fn conv3(
        &self,
        tape: &mut Tape<F>,
        bind: &mut Binder,
        x: Var,
        hw: (usize, usize),
        wb: (ParamId, ParamId),
    ) -> Var {
        let cols = tape.im2col3(x, hw.0, hw.1);
        self.linear(tape, bind, cols, wb)
    }

    fn norm(&self, tape: &mut Tape<F>, bind: &mut Binder, x: Var, (g, b): (ParamId, ParamId)) -> Var {
        let n = tape.normalize(x, F::from_f64c(NORM_EPS));
        let g = bind.get(tape, &self.params, g);
        let b = bind.get(tape, &self.params, b);
        let n = tape.mul_row(n, g);
        tape.add_row(n, b)
    }

    fn res(
        &self,
        tape: &mut Tape<F>,
        bind: &mut Binder,
        x: Var,
        hw: (usize, usize),
        temb: Var,
        ids: &ResIds,
    ) -> Var {
        let h = self.norm(tape, bind, x, ids.norm1);
        let h = tape.silu(h);
        let h = self.conv3(tape, bind, h, hw, ids.conv1);
        let t = tape.silu(temb);
        let t = self.linear(tape, bind, t, ids.time);
        let h = tape.add_row(h, t);
        let h = self.norm(tape, bind, h, ids.norm2);
        let h = tape.silu(h);
        let h = self.conv3(tape, bind, h, hw, ids.conv2);
        let skip = match ids.skip {
            Some(wb) => self.linear(tape, bind, x, wb),
            None => x,
        };
        tape.add(h, skip)
    }

    #[allow(clippy::too_many_arguments)]
    fn project(
        &self,
        tape: &mut Tape<F>,
        bind: &mut Binder,
        x: Var,
        w: ParamId,
        block: BlockId,
        proj: Projection,
        lora: Option<&LoraVars<F>>,
    ) -> Var {
        let wv = bind.get(tape, &self.params, w);
        let y = tape.matmul_bt(x, wv);
        match lora.and_then(|l| l.entries.get(&(block, proj)).map(|e| (l.multiplier, *e))) {
            Some((mult, (a, b))) => {
                let xa = tape.matmul_bt(x, a);
                let xab = tape.matmul_bt(xa, b);
                let delta = tape.scale(xab, mult);
                tape.add(y, delta)
            }
            None => y,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<F>,
        bind: &mut Binder,
        x: Var,
        ids: &AttnIds,
        context: Option<Var>,
        lora: Option<&LoraVars<F>>,
        hooks: &mut dyn ForwardHooks<F>,
        site: Option<AttnSite>,
    ) -> Result<Var> {
        let n = self.norm(tape, bind, x, ids.norm);
        let src = context.unwrap_or(n);
        let q = self.project(tape, bind, n, ids.q, ids.block, Projection::Q, lora);
        let k = self.project(tape, bind, src, ids.k, ids.block, Projection::K, lora);
        let v = self.project(tape, bind, src, ids.v, ids.block, Projection::V, lora);
        let d = self.config.head_dim;
        let scale = F::from_f64c(1.0 / (d as f64).sqrt());
        let mut probs = Vec::with_capacity(self.config.heads);
        let mut values = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * d, d);
            let kh = tape.slice_cols(k, h * d, d);
            values.push(tape.slice_cols(v, h * d, d));
            let s = tape.matmul_bt(qh, kh);
            let s = tape.scale(s, scale);
            probs.push(tape.softmax(s));
        }
        if let Some(site) = site {
            let replacement = {
                let maps: Vec<&Array2<F>> = probs.iter().map(|p| tape.value(*p)).collect();
                hooks.attention(site, tape.value(q), tape.value(k), &maps)?
            };
            if let Some(maps) = replacement {
                if maps.len() != probs.len() {
                    return Err(Error::shape(probs.len(), maps.len()));
                }
                for (slot, map) in probs.iter_mut().zip(maps) {
                    if map.dim() != tape.value(*slot).dim() {
                        return Err(Error::shape(tape.value(*slot).dim(), map.dim()));
                    }
                    *slot = tape.constant(map);
                }
            }
        }
        let heads: Vec<Var> = probs
            .iter()
            .zip(&values)
            .map(|(p, v)| tape.matmul(*p, *v))
            .collect();
        let o = tape.concat_many(&heads);
        let o = self.linear(tape, bind, o, ids.out);
        Ok(tape.add(x, o))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        tape: &mut Tape<F>,
        bind: &mut Binder,
        x: Var,
        hw: (usize, usize),
        temb: Var,
        text: Var,
        ids: &LayerIds,
        decoder_layer: Option<usize>,
        lora: Option<&LoraVars<F>>,
        hooks: &mut dyn ForwardHooks<F>,
    ) -> Result<Var> {
        let mut h = self.res(tape, bind, x, hw, temb, &ids.res);
        if let Some(layer) = decoder_layer {
            if let Some(rep) = hooks.feature(layer, tape.value(h))? {
                if rep.dim() != tape.value(h).dim() {
                    return Err(Error::shape(tape.value(h).dim(), rep.dim()));
                }
                h = tape.constant(rep);
            }
        }
        let site = |kind| decoder_layer.map(|layer| AttnSite { layer, kind });
        let h = self.attention(
            tape,
            bind,
            h,
            &ids.self_attn,
            None,
            lora,
            hooks,
            site(AttnKind::SelfAttn),
        )?;
        self.attention(
            tape,
            bind,
            h,
            &ids.cross_attn,
            Some(text),
            lora,
            hooks,
            site(AttnKind::CrossAttn),
        )
    }

    /// Noise prediction on a tape. `z` is a `(h*w) x channels` token matrix and
    /// `text` a `tokens x text_dim` matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tape(
        &self,
        tape: &mut Tape<F>,
        bind: &mut Binder,
        z: Var,
        t: usize,
        text: Var,
        lora: Option<&LoraVars<F>>,
        hooks: &mut dyn ForwardHooks<F>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (h0, w0) = (cfg.latent.height, cfg.latent.width);
        let expected = (h0 * w0, cfg.latent.channels);
        if tape.value(z).dim() != expected {
            return Err(Error::shape(expected, tape.value(z).dim()));
        }
        if tape.value(text).ncols() != cfg.text_dim {
            return Err(Error::shape(cfg.text_dim, tape.value(text).ncols()));
        }
        let temb = self.time_embedding(tape, bind, t);
        let mut x = self.conv3(tape, bind, z, (h0, w0), self.layout.conv_in);
        let mut skips = Vec::with_capacity(3);
        for (level, ids) in self.layout.encoder.iter().enumerate() {
            let hw = (h0 >> level, w0 >> level);
            x = self.layer(tape, bind, x, hw, temb, text, ids, None, lora, hooks)?;
            skips.push(x);
            if level < 2 {
                x = tape.avg_pool2(x, hw.0, hw.1);
            }
        }
        x = self.res(tape, bind, x, (h0 >> 2, w0 >> 2), temb, &self.layout.mid);
        for (i, ids) in self.layout.decoder.iter().enumerate() {
            let layer = i + 1;
            let level = decoder_level(layer);
            let hw = (h0 >> level, w0 >> level);
            if layer % 2 == 1 {
                x = tape.concat_cols(x, skips[level]);
            }
            x = self.layer(tape, bind, x, hw, temb, text, ids, Some(layer), lora, hooks)?;
            if layer % 2 == 0 && level > 0 {
                x = tape.upsample2(x, hw.0, hw.1);
            }
        }
        let x = self.norm(tape, bind, x, self.layout.out_norm);
        let x = tape.silu(x);
        Ok(self.conv3(tape, bind, x, (h0, w0), self.layout.conv_out))
    }
}

impl UNetModel<f32> {
    pub fn embed_prompt(&self, tokens: &[TokenId]) -> Result<PromptEmbedding> {
        let mut tape = Tape::new();
        let mut bind = self.new_binder(false);
        let v = self.embed_tape(&mut tape, &mut bind, tokens)?;
        Ok(PromptEmbedding {
            tokens: tokens.to_vec(),
            vectors: tape.value(v).clone(),
        })
    }

    pub fn null_prompt(&self) -> PromptEmbedding {
        self.embed_prompt(&[super::prompt::NULL_TOKEN])
            .expect("NULL prompt is always valid")
    }

    /// Predicted noise for `z_t`, optionally with bound low-rank residuals.
    pub fn predict(
        &self,
        z_t: &LatentTensor,
        t: usize,
        c: &PromptEmbedding,
        lora: Option<&dyn Fn(&mut Tape<f32>) -> LoraVars<f32>>,
        hooks: &mut dyn ForwardHooks<f32>,
    ) -> Result<LatentTensor> {
        if z_t.shape() != self.config.latent {
            return Err(Error::shape(self.config.latent, z_t.shape()));
        }
        let mut tape = Tape::new();
        let mut bind = self.new_binder(false);
        let z = tape.constant(z_t.tokens().to_owned());
        let text = tape.constant(c.vectors.clone());
        let vars = lora.map(|f| f(&mut tape));
        let out = self.forward_tape(&mut tape, &mut bind, z, t, text, vars.as_ref(), hooks)?;
        LatentTensor::from_tokens(self.config.latent, tape.value(out))
    }

    /// `unet_forward`: base-model noise prediction.
    pub fn forward(
        &self,
        z_t: &LatentTensor,
        t: usize,
        c: &PromptEmbedding,
        hooks: &mut dyn ForwardHooks<f32>,
    ) -> Result<LatentTensor> {
        self.predict(z_t, t, c, None, hooks)
    }
}
