//! UNet denoiser with a configurable transformer-block distribution.
//!
//! The network `F` is wrapped in the usual preconditioning so that the
//! public output is always an `x_0` estimate:
//! `D(x; sigma) = c_skip x + c_out F(c_in x; c_noise)` with `sigma_data`
//! from the config. `c_noise` is Fourier-embedded and combined with the
//! micro-conditioning and pooled text embedding before the time MLP.

use microdiff_nn::layers::{norm_groups, Conv2d, GroupNorm, LayerNorm, Linear};
use microdiff_nn::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed_microcond_masked, fourier_features, inject_conditioning_graph, CondMask, MicroCond};
use crate::schedule::NoiseSchedule;
use crate::textenc::TextContext;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    /// Transformer blocks per attention layer at each resolution level.
    pub transformer_blocks: Vec<usize>,
    pub num_res_blocks: usize,
    pub context_dim: usize,
    pub pooled_dim: usize,
    /// Fourier width per micro-conditioning component.
    pub d_f: usize,
    /// Fourier width of the noise-level embedding.
    pub time_fourier_dim: usize,
    pub time_dim: usize,
    pub head_dim: usize,
    pub sigma_data: f64,
    /// Micro-conditioning pairs visible to the model.
    pub cond_mask: CondMask,
}

impl DenoiserConfig {
    /// Three levels, no attention at full resolution, 2 and 10 blocks below.
    pub fn sdxl(base_channels: usize, context_dim: usize, pooled_dim: usize) -> Self {
        Self::toy(base_channels, vec![1, 2, 4], vec![0, 2, 10], context_dim, pooled_dim)
    }

    /// Four levels with one transformer block at each.
    pub fn sd1(base_channels: usize, context_dim: usize, pooled_dim: usize) -> Self {
        Self::toy(base_channels, vec![1, 2, 4, 4], vec![1, 1, 1, 1], context_dim, pooled_dim)
    }

    pub fn toy(
        base_channels: usize,
        channel_mult: Vec<usize>,
        transformer_blocks: Vec<usize>,
        context_dim: usize,
        pooled_dim: usize,
    ) -> Self {
        Self {
            in_channels: 3,
            base_channels,
            channel_mult,
            transformer_blocks,
            num_res_blocks: 1,
            context_dim,
            pooled_dim,
            d_f: 16,
            time_fourier_dim: 32,
            time_dim: 4 * base_channels,
            head_dim: base_channels,
            sigma_data: 0.5,
            cond_mask: CondMask::default(),
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.channel_mult.len() != self.transformer_blocks.len() {
            return fail(format!(
                "channel_mult has {} levels but transformer_blocks has {}",
                self.channel_mult.len(),
                self.transformer_blocks.len()
            ));
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return fail("channel_mult must be non-empty with positive entries".into());
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.num_res_blocks == 0 || self.time_dim == 0 {
            return fail("channel counts and num_res_blocks must be positive".into());
        }
        if self.d_f < 2 || self.d_f % 2 != 0 || self.time_fourier_dim < 2 || self.time_fourier_dim % 2 != 0 {
            return fail("Fourier widths must be even and >= 2".into());
        }
        if self.head_dim == 0 || self.channel_mult.iter().any(|m| (m * self.base_channels) % self.head_dim != 0) {
            return fail(format!("every level width must be divisible by head_dim {}", self.head_dim));
        }
        if self.transformer_blocks.iter().any(|&b| b > 0) && self.context_dim == 0 {
            return fail("attention levels need context_dim > 0".into());
        }
        if !(self.sigma_data > 0.0) {
            return fail("sigma_data must be positive".into());
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

/// Conditioning for a batch of `n` items.
#[derive(Clone, Debug, PartialEq)]
pub struct CondBatch {
    /// `[n, tokens, context_dim]`
    pub context: Tensor,
    /// `[n, pooled_dim]`
    pub pooled: Tensor,
    pub micro: Vec<MicroCond>,
}

impl CondBatch {
    pub fn from_contexts(contexts: &[&TextContext], micro: Vec<MicroCond>) -> Self {
        let context = Tensor::stack(&contexts.iter().map(|c| c.sequence.clone()).collect::<Vec<_>>());
        let pooled = Tensor::stack(
            &contexts
                .iter()
                .map(|c| Tensor::new(vec![c.pooled.len()], c.pooled.clone()))
                .collect::<Vec<_>>(),
        );
        Self { context, pooled, micro }
    }

    /// One context repeated for every item.
    pub fn repeat(context: &TextContext, micro: MicroCond, n: usize) -> Self {
        Self::from_contexts(&vec![context; n], vec![micro; n])
    }

    pub fn len(&self) -> usize {
        self.micro.len()
    }

    pub fn is_empty(&self) -> bool {
        self.micro.is_empty()
    }

    pub fn select(&self, items: &[usize]) -> Self {
        Self {
            context: Tensor::stack(&items.iter().map(|&i| self.context.index0(i)).collect::<Vec<_>>()),
            pooled: Tensor::stack(&items.iter().map(|&i| self.pooled.index0(i)).collect::<Vec<_>>()),
            micro: items.iter().map(|&i| self.micro[i]).collect(),
        }
    }
}

/// Preconditioning coefficients `(c_in, c_skip, c_out, c_noise)`.
pub fn preconditioning(sigma: f64, sigma_data: f64) -> (f64, f64, f64, f64) {
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let c_in = 1.0 / (s2 + d2).sqrt();
    let c_skip = d2 / (s2 + d2);
    let c_out = sigma * sigma_data / (s2 + d2).sqrt();
    let c_noise = 100.0 * sigma.ln();
    (c_in, c_skip, c_out, c_noise)
}

/// `s(x; sigma) = (x_hat0 - x) / sigma^2`.
pub fn score_from_denoiser(x_hat0: &Tensor, x: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if x_hat0.shape() != x.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", x_hat0.shape(), x.shape())));
    }
    let inv = 1.0 / (sigma * sigma);
    Ok(x_hat0.zip_map(x, |d, v| (d - v) * inv))
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, time_dim: usize, rng: &mut R) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, norm_groups(cin, 32)),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1.0, rng),
            emb: Linear::new(store, &format!("{name}.emb"), time_dim, cout, true, 1.0, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, norm_groups(cout, 32)),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 0.5, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 1.0, rng)),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, emb: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let h = self.norm2.forward(g, h);
        let e = self.emb.forward(g, emb);
        let h = g.item_channel_add(h, e);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(g, x),
            None => x,
        };
        g.add(s, h)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, false, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, false, 1.0, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, 1.0, rng),
            heads,
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, kv: Var) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, kv);
        let v = self.v.forward(g, kv);
        let a = g.attention(q, k, v, self.heads);
        self.out.forward(g, a)
    }
}

#[derive(Clone, Debug)]
struct TransformerBlock {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, context_dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            self_attn: Attention::new(store, &format!("{name}.attn1"), dim, dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            cross_attn: Attention::new(store, &format!("{name}.attn2"), dim, context_dim, heads, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, 4 * dim, true, 1.0, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * dim, dim, true, 1.0, rng),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, context: Var) -> Var {
        let n = self.norm1.forward(g, x);
        let a = self.self_attn.forward(g, n, n);
        let x = g.add(x, a);
        let n = self.norm2.forward(g, x);
        let a = self.cross_attn.forward(g, n, context);
        let x = g.add(x, a);
        let n = self.norm3.forward(g, x);
        let f = self.ff1.forward(g, n);
        let f = g.gelu(f);
        let f = self.ff2.forward(g, f);
        g.add(x, f)
    }
}

/// Group norm, token projection, `depth` transformer blocks, projection back
/// and a residual connection.
#[derive(Clone, Debug)]
struct SpatialTransformer {
    norm: GroupNorm,
    proj_in: Linear,
    blocks: Vec<TransformerBlock>,
    proj_out: Linear,
}

impl SpatialTransformer {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        depth: usize,
        context_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), dim, norm_groups(dim, 32)),
            proj_in: Linear::new(store, &format!("{name}.proj_in"), dim, dim, true, 1.0, rng),
            blocks: (0..depth)
                .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), dim, context_dim, heads, rng))
                .collect(),
            proj_out: Linear::new(store, &format!("{name}.proj_out"), dim, dim, true, 0.5, rng),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, context: Var) -> Var {
        let (_, _, h, w) = g.value(x).dims4();
        let n = self.norm.forward(g, x);
        let t = g.to_tokens(n);
        let mut t = self.proj_in.forward(g, t);
        for blk in &self.blocks {
            t = blk.forward(g, t, context);
        }
        let t = self.proj_out.forward(g, t);
        let t = g.from_tokens(t, h, w);
        g.add(x, t)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    res: ResBlock,
    attn: Option<SpatialTransformer>,
}

impl Stage {
    fn forward(&self, g: &mut Graph<'_>, x: Var, emb: Var, context: Var) -> Var {
        let h = self.res.forward(g, x, emb);
        match &self.attn {
            Some(st) => st.forward(g, h, context),
            None => h,
        }
    }
}

#[derive(Clone, Debug)]
struct Net {
    time1: Linear,
    cond_proj: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<(Vec<Stage>, Option<Conv2d>)>,
    mid: (ResBlock, Option<SpatialTransformer>, ResBlock),
    up: Vec<(Vec<Stage>, Option<Conv2d>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Net {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let td = cfg.time_dim;
        let cond_width = 6 * cfg.d_f + cfg.pooled_dim;
        let time1 = Linear::new(store, "time.fc1", cfg.time_fourier_dim, td, true, 1.0, rng);
        let cond_proj = Linear::new(store, "time.cond_proj", cond_width, td, false, 1.0, rng);
        let time2 = Linear::new(store, "time.fc2", td, td, true, 1.0, rng);
        let base = cfg.base_channels;
        let conv_in = Conv2d::new(store, "conv_in", cfg.in_channels, base, 3, 1, 1.0, rng);

        let stage = |store: &mut ParamStore, rng: &mut R, name: String, cin: usize, cout: usize, depth: usize| Stage {
            res: ResBlock::new(store, &format!("{name}.res"), cin, cout, td, rng),
            attn: (depth > 0).then(|| {
                SpatialTransformer::new(store, &format!("{name}.attn"), cout, depth, cfg.context_dim, cout / cfg.head_dim, rng)
            }),
        };

        let mut skips = vec![base];
        let mut ch = base;
        let mut down = Vec::new();
        for (l, (&mult, &depth)) in cfg.channel_mult.iter().zip(&cfg.transformer_blocks).enumerate() {
            let cout = base * mult;
            let mut stages = Vec::new();
            for r in 0..cfg.num_res_blocks {
                stages.push(stage(store, rng, format!("down{l}.{r}"), ch, cout, depth));
                ch = cout;
                skips.push(ch);
            }
            let sample = (l + 1 < cfg.levels()).then(|| {
                skips.push(ch);
                Conv2d::new(store, &format!("down{l}.downsample"), ch, ch, 3, 2, 1.0, rng)
            });
            down.push((stages, sample));
        }

        let mid_depth = *cfg.transformer_blocks.last().unwrap();
        let mid = (
            ResBlock::new(store, "mid.res1", ch, ch, td, rng),
            (mid_depth > 0)
                .then(|| SpatialTransformer::new(store, "mid.attn", ch, mid_depth, cfg.context_dim, ch / cfg.head_dim, rng)),
            ResBlock::new(store, "mid.res2", ch, ch, td, rng),
        );

        let mut up = Vec::new();
        for l in (0..cfg.levels()).rev() {
            let cout = base * cfg.channel_mult[l];
            let depth = cfg.transformer_blocks[l];
            let mut stages = Vec::new();
            for r in 0..=cfg.num_res_blocks {
                let skip = skips.pop().unwrap();
                stages.push(stage(store, rng, format!("up{l}.{r}"), ch + skip, cout, depth));
                ch = cout;
            }
            let sample = (l > 0).then(|| Conv2d::new(store, &format!("up{l}.upsample"), ch, ch, 3, 1, 1.0, rng));
            up.push((stages, sample));
        }
        debug_assert!(skips.is_empty());

        let norm_out = GroupNorm::new(store, "out.norm", ch, norm_groups(ch, 32));
        let conv_out = Conv2d::new(store, "out.conv", ch, cfg.in_channels, 3, 1, 0.5, rng);
        Self {
            time1,
            cond_proj,
            time2,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, time_features: Var, cond_pooled: Var, context: Var) -> Var {
        let t = self.time1.forward(g, time_features);
        let t = inject_conditioning_graph(g, t, cond_pooled, &self.cond_proj);
        let t = g.silu(t);
        let t = self.time2.forward(g, t);
        let emb = g.silu(t);

        let mut h = self.conv_in.forward(g, x);
        let mut skips = vec![h];
        for (stages, sample) in &self.down {
            for s in stages {
                h = s.forward(g, h, emb, context);
                skips.push(h);
            }
            if let Some(conv) = sample {
                h = conv.forward(g, h);
                skips.push(h);
            }
        }
        h = self.mid.0.forward(g, h, emb);
        if let Some(st) = &self.mid.1 {
            h = st.forward(g, h, context);
        }
        h = self.mid.2.forward(g, h, emb);
        for (stages, sample) in &self.up {
            for s in stages {
                let skip = skips.pop().unwrap();
                h = g.concat(h, skip, 1);
                h = s.forward(g, h, emb, context);
            }
            if let Some(conv) = sample {
                h = g.upsample2x(h);
                h = conv.forward(g, h);
            }
        }
        let h = self.norm_out.forward(g, h);
        let h = g.silu(h);
        self.conv_out.forward(g, h)
    }
}

/// The learnable `D_theta`. Parameters live in an owned [`ParamStore`]; any
/// store with the same layout (for example EMA weights) can be substituted.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    net: Net,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = Net::new(&mut params, &config, rng);
        Ok(Self { config, params, net })
    }

    /// Rebuilds a model around stored weights.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, &mut crate::rng::rng(0))?;
        if !model.params.same_layout(&params) {
            return Err(Error::format("denoiser weights do not match the config"));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::shape("parameter layout mismatch"));
        }
        self.params = params;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.to_string()).collect()
    }

    /// Checks input and conditioning shapes for a batch.
    pub fn check_inputs(&self, x: &Tensor, sigmas: &[f64], cond: &CondBatch) -> Result<()> {
        let cfg = &self.config;
        if x.rank() != 4 {
            return Err(Error::shape(format!("expected [n, c, h, w], got {:?}", x.shape())));
        }
        let (n, c, h, w) = x.dims4();
        let m = cfg.spatial_multiple();
        if c != cfg.in_channels {
            return Err(Error::shape(format!("expected {} channels, got {c}", cfg.in_channels)));
        }
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("spatial size {h}x{w} not divisible by {m}")));
        }
        if sigmas.len() != n || cond.len() != n {
            return Err(Error::shape(format!(
                "batch of {n} with {} sigmas and {} conditions",
                sigmas.len(),
                cond.len()
            )));
        }
        if cond.context.rank() != 3 || cond.context.dim(0) != n || cond.context.dim(2) != cfg.context_dim {
            return Err(Error::shape(format!(
                "context {:?} must be [{n}, tokens, {}]",
                cond.context.shape(),
                cfg.context_dim
            )));
        }
        if cond.pooled.shape() != [n, cfg.pooled_dim] {
            return Err(Error::shape(format!(
                "pooled {:?} must be [{n}, {}]",
                cond.pooled.shape(),
                cfg.pooled_dim
            )));
        }
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("sigma must be positive and finite, got {s}")));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                detail: "denoiser input".into(),
            });
        }
        Ok(())
    }

    /// Records `D(x; sigma_i, c_i)` on `g`, whose store supplies the weights.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, sigmas: &[f64], cond: &CondBatch) -> Result<Var> {
        let cfg = &self.config;
        let coeffs: Vec<_> = sigmas.iter().map(|&s| preconditioning(s, cfg.sigma_data)).collect();
        let mut time = Vec::with_capacity(sigmas.len() * cfg.time_fourier_dim);
        let mut cond_pooled = Vec::with_capacity(sigmas.len() * (6 * cfg.d_f + cfg.pooled_dim));
        for (i, c) in coeffs.iter().enumerate() {
            time.extend(fourier_features(c.3, cfg.time_fourier_dim));
            cond_pooled.extend(embed_microcond_masked(&cond.micro[i], cfg.d_f, cfg.cond_mask)?.vector);
            cond_pooled.extend_from_slice(cond.pooled.index0(i).data());
        }
        let n = sigmas.len();
        let time = g.constant(Tensor::new(vec![n, cfg.time_fourier_dim], time));
        let cond_pooled = g.constant(Tensor::new(vec![n, 6 * cfg.d_f + cfg.pooled_dim], cond_pooled));
        let context = g.constant(cond.context.clone());
        let x_in = g.scale_items(x, coeffs.iter().map(|c| c.0).collect());
        let f = self.net.forward(g, x_in, time, cond_pooled, context);
        let skip = g.scale_items(x, coeffs.iter().map(|c| c.1).collect());
        let out = g.scale_items(f, coeffs.iter().map(|c| c.2).collect());
        Ok(g.add(skip, out))
    }

    /// Batched `x_0` prediction with explicit sigmas and weights.
    pub fn denoise_with(&self, params: &ParamStore, x: &Tensor, sigmas: &[f64], cond: &CondBatch) -> Result<Tensor> {
        self.check_inputs(x, sigmas, cond)?;
        let mut g = Graph::new(params);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, sigmas, cond)?;
        let out = g.value(out).clone();
        if !out.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                detail: "denoiser output".into(),
            });
        }
        Ok(out)
    }

    pub fn denoise_sigma(&self, x: &Tensor, sigma: f64, cond: &CondBatch) -> Result<Tensor> {
        let sigmas = vec![sigma; x.dim(0)];
        self.denoise_with(&self.params, x, &sigmas, cond)
    }

    /// `x_hat0` for one `[c, h, w]` input at a schedule level.
    pub fn denoise(
        &self,
        x_t: &Tensor,
        level_index: usize,
        context: &TextContext,
        microcond: MicroCond,
        schedule: &NoiseSchedule,
    ) -> Result<Tensor> {
        let sigma = schedule.sigma(level_index)?;
        if x_t.rank() != 3 {
            return Err(Error::shape(format!("expected [c, h, w], got {:?}", x_t.shape())));
        }
        let x = Tensor::stack(std::slice::from_ref(x_t));
        let cond = CondBatch::repeat(context, microcond, 1);
        Ok(self.denoise_sigma(&x, sigma, &cond)?.index0(0))
    }
}

/// Free-function constructor.
pub fn build_denoiser<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Denoiser> {
    Denoiser::new(config, rng)
}

/// Anything that maps `(x, sigma)` to an `x_0` estimate.
pub trait Denoise {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor>;
}

/// A model bound to fixed weights and conditioning.
#[derive(Clone, Copy, Debug)]
pub struct Conditioned<'a> {
    pub model: &'a Denoiser,
    pub params: &'a ParamStore,
    pub cond: &'a CondBatch,
}

impl<'a> Conditioned<'a> {
    pub fn new(model: &'a Denoiser, cond: &'a CondBatch) -> Self {
        Self {
            model,
            params: model.params(),
            cond,
        }
    }

    pub fn with_params(model: &'a Denoiser, params: &'a ParamStore, cond: &'a CondBatch) -> Self {
        Self { model, params, cond }
    }
}

impl Denoise for Conditioned<'_> {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let sigmas = vec![sigma; x.dim(0)];
        self.model.denoise_with(self.params, x, &sigmas, self.cond)
    }
}

/// The optimal denoiser for `N(mean, s^2)` data: `mean + s^2 (x - mean) / (s^2 + sigma^2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianDenoiser {
    pub mean: f64,
    pub std: f64,
}

impl Denoise for GaussianDenoiser {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let s2 = self.std * self.std;
        let k = s2 / (s2 + sigma * sigma);
        Ok(x.map(|v| self.mean + k * (v - self.mean)))
    }
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> Denoise for F {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        self(x, sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    fn tiny(blocks: Vec<usize>) -> DenoiserConfig {
        let mut cfg = DenoiserConfig::toy(4, vec![1, 2], blocks, 6, 4);
        cfg.in_channels = 1;
        cfg.d_f = 4;
        cfg.time_fourier_dim = 8;
        cfg.time_dim = 8;
        cfg.head_dim = 4;
        cfg
    }

    fn cond(n: usize, ctx: usize, pooled: usize, r: &mut crate::rng::Rng) -> CondBatch {
        CondBatch {
            context: Tensor::randn(&[n, 3, ctx], 1.0, r),
            pooled: Tensor::randn(&[n, pooled], 1.0, r),
            micro: vec![MicroCond::new((32, 16), (2, 0), (8, 8)); n],
        }
    }

    #[test]
    fn rejects_mismatched_lists() {
        let cfg = DenoiserConfig::toy(8, vec![1, 2], vec![0], 4, 4);
        assert!(build_denoiser(cfg, &mut rng(0)).is_err());
    }

    #[test]
    fn sd1_and_sdxl_presets_build() {
        let sd1 = build_denoiser(DenoiserConfig::sd1(8, 8, 4), &mut rng(0)).unwrap();
        let sdxl = build_denoiser(DenoiserConfig::sdxl(8, 8, 4), &mut rng(0)).unwrap();
        assert!(sd1.parameter_count() > 0 && sdxl.parameter_count() > 0);
        assert_eq!(sd1.config().spatial_multiple(), 8);
    }

    #[test]
    fn no_attention_without_blocks() {
        let m = build_denoiser(DenoiserConfig::toy(8, vec![1, 2, 4], vec![0, 0, 0], 8, 4), &mut rng(0)).unwrap();
        assert!(m.parameter_names().iter().all(|n| !n.contains("attn")));
        let m = build_denoiser(DenoiserConfig::toy(8, vec![1, 2, 4], vec![0, 1, 0], 8, 4), &mut rng(0)).unwrap();
        assert!(m.parameter_names().iter().any(|n| n.contains("attn")));
    }

    #[test]
    fn output_shape_and_purity() {
        let m = build_denoiser(tiny(vec![0, 1]), &mut rng(1)).unwrap();
        let mut r = rng(2);
        let x = Tensor::randn(&[2, 1, 8, 4], 1.0, &mut r);
        let c = cond(2, 6, 4, &mut r);
        let a = m.denoise_sigma(&x, 0.7, &c).unwrap();
        let b = m.denoise_sigma(&x, 0.7, &c).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_input_is_bounded() {
        let m = build_denoiser(tiny(vec![0, 1]), &mut rng(1)).unwrap();
        let mut r = rng(3);
        let c = cond(1, 6, 4, &mut r);
        let out = m.denoise_sigma(&Tensor::zeros(&[1, 1, 8, 8]), 1.0, &c).unwrap();
        assert!(out.is_finite());
        // c_out <= sigma_data bounds the magnitude of the network branch
        assert!(out.max_abs() < 50.0, "{}", out.max_abs());
    }

    #[test]
    fn shape_errors() {
        let m = build_denoiser(tiny(vec![0, 1]), &mut rng(1)).unwrap();
        let mut r = rng(4);
        let c = cond(1, 6, 4, &mut r);
        assert!(m.denoise_sigma(&Tensor::zeros(&[1, 2, 8, 8]), 1.0, &c).is_err());
        assert!(m.denoise_sigma(&Tensor::zeros(&[1, 1, 7, 8]), 1.0, &c).is_err());
        assert!(m.denoise_sigma(&Tensor::full(&[1, 1, 8, 8], f64::NAN), 1.0, &c).is_err());
        let bad = cond(1, 5, 4, &mut r);
        assert!(m.denoise_sigma(&Tensor::zeros(&[1, 1, 8, 8]), 1.0, &bad).is_err());
    }

    #[test]
    fn context_changes_output() {
        let m = build_denoiser(tiny(vec![0, 1]), &mut rng(1)).unwrap();
        let mut r = rng(5);
        let x = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut r);
        let c1 = cond(1, 6, 4, &mut r);
        let mut c2 = c1.clone();
        c2.context = Tensor::randn(&[1, 3, 6], 1.0, &mut r);
        let d = m.denoise_sigma(&x, 1.0, &c1).unwrap().sub(&m.denoise_sigma(&x, 1.0, &c2).unwrap());
        assert!(d.max_abs() > 0.0);
    }

    #[test]
    fn conditioning_path_receives_gradient() {
        let m = build_denoiser(tiny(vec![0, 0]), &mut rng(1)).unwrap();
        let mut r = rng(8);
        let x = Tensor::randn(&[2, 1, 8, 8], 1.0, &mut r);
        let c = cond(2, 6, 4, &mut r);
        let mut g = Graph::new(&m.params);
        let xv = g.constant(x.clone());
        let out = m.forward(&mut g, xv, &[0.5, 2.0], &c).unwrap();
        let loss = g.weighted_sq_err(out, x.map(|v| v * 0.5), vec![1.0, 1.0]);
        let grads = g.backward(loss).into_param_grads(m.params.len());
        for name in ["time.cond_proj.weight", "time.fc1.weight"] {
            let id = m.params.id(name).unwrap();
            assert!(grads[id.index()].as_ref().unwrap().max_abs() > 1e-6, "{name}");
        }
    }

    #[test]
    fn microcond_mask_removes_sensitivity() {
        let mut cfg = tiny(vec![0, 0]);
        cfg.cond_mask = CondMask::NONE;
        let m = build_denoiser(cfg, &mut rng(1)).unwrap();
        let mut r = rng(6);
        let x = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut r);
        let c1 = cond(1, 6, 4, &mut r);
        let mut c2 = c1.clone();
        c2.micro[0] = MicroCond::new((4, 4), (9, 9), (8, 8));
        assert_eq!(m.denoise_sigma(&x, 1.0, &c1).unwrap(), m.denoise_sigma(&x, 1.0, &c2).unwrap());
    }

    #[test]
    fn conv_only_constant_input_gives_constant_interior() {
        let mut cfg = tiny(vec![0, 0]);
        cfg.channel_mult = vec![1];
        cfg.transformer_blocks = vec![0];
        let m = build_denoiser(cfg, &mut rng(1)).unwrap();
        let mut r = rng(7);
        let c = cond(1, 6, 4, &mut r);
        let (h, w) = (36, 36);
        let out = m.denoise_sigma(&Tensor::full(&[1, 1, h, w], 0.3), 1.0, &c).unwrap();
        // twelve 3x3 convs between input and output
        let border = 12;
        let centre = out.data()[(h / 2) * w + w / 2];
        for i in border..h - border {
            for j in border..w - border {
                assert!((out.data()[i * w + j] - centre).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn score_examples() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        assert_eq!(score_from_denoiser(&x, &x, 0.3).unwrap().max_abs(), 0.0);
        let d = Tensor::new(vec![3], vec![0.0, 1.0, 2.0]);
        assert_eq!(score_from_denoiser(&d, &x, 1.0).unwrap(), d.sub(&x));
        assert!(score_from_denoiser(&d, &x, 0.0).is_err());
        let (s, sigma) = (0.8, 1.7);
        let g = GaussianDenoiser { mean: 0.0, std: s };
        let score = score_from_denoiser(&g.denoise(&x, sigma).unwrap(), &x, sigma).unwrap();
        for (a, b) in score.data().iter().zip(x.data()) {
            assert!((a + b / (s * s + sigma * sigma)).abs() < 1e-12);
        }
    }

    #[test]
    fn preconditioning_limits() {
        let (c_in, c_skip, c_out, _) = preconditioning(1e-8, 0.5);
        assert!((c_skip - 1.0).abs() < 1e-12 && c_out < 1e-7 && (c_in - 2.0).abs() < 1e-9);
    }
}
