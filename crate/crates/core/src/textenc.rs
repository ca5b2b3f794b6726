//! Toy dual text encoder.
//!
//! Two independent byte-level encoders (A and B) run over the same tokens.
//! Their penultimate hidden states are concatenated along the channel axis to
//! form the cross-attention context; encoder B's final layer, mean-pooled
//! over non-padding positions, gives the pooled embedding.

use microdiff_nn::layers::{LayerNorm, Linear};
use microdiff_nn::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Byte values 0..=255 plus one padding id.
pub const VOCAB_SIZE: usize = 257;
pub const PAD_TOKEN: u32 = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub max_len: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub heads: usize,
    /// Transformer blocks per encoder; the penultimate state is taken before
    /// the last one.
    pub layers: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            max_len: 16,
            dim_a: 16,
            dim_b: 32,
            heads: 2,
            layers: 2,
        }
    }
}

impl TextEncoderConfig {
    pub fn context_dim(&self) -> usize {
        self.dim_a + self.dim_b
    }

    pub fn pooled_dim(&self) -> usize {
        self.dim_b
    }
}

/// Cross-attention context and pooled summary for one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TextContext {
    /// `[max_len, dim_a + dim_b]`
    pub sequence: Tensor,
    /// `[dim_b]`
    pub pooled: Vec<f64>,
}

/// Caption bytes, truncated to `max_len`; padding happens in [`TextEncoder::encode`].
pub fn tokenize(caption: &str, max_len: usize) -> Vec<u32> {
    caption.bytes().take(max_len).map(u32::from).collect()
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Tower {
    tokens: microdiff_nn::ParamId,
    positions: microdiff_nn::ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    dim: usize,
}

impl Tower {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &TextEncoderConfig, dim: usize, rng: &mut R) -> Self {
        let tokens = store.insert(format!("{name}.tokens"), Tensor::randn(&[VOCAB_SIZE, dim], 1.0, rng));
        let positions = store.insert(format!("{name}.positions"), Tensor::randn(&[cfg.max_len, dim], 0.5, rng));
        let s3 = 3f64.sqrt();
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("{name}.block{i}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), dim),
                    q: Linear::new(store, &format!("{p}.q"), dim, dim, false, s3, rng),
                    k: Linear::new(store, &format!("{p}.k"), dim, dim, false, s3, rng),
                    v: Linear::new(store, &format!("{p}.v"), dim, dim, false, s3, rng),
                    o: Linear::new(store, &format!("{p}.o"), dim, dim, true, s3, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), dim),
                    fc1: Linear::new(store, &format!("{p}.fc1"), dim, 2 * dim, true, s3, rng),
                    fc2: Linear::new(store, &format!("{p}.fc2"), 2 * dim, dim, true, s3, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.final_ln"), dim);
        Self {
            tokens,
            positions,
            blocks,
            final_ln,
            dim,
        }
    }

    /// Returns `(penultimate, final)` hidden states, both `[b, l, dim]`.
    fn forward(&self, g: &mut Graph<'_>, ids: &[usize], b: usize, l: usize, heads: usize) -> (Var, Var) {
        let table = g.param(self.tokens);
        let tok = g.embedding(ids.to_vec(), &[b, l], table);
        let pos_table = g.param(self.positions);
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = g.embedding(pos_ids, &[b, l], pos_table);
        let mut h = g.add(tok, pos);
        let mut penultimate = h;
        for (i, blk) in self.blocks.iter().enumerate() {
            if i + 1 == self.blocks.len() {
                penultimate = h;
            }
            let n = blk.ln1.forward(g, h);
            let q = blk.q.forward(g, n);
            let k = blk.k.forward(g, n);
            let v = blk.v.forward(g, n);
            let a = g.attention(q, k, v, heads);
            let a = blk.o.forward(g, a);
            h = g.add(h, a);
            let n = blk.ln2.forward(g, h);
            let f = blk.fc1.forward(g, n);
            let f = g.gelu(f);
            let f = blk.fc2.forward(g, f);
            h = g.add(h, f);
        }
        let fin = self.final_ln.forward(g, h);
        debug_assert_eq!(g.shape(fin), &[b, l, self.dim]);
        (penultimate, fin)
    }
}

/// Frozen, randomly initialized dual encoder.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    params: ParamStore,
    tower_a: Tower,
    tower_b: Tower,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(config: TextEncoderConfig, rng: &mut R) -> Result<Self> {
        if config.max_len == 0 || config.layers == 0 {
            return Err(Error::invalid("text encoder needs max_len >= 1 and layers >= 1"));
        }
        if config.dim_a % config.heads != 0 || config.dim_b % config.heads != 0 {
            return Err(Error::invalid("text encoder widths must be divisible by heads"));
        }
        let mut params = ParamStore::new();
        let tower_a = Tower::new(&mut params, "text.a", &config, config.dim_a, rng);
        let tower_b = Tower::new(&mut params, "text.b", &config, config.dim_b, rng);
        Ok(Self {
            config,
            params,
            tower_a,
            tower_b,
        })
    }

    /// Rebuilds the encoder around stored weights.
    pub fn from_params(config: TextEncoderConfig, params: ParamStore) -> Result<Self> {
        let mut fresh = Self::new(config, &mut crate::rng::rng(0))?;
        if !fresh.params.same_layout(&params) {
            return Err(Error::format("text encoder weights do not match the config"));
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Output of encoder A alone, `[max_len, dim_a]`.
    pub fn encode_a(&self, tokens: &[u32]) -> Result<Tensor> {
        let ids = self.pad(tokens)?;
        let mut g = Graph::new(&self.params);
        let (pen, _) = self.tower_a.forward(&mut g, &ids, 1, self.config.max_len, self.config.heads);
        Ok(g.value(pen).index0(0))
    }

    pub fn encode(&self, tokens: &[u32]) -> Result<TextContext> {
        let (seq, pooled) = self.encode_batch(&[tokens.to_vec()])?;
        Ok(TextContext {
            sequence: seq.index0(0),
            pooled: pooled.index0(0).into_data(),
        })
    }

    pub fn encode_caption(&self, caption: &str) -> Result<TextContext> {
        self.encode(&tokenize(caption, self.config.max_len))
    }

    /// The null context used for classifier-free guidance (empty prompt).
    pub fn null_context(&self) -> TextContext {
        self.encode(&[]).expect("empty prompt always encodes")
    }

    /// Batched encode: `([b, max_len, dim_a + dim_b], [b, dim_b])`.
    pub fn encode_batch(&self, batch: &[Vec<u32>]) -> Result<(Tensor, Tensor)> {
        let l = self.config.max_len;
        let mut ids = Vec::with_capacity(batch.len() * l);
        let mut weights = Vec::with_capacity(batch.len() * l);
        for tokens in batch {
            let padded = self.pad(tokens)?;
            let real = padded.iter().filter(|&&t| t != PAD_TOKEN as usize).count();
            for &t in &padded {
                weights.push(if real == 0 {
                    1.0 / l as f64
                } else if t != PAD_TOKEN as usize {
                    1.0 / real as f64
                } else {
                    0.0
                });
            }
            ids.extend(padded);
        }
        let b = batch.len();
        let mut g = Graph::new(&self.params);
        let heads = self.config.heads;
        let (pen_a, _) = self.tower_a.forward(&mut g, &ids, b, l, heads);
        let (pen_b, fin_b) = self.tower_b.forward(&mut g, &ids, b, l, heads);
        let seq = g.concat(pen_a, pen_b, 2);
        let pooled = g.token_mean(fin_b, weights);
        Ok((g.value(seq).clone(), g.value(pooled).clone()))
    }

    fn pad(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        let l = self.config.max_len;
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {VOCAB_SIZE}")));
        }
        let mut ids: Vec<usize> = tokens.iter().take(l).map(|&t| t as usize).collect();
        ids.resize(l, PAD_TOKEN as usize);
        Ok(ids)
    }
}

/// Free-function form of [`TextEncoder::encode`].
pub fn encode(encoder: &TextEncoder, tokens: &[u32]) -> Result<TextContext> {
    encoder.encode(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    fn encoder(dim_a: usize, dim_b: usize) -> TextEncoder {
        let cfg = TextEncoderConfig {
            max_len: 8,
            dim_a,
            dim_b,
            heads: 2,
            layers: 2,
        };
        TextEncoder::new(cfg, &mut rng(0)).unwrap()
    }

    #[test]
    fn widths_concatenate() {
        let enc = encoder(64, 128);
        let ctx = enc.encode_caption("a cat").unwrap();
        assert_eq!(ctx.sequence.shape(), &[8, 192]);
        assert_eq!(ctx.pooled.len(), 128);
    }

    #[test]
    fn empty_prompt_is_null_context() {
        let enc = encoder(8, 8);
        assert_eq!(enc.encode(&[]).unwrap(), enc.null_context());
        assert_eq!(enc.encode(&[PAD_TOKEN; 8]).unwrap(), enc.null_context());
    }

    #[test]
    fn out_of_vocabulary_rejected() {
        let enc = encoder(8, 8);
        assert!(enc.encode(&[1, 257]).is_err());
    }

    #[test]
    fn channel_split_recovers_encoder_a() {
        let enc = encoder(8, 16);
        let tokens = tokenize("split", 8);
        let ctx = enc.encode(&tokens).unwrap();
        let a = enc.encode_a(&tokens).unwrap();
        for row in 0..8 {
            assert_eq!(&ctx.sequence.data()[row * 24..row * 24 + 8], &a.data()[row * 8..(row + 1) * 8]);
        }
    }

    #[test]
    fn single_token_perturbation_changes_its_row() {
        let enc = encoder(8, 8);
        let a = enc.encode(&tokenize("abcd", 8)).unwrap();
        let b = enc.encode(&tokenize("abxd", 8)).unwrap();
        let row = |t: &Tensor, r: usize| t.data()[r * 16..(r + 1) * 16].to_vec();
        assert_ne!(row(&a.sequence, 2), row(&b.sequence, 2));
    }

    #[test]
    fn permutation_sensitive() {
        let enc = encoder(8, 8);
        let a = enc.encode(&tokenize("ab", 8)).unwrap();
        let b = enc.encode(&tokenize("ba", 8)).unwrap();
        assert_ne!(a.sequence, b.sequence);
    }

    #[test]
    fn deterministic_and_batched_consistently() {
        let enc = encoder(8, 8);
        let t1 = tokenize("one", 8);
        let t2 = tokenize("two", 8);
        let (seq, pooled) = enc.encode_batch(&[t1.clone(), t2]).unwrap();
        let single = enc.encode(&t1).unwrap();
        assert_eq!(seq.index0(0), single.sequence);
        assert_eq!(pooled.index0(0).into_data(), single.pooled);
        assert_eq!(enc.encode(&t1).unwrap(), single);
    }

    #[test]
    fn weights_round_trip_through_store() {
        let enc = encoder(8, 8);
        let again = TextEncoder::from_params(enc.config().clone(), enc.params().clone()).unwrap();
        assert_eq!(again.encode(&[5, 6]).unwrap(), enc.encode(&[5, 6]).unwrap());
    }
}
