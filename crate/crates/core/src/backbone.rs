//! Tiny frozen encoder-decoder transformer with adapter injection points.

use polyadapt_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, data, Result};
use crate::tasks::{Example, BOS, EOS, PAD};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn new(vocab_size: usize, model_dim: usize, num_layers: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            model_dim,
            num_layers,
            ff_dim: 4 * model_dim,
            max_seq_len: 16,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return config(format!("vocab_size {} < 4", self.vocab_size));
        }
        if self.model_dim == 0 || self.num_layers == 0 || self.ff_dim == 0 || self.max_seq_len == 0
        {
            return config("model_dim, num_layers, ff_dim and max_seq_len must be positive");
        }
        Ok(())
    }

    /// Checks that every routing head count divides the widths it partitions.
    pub fn check_heads(&self, heads: usize) -> Result<()> {
        if heads == 0 || !self.model_dim.is_multiple_of(heads) {
            return config(format!(
                "model_dim {} is not divisible by head count {heads}",
                self.model_dim
            ));
        }
        Ok(())
    }

    /// Closed-form count of backbone weights.
    pub fn weight_count(&self) -> usize {
        let (v, d, l, f, n) = (
            self.vocab_size,
            self.model_dim,
            self.num_layers,
            self.ff_dim,
            self.max_seq_len,
        );
        let ff = 2 * d * f;
        v * d + n * d + l * (4 * d * d + ff) + l * (8 * d * d + ff) + d * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    EncoderSelfAttention,
    DecoderSelfAttention,
    DecoderCrossAttention,
    EncoderFeedForward,
    DecoderFeedForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    Q,
    K,
    V,
    O,
    Ff,
}

/// Where an adapter attaches: a projection inside one block of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InjectionSite {
    pub block: BlockKind,
    pub layer: usize,
    pub kind: SiteKind,
    /// Width of the activation the adapter acts on.
    pub dim: usize,
}

/// Adapter family, which fixes the site kinds adapters attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterFamily {
    Lora,
    Ia3,
}

impl AdapterFamily {
    pub fn kinds(self) -> &'static [SiteKind] {
        match self {
            AdapterFamily::Lora => &[SiteKind::Q, SiteKind::K, SiteKind::V, SiteKind::O],
            AdapterFamily::Ia3 => &[SiteKind::K, SiteKind::V, SiteKind::Ff],
        }
    }
}

/// Resolved adapter for one site during one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum SiteAdapter {
    Identity,
    /// Adds `scale · A Bᵀ x`.
    Lora {
        a: Var,
        b: Var,
        scale: f64,
    },
    /// Multiplies activations elementwise by `l`.
    Ia3 {
        l: Var,
    },
}

pub trait AdapterSource {
    fn adapter(&mut self, g: &mut Graph, site: &InjectionSite) -> Result<SiteAdapter>;
}

/// The bare backbone.
pub struct NoAdapters;

impl AdapterSource for NoAdapters {
    fn adapter(&mut self, _g: &mut Graph, _site: &InjectionSite) -> Result<SiteAdapter> {
        Ok(SiteAdapter::Identity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub o: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub self_attn: AttentionWeights,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
    pub ff: FeedForward,
}

/// Pre-norm encoder-decoder with a single attention head per block. Every
/// weight has `requires_grad == false` and is never written after build.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    pub embedding: Tensor,
    pub positions: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub head: Tensor,
}

/// Padded batch of examples. Sources get `<eos>` appended; the decoder reads
/// `<bos> target` and predicts `target <eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_keep: Vec<bool>,
    pub dec_in: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return data("empty batch");
        }
        let src_len = examples
            .iter()
            .map(|e| e.input.len() + 1)
            .max()
            .unwrap_or(1);
        let tgt_len = examples
            .iter()
            .map(|e| e.target.len() + 1)
            .max()
            .unwrap_or(1);
        let size = examples.len();
        let mut src = vec![PAD; size * src_len];
        let mut src_keep = vec![false; size * src_len];
        let mut dec_in = vec![PAD; size * tgt_len];
        let mut targets = vec![None; size * tgt_len];
        for (b, e) in examples.iter().enumerate() {
            for (i, &t) in e.input.iter().chain(std::iter::once(&EOS)).enumerate() {
                src[b * src_len + i] = t;
                src_keep[b * src_len + i] = true;
            }
            dec_in[b * tgt_len] = BOS;
            for (i, &t) in e.target.iter().enumerate() {
                dec_in[b * tgt_len + i + 1] = t;
                targets[b * tgt_len + i] = Some(t);
            }
            targets[b * tgt_len + e.target.len()] = Some(EOS);
        }
        Ok(Self {
            size,
            src_len,
            tgt_len,
            src,
            src_keep,
            dec_in,
            targets,
        })
    }

    pub fn from_owned(examples: &[Example]) -> Result<Self> {
        let refs: Vec<&Example> = examples.iter().collect();
        Self::new(&refs)
    }
}

/// Forward output: scalar mean loss and `[size·tgt_len × V]` logits.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub loss: Var,
    pub logits: Var,
}

fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

impl FrozenBackbone {
    /// Deterministic weights from `config.seed`: projections `N(0, 1/d)`,
    /// embedding and position tables `N(0, 1)`.
    pub fn build(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f) = (config.vocab_size, config.model_dim, config.ff_dim);
        let std = 1.0 / (d as f64).sqrt();
        let attn = |rng: &mut ChaCha8Rng| AttentionWeights {
            q: gaussian(&[d, d], std, rng),
            k: gaussian(&[d, d], std, rng),
            v: gaussian(&[d, d], std, rng),
            o: gaussian(&[d, d], std, rng),
        };
        let ff = |rng: &mut ChaCha8Rng| FeedForward {
            w1: gaussian(&[d, f], std, rng),
            w2: gaussian(&[f, d], std, rng),
        };
        let embedding = gaussian(&[v, d], 1.0, &mut rng);
        let positions = gaussian(&[config.max_seq_len, d], 1.0, &mut rng);
        let encoder = (0..config.num_layers)
            .map(|_| EncoderLayer {
                self_attn: attn(&mut rng),
                ff: ff(&mut rng),
            })
            .collect();
        let decoder = (0..config.num_layers)
            .map(|_| DecoderLayer {
                self_attn: attn(&mut rng),
                cross_attn: attn(&mut rng),
                ff: ff(&mut rng),
            })
            .collect();
        let head = gaussian(&[d, v], std, &mut rng);
        Ok(Self {
            config,
            embedding,
            positions,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// All weight tensors in canonical order.
    pub fn weights(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding, &self.positions];
        fn attn(a: &AttentionWeights) -> [&Tensor; 4] {
            [&a.q, &a.k, &a.v, &a.o]
        }
        for l in &self.encoder {
            let a = &l.self_attn;
            out.extend([&a.q, &a.k, &a.v, &a.o]);
            out.extend([&l.ff.w1, &l.ff.w2]);
        }
        for l in &self.decoder {
            out.extend(attn(&l.self_attn));
            out.extend(attn(&l.cross_attn));
            out.extend([&l.ff.w1, &l.ff.w2]);
        }
        out.push(&self.head);
        out
    }

    fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding, &mut self.positions];
        for l in &mut self.encoder {
            let a = &mut l.self_attn;
            out.extend([&mut a.q, &mut a.k, &mut a.v, &mut a.o]);
            out.extend([&mut l.ff.w1, &mut l.ff.w2]);
        }
        for l in &mut self.decoder {
            let a = &mut l.self_attn;
            out.extend([&mut a.q, &mut a.k, &mut a.v, &mut a.o]);
            let c = &mut l.cross_attn;
            out.extend([&mut c.q, &mut c.k, &mut c.v, &mut c.o]);
            out.extend([&mut l.ff.w1, &mut l.ff.w2]);
        }
        out.push(&mut self.head);
        out
    }

    pub fn weight_census(&self) -> usize {
        self.weights().iter().map(|t| t.numel()).sum()
    }

    /// Flat little-endian `f64` dump of [`FrozenBackbone::weights`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.weight_census() * 8);
        for t in self.weights() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(config: BackboneConfig, bytes: &[u8]) -> Result<Self> {
        let mut bb = Self::build(config)?;
        if bytes.len() != bb.weight_census() * 8 {
            return data(format!(
                "backbone checkpoint has {} bytes, expected {}",
                bytes.len(),
                bb.weight_census() * 8
            ));
        }
        let mut chunks = bytes.chunks_exact(8);
        for t in bb.weights_mut() {
            for v in t.data_mut() {
                let c = chunks.next().expect("length checked");
                *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
        Ok(bb)
    }

    /// SHA-256 of the weight bytes.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn any_requires_grad(&self) -> bool {
        self.weights().iter().any(|t| t.requires_grad)
    }

    /// Sites in the order a forward pass visits them.
    pub fn injection_sites(&self, family: AdapterFamily) -> Vec<InjectionSite> {
        let (d, f) = (self.config.model_dim, self.config.ff_dim);
        let kinds = family.kinds();
        let mut out = Vec::new();
        let push_block = |block: BlockKind, layer: usize, out: &mut Vec<InjectionSite>| {
            let attention = !matches!(
                block,
                BlockKind::EncoderFeedForward | BlockKind::DecoderFeedForward
            );
            for &kind in kinds {
                if attention != (kind == SiteKind::Ff) {
                    let dim = if kind == SiteKind::Ff { f } else { d };
                    out.push(InjectionSite {
                        block,
                        layer,
                        kind,
                        dim,
                    });
                }
            }
        };
        for l in 0..self.config.num_layers {
            push_block(BlockKind::EncoderSelfAttention, l, &mut out);
            push_block(BlockKind::EncoderFeedForward, l, &mut out);
        }
        for l in 0..self.config.num_layers {
            push_block(BlockKind::DecoderSelfAttention, l, &mut out);
            push_block(BlockKind::DecoderCrossAttention, l, &mut out);
            push_block(BlockKind::DecoderFeedForward, l, &mut out);
        }
        out
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], size: usize, len: usize) -> Result<Var> {
        if len > self.config.max_seq_len {
            return data(format!(
                "sequence length {len} exceeds max_seq_len {}",
                self.config.max_seq_len
            ));
        }
        let table = g.constant(&self.embedding)?;
        let tok = g.gather_rows(table, ids)?;
        let pos_table = g.constant(&self.positions)?;
        let pos_ids: Vec<usize> = (0..size).flat_map(|_| 0..len).collect();
        let pos = g.gather_rows(pos_table, &pos_ids)?;
        Ok(g.add(tok, pos)?)
    }

    fn project(
        &self,
        g: &mut Graph,
        x: Var,
        w: &Tensor,
        site: InjectionSite,
        adapters: &mut dyn AdapterSource,
    ) -> Result<Var> {
        let wv = g.constant(w)?;
        let base = g.matmul(x, wv)?;
        match adapters.adapter(g, &site)? {
            SiteAdapter::Identity => Ok(base),
            SiteAdapter::Lora { a, b, scale } => {
                let xb = g.matmul(x, b)?;
                let at = g.transpose(a)?;
                let delta = g.matmul(xb, at)?;
                let delta = g.scale(delta, scale)?;
                Ok(g.add(base, delta)?)
            }
            SiteAdapter::Ia3 { l } => Ok(g.mul_row(base, l)?),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph,
        x_q: Var,
        x_kv: Var,
        w: &AttentionWeights,
        block: BlockKind,
        layer: usize,
        batch: usize,
        causal: bool,
        key_keep: Option<&[bool]>,
        adapters: &mut dyn AdapterSource,
    ) -> Result<Var> {
        let d = self.config.model_dim;
        let site = |kind| InjectionSite {
            block,
            layer,
            kind,
            dim: d,
        };
        let q = self.project(g, x_q, &w.q, site(SiteKind::Q), adapters)?;
        let k = self.project(g, x_kv, &w.k, site(SiteKind::K), adapters)?;
        let v = self.project(g, x_kv, &w.v, site(SiteKind::V), adapters)?;
        let a = g.attention(q, k, v, batch, causal, key_keep)?;
        self.project(g, a, &w.o, site(SiteKind::O), adapters)
    }

    fn feed_forward(
        &self,
        g: &mut Graph,
        x: Var,
        w: &FeedForward,
        block: BlockKind,
        layer: usize,
        adapters: &mut dyn AdapterSource,
    ) -> Result<Var> {
        let site = InjectionSite {
            block,
            layer,
            kind: SiteKind::Ff,
            dim: self.config.ff_dim,
        };
        let w1 = g.constant(&w.w1)?;
        let h = g.matmul(x, w1)?;
        let mut h = g.relu(h)?;
        match adapters.adapter(g, &site)? {
            SiteAdapter::Identity => {}
            SiteAdapter::Ia3 { l } => h = g.mul_row(h, l)?,
            SiteAdapter::Lora { .. } => {
                return config("LoRA adapters do not attach to feed-forward sites")
            }
        }
        let w2 = g.constant(&w.w2)?;
        Ok(g.matmul(h, w2)?)
    }

    /// Normalized encoder states, `[size·src_len × d]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        batch: &Batch,
        adapters: &mut dyn AdapterSource,
    ) -> Result<Var> {
        let mut x = self.embed(g, &batch.src, batch.size, batch.src_len)?;
        for (l, layer) in self.encoder.iter().enumerate() {
            let n = g.rms_norm_rows(x, NORM_EPS)?;
            let a = self.attention_block(
                g,
                n,
                n,
                &layer.self_attn,
                BlockKind::EncoderSelfAttention,
                l,
                batch.size,
                false,
                Some(&batch.src_keep),
                adapters,
            )?;
            x = g.add(x, a)?;
            let n = g.rms_norm_rows(x, NORM_EPS)?;
            let f =
                self.feed_forward(g, n, &layer.ff, BlockKind::EncoderFeedForward, l, adapters)?;
            x = g.add(x, f)?;
        }
        Ok(g.rms_norm_rows(x, NORM_EPS)?)
    }

    /// Decoder logits `[size·len × V]` for decoder inputs of length `len`.
    #[allow(clippy::too_many_arguments)]
    fn decode_logits(
        &self,
        g: &mut Graph,
        memory: Var,
        src_keep: &[bool],
        dec_in: &[usize],
        size: usize,
        len: usize,
        adapters: &mut dyn AdapterSource,
    ) -> Result<Var> {
        let mut y = self.embed(g, dec_in, size, len)?;
        for (l, layer) in self.decoder.iter().enumerate() {
            let n = g.rms_norm_rows(y, NORM_EPS)?;
            let a = self.attention_block(
                g,
                n,
                n,
                &layer.self_attn,
                BlockKind::DecoderSelfAttention,
                l,
                size,
                true,
                None,
                adapters,
            )?;
            y = g.add(y, a)?;
            let n = g.rms_norm_rows(y, NORM_EPS)?;
            let c = self.attention_block(
                g,
                n,
                memory,
                &layer.cross_attn,
                BlockKind::DecoderCrossAttention,
                l,
                size,
                false,
                Some(src_keep),
                adapters,
            )?;
            y = g.add(y, c)?;
            let n = g.rms_norm_rows(y, NORM_EPS)?;
            let f =
                self.feed_forward(g, n, &layer.ff, BlockKind::DecoderFeedForward, l, adapters)?;
            y = g.add(y, f)?;
        }
        let n = g.rms_norm_rows(y, NORM_EPS)?;
        let head = g.constant(&self.head)?;
        Ok(g.matmul(n, head)?)
    }

    /// Teacher-forced forward pass with masked cross-entropy over target tokens.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        adapters: &mut dyn AdapterSource,
    ) -> Result<ForwardOutput> {
        let memory = self.encode(g, batch, adapters)?;
        let logits = self.decode_logits(
            g,
            memory,
            &batch.src_keep,
            &batch.dec_in,
            batch.size,
            batch.tgt_len,
            adapters,
        )?;
        let loss = g.masked_softmax_cross_entropy(logits, &batch.targets)?;
        Ok(ForwardOutput { loss, logits })
    }

    /// Greedy decoding of up to `max_len` tokens per example (excluding `<eos>`).
    pub fn greedy_decode(
        &self,
        g: &mut Graph,
        batch: &Batch,
        max_len: usize,
        adapters: &mut dyn AdapterSource,
    ) -> Result<Vec<Vec<usize>>> {
        let memory = self.encode(g, batch, adapters)?;
        let size = batch.size;
        let v = self.config.vocab_size;
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; size];
        let mut done = vec![false; size];
        let steps = (max_len + 1).min(self.config.max_seq_len);
        for t in 1..=steps {
            let dec_in: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
            let logits =
                self.decode_logits(g, memory, &batch.src_keep, &dec_in, size, t, adapters)?;
            let vals = g.value(logits);
            for b in 0..size {
                let row = &vals[(b * t + t - 1) * v..(b * t + t) * v];
                let next = argmax(row);
                if !done[b] && next == EOS {
                    done[b] = true;
                }
                seqs[b].push(if done[b] { EOS } else { next });
            }
            if done.iter().all(|d| *d) {
                break;
            }
        }
        Ok(seqs
            .into_iter()
            .map(|s| s[1..].iter().copied().take_while(|&t| t != EOS).collect())
            .collect())
    }

    /// Mean-pooled encoder states of the bare backbone, one vector per batch.
    pub fn mean_embedding(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let memory = self.encode(&mut g, batch, &mut NoAdapters)?;
        let d = self.config.model_dim;
        let vals = g.value(memory);
        let mut acc = vec![0.0; d];
        let mut count = 0.0;
        for (row, keep) in vals.chunks(d).zip(&batch.src_keep) {
            if *keep {
                acc.iter_mut().zip(row).for_each(|(a, x)| *a += x);
                count += 1.0;
            }
        }
        acc.iter_mut().for_each(|a| *a /= count);
        Ok(acc)
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
