//! Masked-autoencoder vision transformer.
//!
//! The encoder only ever sees the visible patches. Its outputs are projected to
//! the decoder width, a learned mask token fills every masked position, and a
//! light decoder predicts the pixels of every patch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canvas::{patchify, CanvasLayout, ComposedSample};
use crate::error::{Error, Result};
use crate::nn::{batch_rows, trunc_normal, Graph, LossScope, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEmbedding {
    /// Fixed 2-D sine/cosine table (no parameters).
    #[default]
    Sinusoidal,
    /// Trainable table, one row per patch position.
    Learned,
}

/// Architecture hyper-parameters. Nothing here depends on the label vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_dim: usize,
    pub seq_len: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub pos_embedding: PosEmbedding,
}

impl ModelConfig {
    /// Roughly 1M parameters; trains on a laptop CPU.
    pub fn desk(layout: &CanvasLayout) -> Self {
        Self {
            patch_dim: layout.patch_dim(),
            seq_len: layout.num_patches(),
            encoder_dim: 128,
            encoder_depth: 4,
            encoder_heads: 4,
            decoder_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            mlp_ratio: 4,
            pos_embedding: PosEmbedding::Sinusoidal,
        }
    }

    /// ViT-Base encoder with an 8-block 512-wide decoder.
    pub fn base(layout: &CanvasLayout) -> Self {
        Self {
            patch_dim: layout.patch_dim(),
            seq_len: layout.num_patches(),
            encoder_dim: 768,
            encoder_depth: 12,
            encoder_heads: 12,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            mlp_ratio: 4,
            pos_embedding: PosEmbedding::Sinusoidal,
        }
    }

    pub fn grid_side(&self) -> usize {
        (self.seq_len as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_dim == 0 || self.seq_len == 0 || self.encoder_dim == 0 || self.decoder_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.encoder_heads == 0 || self.encoder_dim % self.encoder_heads != 0 {
            return bad(format!("encoder_dim {} not divisible by {} heads", self.encoder_dim, self.encoder_heads));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return bad(format!("decoder_dim {} not divisible by {} heads", self.decoder_dim, self.decoder_heads));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.pos_embedding == PosEmbedding::Sinusoidal {
            let g = self.grid_side();
            if g * g != self.seq_len {
                return bad(format!("sinusoidal positions need a square grid, seq_len = {}", self.seq_len));
            }
            if self.encoder_dim % 4 != 0 || self.decoder_dim % 4 != 0 {
                return bad("sinusoidal positions need widths divisible by 4".into());
            }
        }
        Ok(())
    }

    /// Errors unless this model fits patches cut by `layout`.
    pub fn check_layout(&self, layout: &CanvasLayout) -> Result<()> {
        if self.seq_len != layout.num_patches() || self.patch_dim != layout.patch_dim() {
            return Err(Error::ConfigMismatch(format!(
                "model expects {} patches of {} values, layout produces {} of {}",
                self.seq_len,
                self.patch_dim,
                layout.num_patches(),
                layout.patch_dim()
            )));
        }
        Ok(())
    }
}

fn block_shapes(prefix: &str, d: usize, ratio: usize, out: &mut Vec<(String, Vec<usize>)>) {
    let h = d * ratio;
    let mut add = |n: &str, s: Vec<usize>| out.push((format!("{prefix}.{n}"), s));
    add("norm1.weight", vec![d]);
    add("norm1.bias", vec![d]);
    for p in ["q", "k", "v", "proj"] {
        add(&format!("attn.{p}.weight"), vec![d, d]);
        add(&format!("attn.{p}.bias"), vec![d]);
    }
    add("norm2.weight", vec![d]);
    add("norm2.bias", vec![d]);
    add("mlp.fc1.weight", vec![d, h]);
    add("mlp.fc1.bias", vec![h]);
    add("mlp.fc2.weight", vec![h, d]);
    add("mlp.fc2.bias", vec![d]);
}

/// Name and shape of every parameter, in registration order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (e, d, pd) = (config.encoder_dim, config.decoder_dim, config.patch_dim);
    let learned = config.pos_embedding == PosEmbedding::Learned;
    let mut v = vec![("patch_embed.weight".to_string(), vec![pd, e]), ("patch_embed.bias".to_string(), vec![e])];
    if learned {
        v.push(("encoder.pos_embed".into(), vec![config.seq_len, e]));
    }
    for i in 0..config.encoder_depth {
        block_shapes(&format!("encoder.blocks.{i}"), e, config.mlp_ratio, &mut v);
    }
    v.push(("encoder.norm.weight".into(), vec![e]));
    v.push(("encoder.norm.bias".into(), vec![e]));
    v.push(("decoder.embed.weight".into(), vec![e, d]));
    v.push(("decoder.embed.bias".into(), vec![d]));
    v.push(("decoder.mask_token".into(), vec![1, d]));
    if learned {
        v.push(("decoder.pos_embed".into(), vec![config.seq_len, d]));
    }
    for i in 0..config.decoder_depth {
        block_shapes(&format!("decoder.blocks.{i}"), d, config.mlp_ratio, &mut v);
    }
    v.push(("decoder.norm.weight".into(), vec![d]));
    v.push(("decoder.norm.bias".into(), vec![d]));
    v.push(("decoder.head.weight".into(), vec![d, pd]));
    v.push(("decoder.head.bias".into(), vec![pd]));
    v
}

/// Exact number of trainable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    param_shapes(config).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Sine/cosine table for a `grid x grid` layout, `[grid*grid, dim]`.
///
/// The first half of each row encodes the grid row, the second half the column.
pub fn sincos_2d<T: Scalar>(grid: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let quarter = half / 2;
    Tensor::from_fn(&[grid * grid, dim], |i| {
        let (pos, j) = (i / dim, i % dim);
        let (coord, k) = if j < half { (pos / grid, j) } else { (pos % grid, j - half) };
        let (f, is_cos) = if k < quarter { (k, false) } else { (k - quarter, true) };
        let omega = 1.0 / 10000f64.powf(f as f64 / quarter as f64);
        let a = coord as f64 * omega;
        T::of(if is_cos { a.cos() } else { a.sin() })
    })
}

#[derive(Debug, Clone)]
struct BlockIds {
    norm1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

impl BlockIds {
    fn lookup(store: &ParamStore<impl Scalar>, prefix: &str) -> Self {
        let pair = |n: &str| {
            let get = |s: &str| store.find(&format!("{prefix}.{n}.{s}")).expect("registered parameter");
            (get("weight"), get("bias"))
        };
        Self {
            norm1: pair("norm1"),
            q: pair("attn.q"),
            k: pair("attn.k"),
            v: pair("attn.v"),
            proj: pair("attn.proj"),
            norm2: pair("norm2"),
            fc1: pair("mlp.fc1"),
            fc2: pair("mlp.fc2"),
        }
    }
}

#[derive(Debug, Clone)]
struct Ids {
    patch_embed: (ParamId, ParamId),
    enc_pos: Option<ParamId>,
    enc_blocks: Vec<BlockIds>,
    enc_norm: (ParamId, ParamId),
    dec_embed: (ParamId, ParamId),
    mask_token: ParamId,
    dec_pos: Option<ParamId>,
    dec_blocks: Vec<BlockIds>,
    dec_norm: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

/// Indices of the patches not in `masked`, ascending.
pub fn visible_patches(seq_len: usize, masked: &[usize]) -> Result<Vec<usize>> {
    let mut is_masked = vec![false; seq_len];
    for &m in masked {
        if m >= seq_len {
            return Err(Error::ConfigMismatch(format!("masked patch {m} outside sequence of {seq_len}")));
        }
        is_masked[m] = true;
    }
    let vis: Vec<usize> = (0..seq_len).filter(|&i| !is_masked[i]).collect();
    if vis.is_empty() {
        return Err(Error::ConfigMismatch("every patch is masked".into()));
    }
    Ok(vis)
}

/// Something that predicts every patch of a canvas from its visible patches.
pub trait Reconstructor<T: Scalar> {
    /// Predicts `[seq, patch_dim]` for each input; `masked` patches are unseen.
    fn reconstruct_batch(&self, patches: &[Tensor<T>], masked: &[usize]) -> Result<Vec<Tensor<T>>>;
}

/// The encoder/decoder and its parameters.
#[derive(Debug, Clone)]
pub struct MaeModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: Ids,
    enc_pos_table: Tensor<T>,
    dec_pos_table: Tensor<T>,
}

impl<T: Scalar> MaeModel<T> {
    /// Freshly initialized model, reproducible from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&config) {
            let is_norm_weight = name.contains("norm") && name.ends_with(".weight");
            let value = if is_norm_weight {
                Tensor::full(&shape, T::one())
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                trunc_normal(&shape, INIT_STD, &mut rng)
            };
            params.register(name, value)?;
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter store, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "config needs {} parameters, store has {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(params.iter()) {
            if &p.name != name || p.value.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {:?} {:?} where config expects {name:?} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let id = |n: &str| params.find(n).expect("checked above");
        let pair = |n: &str| (id(&format!("{n}.weight")), id(&format!("{n}.bias")));
        let learned = config.pos_embedding == PosEmbedding::Learned;
        let ids = Ids {
            patch_embed: pair("patch_embed"),
            enc_pos: learned.then(|| id("encoder.pos_embed")),
            enc_blocks: (0..config.encoder_depth)
                .map(|i| BlockIds::lookup(&params, &format!("encoder.blocks.{i}")))
                .collect(),
            enc_norm: pair("encoder.norm"),
            dec_embed: pair("decoder.embed"),
            mask_token: id("decoder.mask_token"),
            dec_pos: learned.then(|| id("decoder.pos_embed")),
            dec_blocks: (0..config.decoder_depth)
                .map(|i| BlockIds::lookup(&params, &format!("decoder.blocks.{i}")))
                .collect(),
            dec_norm: pair("decoder.norm"),
            head: pair("decoder.head"),
        };
        let (enc_pos_table, dec_pos_table) = if learned {
            (Tensor::zeros(&[0]), Tensor::zeros(&[0]))
        } else {
            let g = config.grid_side();
            (sincos_2d(g, config.encoder_dim), sincos_2d(g, config.decoder_dim))
        };
        Ok(Self { config, params, ids, enc_pos_table, dec_pos_table })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Records the forward pass for a batch; returns `[batch * seq, patch_dim]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, batch: &[Tensor<T>], masked: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        let (seq, pd) = (cfg.seq_len, cfg.patch_dim);
        for p in batch {
            if p.shape() != [seq, pd] {
                return Err(Error::ConfigMismatch(format!(
                    "input patches {:?}, model expects [{seq}, {pd}]",
                    p.shape()
                )));
            }
        }
        let b = batch.len();
        if b == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        let vis = visible_patches(seq, masked)?;
        let nv = vis.len();

        let mut x_vis = Vec::with_capacity(b * nv * pd);
        for p in batch {
            for &i in &vis {
                x_vis.extend_from_slice(p.row(i));
            }
        }
        let x = g.constant(Tensor::new(&[b * nv, pd], x_vis)?);
        let vis_tiled: Vec<usize> = (0..b).flat_map(|_| vis.iter().copied()).collect();
        let all_tiled: Vec<usize> = (0..b).flat_map(|_| 0..seq).collect();

        let pe = self.ids.patch_embed;
        let (w, bias) = (g.param(&self.params, pe.0), g.param(&self.params, pe.1));
        let mut h = g.linear(x, w, Some(bias))?;
        let pos = self.positions(g, self.ids.enc_pos, &self.enc_pos_table, &vis_tiled)?;
        h = g.add(h, pos)?;
        for blk in &self.ids.enc_blocks {
            h = self.block(g, h, blk, cfg.encoder_heads, nv)?;
        }
        h = self.norm(g, h, self.ids.enc_norm)?;

        let de = self.ids.dec_embed;
        let (w, bias) = (g.param(&self.params, de.0), g.param(&self.params, de.1));
        let h = g.linear(h, w, Some(bias))?;
        let token = g.param(&self.params, self.ids.mask_token);
        let pool = g.concat(&[h, token], 0)?;
        let token_row = b * nv;
        let mut slot = vec![token_row; seq];
        for (j, &i) in vis.iter().enumerate() {
            slot[i] = j;
        }
        let index: Vec<usize> = (0..b)
            .flat_map(|bi| slot.iter().map(move |&s| if s == token_row { s } else { bi * nv + s }))
            .collect();
        let mut d = g.gather_rows(pool, &index)?;
        let pos = self.positions(g, self.ids.dec_pos, &self.dec_pos_table, &all_tiled)?;
        d = g.add(d, pos)?;
        for blk in &self.ids.dec_blocks {
            d = self.block(g, d, blk, cfg.decoder_heads, seq)?;
        }
        d = self.norm(g, d, self.ids.dec_norm)?;
        let (w, bias) = (g.param(&self.params, self.ids.head.0), g.param(&self.params, self.ids.head.1));
        g.linear(d, w, Some(bias))
    }

    fn positions(&self, g: &mut Graph<T>, learned: Option<ParamId>, table: &Tensor<T>, rows: &[usize]) -> Result<Var> {
        match learned {
            Some(id) => {
                let p = g.param(&self.params, id);
                g.gather_rows(p, rows)
            }
            None => {
                let t = g.constant(table.clone());
                let out = g.gather_rows(t, rows)?;
                Ok(out)
            }
        }
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, ids: (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (g.param(&self.params, ids.0), g.param(&self.params, ids.1));
        g.layer_norm(x, w, b, LAYER_NORM_EPS)
    }

    fn lin(&self, g: &mut Graph<T>, x: Var, ids: (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (g.param(&self.params, ids.0), g.param(&self.params, ids.1));
        g.linear(x, w, Some(b))
    }

    fn block(&self, g: &mut Graph<T>, x: Var, ids: &BlockIds, heads: usize, seq: usize) -> Result<Var> {
        let h = self.norm(g, x, ids.norm1)?;
        let q = self.lin(g, h, ids.q)?;
        let k = self.lin(g, h, ids.k)?;
        let v = self.lin(g, h, ids.v)?;
        let a = g.attention(q, k, v, heads, seq)?;
        let a = self.lin(g, a, ids.proj)?;
        let x = g.add(x, a)?;
        let h = self.norm(g, x, ids.norm2)?;
        let h = self.lin(g, h, ids.fc1)?;
        let h = g.gelu(h);
        let h = self.lin(g, h, ids.fc2)?;
        g.add(x, h)
    }

    /// Records the reconstruction loss for a batch of `(input, target)` patch tensors.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        inputs: &[Tensor<T>],
        targets: &[Tensor<T>],
        masked: &[usize],
        scope: LossScope,
    ) -> Result<Var> {
        if inputs.len() != targets.len() {
            return Err(Error::ShapeMismatch(format!("{} inputs vs {} targets", inputs.len(), targets.len())));
        }
        let pred = self.forward_graph(g, inputs, masked)?;
        let (seq, pd) = (self.config.seq_len, self.config.patch_dim);
        let mut tdata = Vec::with_capacity(targets.len() * seq * pd);
        for t in targets {
            if t.shape() != [seq, pd] {
                return Err(Error::ShapeMismatch(format!("target {:?}", t.shape())));
            }
            tdata.extend_from_slice(t.data());
        }
        let target = g.constant(Tensor::new(&[targets.len() * seq, pd], tdata)?);
        let rows = match scope {
            LossScope::Masked => batch_rows(masked, seq, targets.len()),
            LossScope::Full => (0..targets.len() * seq).collect(),
        };
        g.masked_mse(pred, target, &rows)
    }

    /// Reconstruction of one composed sample, `[seq, patch_dim]`.
    pub fn forward(&self, sample: &ComposedSample<T>, layout: &CanvasLayout) -> Result<Tensor<T>> {
        self.config.check_layout(layout)?;
        let p = patchify(&sample.canvas, layout)?;
        let mut out = self.reconstruct_batch(&[p], &sample.masked_patch_ids)?;
        Ok(out.pop().expect("one output per input"))
    }

    /// Reconstruction loss of one composed sample.
    pub fn loss(&self, sample: &ComposedSample<T>, layout: &CanvasLayout, scope: LossScope) -> Result<T> {
        self.config.check_layout(layout)?;
        let input = patchify(&sample.canvas, layout)?;
        let target = patchify(&sample.target, layout)?;
        let mut g = Graph::new();
        let l = self.loss_graph(&mut g, &[input], &[target], &sample.masked_patch_ids, scope)?;
        g.value(l).item()
    }
}

impl<T: Scalar> Reconstructor<T> for MaeModel<T> {
    fn reconstruct_batch(&self, patches: &[Tensor<T>], masked: &[usize]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, patches, masked)?;
        let (seq, pd) = (self.config.seq_len, self.config.patch_dim);
        let data = g.value(out).data();
        (0..patches.len())
            .map(|b| Tensor::new(&[seq, pd], data[b * seq * pd..(b + 1) * seq * pd].to_vec()))
            .collect()
    }
}
