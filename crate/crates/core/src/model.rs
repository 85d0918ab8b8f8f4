//! Generator / discriminator encoders with disentangled attention.
//!
//! Both encoders read token embeddings from one shared table `E_G`. The
//! generator uses it directly (through a width projection) and ties its
//! output layer back to it. The discriminator sees
//! `stop_gradient(E_G) + E_Delta`, so the RTD loss can only move `E_Delta`.
//! A single relative-position table `P` (`2k` rows) serves both encoders
//! and every layer; inside each encoder one query/key projection pair of
//! `P` is shared by all layers.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{derive, seeded};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-7;
pub const INIT_STD: f64 = 0.02;

pub const E_G: &str = "embeddings.E_G";
pub const E_DELTA: &str = "embeddings.E_Delta";
pub const E_D: &str = "embeddings.E_D";
pub const REL_POS: &str = "embeddings.rel_pos";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    /// Relative distance bound `k`; the position table has `2k` rows.
    pub max_rel_distance: usize,
    pub generator_hidden: usize,
    pub generator_layers: usize,
    pub conv_kernel: usize,
}

impl ModelConfig {
    /// 12 layers, 12 heads, 768 wide, 32k vocabulary, generator projected to 256.
    pub fn base() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            hidden: 768,
            vocab_size: 32_000,
            max_rel_distance: 256,
            generator_hidden: 256,
            generator_layers: 12,
            conv_kernel: 3,
        }
    }

    /// Small model used by the gradient checks.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            hidden: 16,
            vocab_size: 37,
            max_rel_distance: 4,
            generator_hidden: 8,
            generator_layers: 2,
            conv_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.generator_layers == 0 {
            return fail("layer counts must be positive".into());
        }
        if self.n_heads == 0 || !self.hidden.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden {} is not divisible by n_heads {}",
                self.hidden, self.n_heads
            ));
        }
        if self.generator_hidden == 0 || self.generator_hidden > self.hidden {
            return fail(format!(
                "generator_hidden {} must be in 1..={}",
                self.generator_hidden, self.hidden
            ));
        }
        if !self.generator_hidden.is_multiple_of(self.head_dim()) {
            return fail(format!(
                "generator_hidden {} is not a multiple of head_dim {}",
                self.generator_hidden,
                self.head_dim()
            ));
        }
        if self.max_rel_distance == 0 {
            return fail("max_rel_distance must be at least 1".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.vocab_size <= crate::data::RESERVED.len() {
            return fail(format!("vocab_size {} is too small", self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// The generator keeps the discriminator's head width.
    pub fn generator_heads(&self) -> usize {
        self.generator_hidden / self.head_dim()
    }

    pub fn rel_rows(&self) -> usize {
        2 * self.max_rel_distance
    }

    /// `(key, value)` pairs in key order.
    pub fn entries(&self) -> [(&'static str, usize); 8] {
        [
            ("conv_kernel", self.conv_kernel),
            ("generator_hidden", self.generator_hidden),
            ("generator_layers", self.generator_layers),
            ("hidden", self.hidden),
            ("max_rel_distance", self.max_rel_distance),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("vocab_size", self.vocab_size),
        ]
    }
}

/// Relative-position bucket of query `i` and key `j`: the offset `i - j`
/// clamped into `[0, 2k)`.
pub fn relative_bucket(i: usize, j: usize, k: usize) -> usize {
    let d = i as i64 - j as i64;
    let k = k as i64;
    if d <= -k {
        0
    } else if d >= k {
        (2 * k - 1) as usize
    } else {
        (d + k) as usize
    }
}

/// `grid[r·len + c] = relative_bucket(r, c, k)`.
pub fn relative_grid(len: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(len * len);
    for r in 0..len {
        for c in 0..len {
            out.push(relative_bucket(r, c, k));
        }
    }
    out
}

/// How the discriminator's token embeddings relate to the generator's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbeddingSharing {
    /// `stop_gradient(E_G) + E_Delta`.
    #[default]
    GradientDisentangled,
    /// `E_G + E_Delta` with no gradient stop; only used as an ablation.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionProjections {
    /// One query/key projection pair per encoder.
    #[default]
    Shared,
    /// A separate pair per layer; reference model for the sharing audit.
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelOptions {
    pub sharing: EmbeddingSharing,
    pub positions: PositionProjections,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Discriminator => "discriminator",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: Norm,
    ffn_inner: Linear,
    ffn_outer: Linear,
    ffn_norm: Norm,
    rel_query: ParamId,
    rel_key: ParamId,
}

#[derive(Debug, Clone)]
struct Encoder {
    width: usize,
    heads: usize,
    embed_norm: Norm,
    layers: Vec<Layer>,
    conv: Linear,
    conv_norm: Norm,
}

struct Init {
    seed: u64,
}

impl Init {
    /// Each parameter draws from a stream keyed by its name, so models that
    /// differ only in structure elsewhere still agree on shared names.
    fn normal<T: Real>(&self, name: &str, shape: &[usize]) -> Tensor<T> {
        let mut rng = seeded(derive(self.seed, name_hash(name)));
        let dist = Normal::new(0.0f64, INIT_STD).expect("valid deviation");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
        Tensor::new(shape, data).expect("shape matches")
    }
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

struct Builder<'s, T: Real> {
    store: &'s mut ParamStore<T>,
    init: Init,
}

impl<T: Real> Builder<'_, T> {
    fn weight(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let t = self.init.normal(&name, shape);
        self.store.register(name, t, false)
    }

    fn zeros(&mut self, name: String, shape: &[usize], decay_exempt: bool) -> Result<ParamId> {
        self.store.register(name, Tensor::zeros(shape), decay_exempt)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.weight(format!("{name}.weight"), &[fan_in, fan_out])?,
            bias: self.zeros(format!("{name}.bias"), &[fan_out], true)?,
        })
    }

    fn norm(&mut self, name: &str, width: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self
                .store
                .register(format!("{name}.gain"), Tensor::filled(&[width], T::ONE), true)?,
            bias: self.zeros(format!("{name}.bias"), &[width], true)?,
        })
    }

    fn encoder(
        &mut self,
        cfg: &ModelConfig,
        prefix: &str,
        width: usize,
        layers: usize,
        positions: PositionProjections,
    ) -> Result<Encoder> {
        let heads = width / cfg.head_dim();
        let embed_norm = self.norm(&format!("{prefix}.embed_norm"), width)?;
        let shared = match positions {
            PositionProjections::Shared => Some((
                self.weight(format!("{prefix}.rel_query.weight"), &[cfg.hidden, width])?,
                self.weight(format!("{prefix}.rel_key.weight"), &[cfg.hidden, width])?,
            )),
            PositionProjections::PerLayer => None,
        };
        let mut out = Vec::with_capacity(layers);
        for i in 0..layers {
            let p = format!("{prefix}.layer{i}");
            let (rel_query, rel_key) = match shared {
                Some(pair) => pair,
                None => (
                    self.weight(format!("{p}.rel_query.weight"), &[cfg.hidden, width])?,
                    self.weight(format!("{p}.rel_key.weight"), &[cfg.hidden, width])?,
                ),
            };
            out.push(Layer {
                query: self.linear(&format!("{p}.attn.query"), width, width)?,
                key: self.linear(&format!("{p}.attn.key"), width, width)?,
                value: self.linear(&format!("{p}.attn.value"), width, width)?,
                output: self.linear(&format!("{p}.attn.output"), width, width)?,
                attn_norm: self.norm(&format!("{p}.attn.norm"), width)?,
                ffn_inner: self.linear(&format!("{p}.ffn.inner"), width, 4 * width)?,
                ffn_outer: self.linear(&format!("{p}.ffn.outer"), 4 * width, width)?,
                ffn_norm: self.norm(&format!("{p}.ffn.norm"), width)?,
                rel_query,
                rel_key,
            });
        }
        let conv = Linear {
            weight: self.weight(
                format!("{prefix}.conv.weight"),
                &[cfg.conv_kernel, width, width],
            )?,
            bias: self.zeros(format!("{prefix}.conv.bias"), &[width], true)?,
        };
        let conv_norm = self.norm(&format!("{prefix}.conv.norm"), width)?;
        Ok(Encoder {
            width,
            heads,
            embed_norm,
            layers: out,
            conv,
            conv_norm,
        })
    }
}

/// Geometry and padding of one batch, flattened to `batch·seq_len` rows.
#[derive(Debug, Clone)]
pub struct RowLayout {
    pub batch: usize,
    pub seq_len: usize,
    /// `batch·seq_len` flags; false marks padding.
    pub valid: Vec<bool>,
}

impl RowLayout {
    pub fn new(batch: usize, seq_len: usize, attention_mask: &[u8]) -> Result<Self> {
        if batch == 0 || seq_len == 0 || attention_mask.len() != batch * seq_len {
            return Err(Error::Shape {
                op: "row_layout",
                lhs: vec![batch, seq_len],
                rhs: vec![attention_mask.len()],
            });
        }
        Ok(Self {
            batch,
            seq_len,
            valid: attention_mask.iter().map(|&m| m == 1).collect(),
        })
    }

    pub fn unpadded(batch: usize, seq_len: usize) -> Self {
        Self {
            batch,
            seq_len,
            valid: vec![true; batch * seq_len],
        }
    }

    fn row_valid(&self, b: usize) -> &[bool] {
        &self.valid[b * self.seq_len..(b + 1) * self.seq_len]
    }

    fn mask_factors<T: Real>(&self) -> Vec<T> {
        self.valid
            .iter()
            .map(|&v| if v { T::ONE } else { T::ZERO })
            .collect()
    }
}

/// Attention probabilities recorded during a forward pass, one
/// `seq_len × seq_len` node per (layer, batch row, head).
#[derive(Debug, Default)]
pub struct AttentionProbe {
    pub probs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    config: ModelConfig,
    options: ModelOptions,
    store: ParamStore<T>,
    e_g: ParamId,
    e_delta: ParamId,
    rel_pos: ParamId,
    gen_proj: ParamId,
    gen_out_bias: ParamId,
    generator: Encoder,
    discriminator: Encoder,
    rtd_head: Linear,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_options(config, seed, ModelOptions::default())
    }

    pub fn with_options(config: ModelConfig, seed: u64, options: ModelOptions) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            init: Init { seed },
        };
        let (v, h, gh) = (config.vocab_size, config.hidden, config.generator_hidden);
        let e_g = b.weight(E_G.to_string(), &[v, h])?;
        let e_delta = b.zeros(E_DELTA.to_string(), &[v, h], false)?;
        let rel_pos = b.weight(REL_POS.to_string(), &[config.rel_rows(), h])?;
        let gen_proj = b.weight("generator.embed_proj.weight".into(), &[h, gh])?;
        let gen_out_bias = b.zeros("generator.lm_head.bias".into(), &[v], true)?;
        let generator = b.encoder(
            &config,
            "generator",
            gh,
            config.generator_layers,
            options.positions,
        )?;
        let discriminator =
            b.encoder(&config, "discriminator", h, config.n_layers, options.positions)?;
        let rtd_head = b.linear("discriminator.rtd_head", h, 1)?;
        Ok(Self {
            config,
            options,
            store,
            e_g,
            e_delta,
            rel_pos,
            gen_proj,
            gen_out_bias,
            generator,
            discriminator,
            rtd_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn options(&self) -> ModelOptions {
        self.options
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn e_g(&self) -> ParamId {
        self.e_g
    }

    pub fn e_delta(&self) -> ParamId {
        self.e_delta
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            options: self.options,
            store: self.store.cast(),
            e_g: self.e_g,
            e_delta: self.e_delta,
            rel_pos: self.rel_pos,
            gen_proj: self.gen_proj,
            gen_out_bias: self.gen_out_bias,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            rtd_head: self.rtd_head,
        }
    }

    /// Replaces every parameter value from `(name, tensor)` pairs. All
    /// names must be present with matching shapes.
    pub fn load_values<'n>(
        &mut self,
        values: impl IntoIterator<Item = (&'n str, Tensor<T>)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.store.len()];
        for (name, t) in values {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
            let p = self.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let (_, p) = self.store.iter().nth(i).expect("in range");
            return Err(Error::contract(format!("missing parameter `{}`", p.name)));
        }
        Ok(())
    }

    /// Names of the parameters the generator path owns (excluding the
    /// shared `E_G` and `P`).
    pub fn is_generator_param(name: &str) -> bool {
        name.starts_with("generator.")
    }

    pub fn is_discriminator_param(name: &str) -> bool {
        name.starts_with("discriminator.")
    }

    fn encoder(&self, role: Role) -> &Encoder {
        match role {
            Role::Generator => &self.generator,
            Role::Discriminator => &self.discriminator,
        }
    }

    /// MLM logits `[batch·seq_len × vocab]` for a masked batch; row
    /// `b·seq_len + t` belongs to position `t` of sequence `b`.
    pub fn generator_forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        ids: &[u32],
        rows: &RowLayout,
        probe: Option<&mut AttentionProbe>,
    ) -> Result<Var> {
        let ids = self.check_ids(ids)?;
        let e_g = tape.param(&self.store, self.e_g);
        let proj = tape.param(&self.store, self.gen_proj);
        let emb = tape.gather_rows(e_g, &ids)?;
        let x = tape.matmul(emb, proj)?;
        let h = self.encode(tape, Role::Generator, x, rows, probe)?;
        // Output layer tied to E_G through the same width projection.
        let back = tape.matmul_nt(h, proj)?;
        let logits = tape.matmul_nt(back, e_g)?;
        let bias = tape.param(&self.store, self.gen_out_bias);
        tape.add_bias(logits, bias)
    }

    /// Discriminator token embeddings.
    ///
    /// With gradient-disentangled sharing the rows are
    /// `stop_gradient(E_G[ids]) + E_Delta[ids]`. When `anchor` is given it
    /// stands in for the stopped `E_G` as a plain constant; finite-difference
    /// oracles use this to evaluate the stop-gradient semantics exactly.
    pub fn gdes_embed<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        ids: &[u32],
        anchor: Option<&'a Tensor<T>>,
    ) -> Result<Var> {
        let ids = self.check_ids(ids)?;
        let shared = match (self.options.sharing, anchor) {
            (EmbeddingSharing::Naive, _) => {
                let e_g = tape.param(&self.store, self.e_g);
                tape.gather_rows(e_g, &ids)?
            }
            (EmbeddingSharing::GradientDisentangled, Some(a)) => {
                let e_g = tape.constant_ref(a);
                tape.gather_rows(e_g, &ids)?
            }
            (EmbeddingSharing::GradientDisentangled, None) => {
                let e_g = tape.param(&self.store, self.e_g);
                let rows = tape.gather_rows(e_g, &ids)?;
                tape.stop_gradient(rows)
            }
        };
        let e_delta = tape.param(&self.store, self.e_delta);
        let delta = tape.gather_rows(e_delta, &ids)?;
        tape.add(shared, delta)
    }

    /// RTD logits `[batch × seq_len]`.
    pub fn discriminator_forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        ids: &[u32],
        rows: &RowLayout,
        anchor: Option<&'a Tensor<T>>,
        probe: Option<&mut AttentionProbe>,
    ) -> Result<Var> {
        let x = self.gdes_embed(tape, ids, anchor)?;
        let h = self.encode(tape, Role::Discriminator, x, rows, probe)?;
        let logits = self.linear(tape, h, self.rtd_head)?;
        tape.reshape(logits, &[rows.batch, rows.seq_len])
    }

    fn check_ids(&self, ids: &[u32]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| {
                let id = id as usize;
                if id < self.config.vocab_size {
                    Ok(id)
                } else {
                    Err(Error::Index {
                        what: "token id",
                        index: id,
                        bound: self.config.vocab_size,
                    })
                }
            })
            .collect()
    }

    fn linear<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, l: Linear) -> Result<Var> {
        let w = tape.param(&self.store, l.weight);
        let b = tape.param(&self.store, l.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn norm<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, n: Norm) -> Result<Var> {
        let g = tape.param(&self.store, n.gain);
        let b = tape.param(&self.store, n.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// Embedding norm, the layer stack and the first-layer convolution branch.
    fn encode<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        role: Role,
        x: Var,
        rows: &RowLayout,
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<Var> {
        let enc = self.encoder(role);
        let x = self.norm(tape, x, enc.embed_norm)?;
        let mut h = tape.scale_rows(x, rows.mask_factors())?;
        let grid = relative_grid(rows.seq_len, self.config.max_rel_distance);
        let p = tape.param(&self.store, self.rel_pos);
        let mut cached: Option<(ParamId, Var, Var)> = None;
        for (i, layer) in enc.layers.iter().enumerate() {
            let (pq, pk) = match cached {
                Some((id, q, k)) if id == layer.rel_query => (q, k),
                _ => {
                    let wq = tape.param(&self.store, layer.rel_query);
                    let wk = tape.param(&self.store, layer.rel_key);
                    let q = tape.matmul(p, wq)?;
                    let k = tape.matmul(p, wk)?;
                    cached = Some((layer.rel_query, q, k));
                    (q, k)
                }
            };
            let out = self.layer_forward(
                tape,
                enc,
                layer,
                h,
                rows,
                &grid,
                (pq, pk),
                probe.as_deref_mut(),
            )?;
            h = if i == 0 {
                let c = self.conv_branch(tape, enc, h, rows)?;
                tape.add(out, c)?
            } else {
                out
            };
        }
        Ok(h)
    }

    /// `layernorm(gelu(conv1d(input)))` over the token axis; padded rows
    /// are zeroed before the convolution.
    fn conv_branch<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        enc: &Encoder,
        input: Var,
        rows: &RowLayout,
    ) -> Result<Var> {
        let masked = tape.scale_rows(input, rows.mask_factors())?;
        let w = tape.param(&self.store, enc.conv.weight);
        let b = tape.param(&self.store, enc.conv.bias);
        let c = tape.conv1d(masked, w, b, rows.seq_len)?;
        let c = tape.gelu(c);
        self.norm(tape, c, enc.conv_norm)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        enc: &Encoder,
        layer: &Layer,
        x: Var,
        rows: &RowLayout,
        grid: &[usize],
        (pq, pk): (Var, Var),
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<Var> {
        let d = self.config.head_dim();
        let len = rows.seq_len;
        let q = self.linear(tape, x, layer.query)?;
        let k = self.linear(tape, x, layer.key)?;
        let v = self.linear(tape, x, layer.value)?;
        let scale = T::from_f64(1.0 / libm::sqrt(3.0 * d as f64));

        let mut per_row = Vec::with_capacity(rows.batch);
        for b in 0..rows.batch {
            let qb = tape.slice_rows(q, b * len, len)?;
            let kb = tape.slice_rows(k, b * len, len)?;
            let vb = tape.slice_rows(v, b * len, len)?;
            let mut heads = Vec::with_capacity(enc.heads);
            for hd in 0..enc.heads {
                let qc = tape.slice_cols(qb, hd * d, d)?;
                let kc = tape.slice_cols(kb, hd * d, d)?;
                let vc = tape.slice_cols(vb, hd * d, d)?;
                let qr = tape.slice_cols(pq, hd * d, d)?;
                let kr = tape.slice_cols(pk, hd * d, d)?;
                // content → content
                let c2c = tape.matmul_nt(qc, kc)?;
                // content → position: Qc(i)·Kr(δ(i,j))
                let c2p = tape.matmul_nt(qc, kr)?;
                let c2p = tape.gather_rel(c2p, grid, len)?;
                // position → content: Kc(j)·Qr(δ(j,i))
                let p2c = tape.matmul_nt(kc, qr)?;
                let p2c = tape.gather_rel(p2c, grid, len)?;
                let p2c = tape.transpose(p2c)?;
                let s = tape.add(c2c, c2p)?;
                let s = tape.add(s, p2c)?;
                let s = tape.scale(s, scale);
                let probs = tape.masked_softmax_rows(s, rows.row_valid(b))?;
                if let Some(p) = probe.as_deref_mut() {
                    p.probs.push(probs);
                }
                heads.push(tape.matmul(probs, vc)?);
            }
            per_row.push(tape.concat_cols(&heads)?);
        }
        let ctx = tape.concat_rows(&per_row)?;
        let attn = self.linear(tape, ctx, layer.output)?;
        let h = tape.add(x, attn)?;
        let h = self.norm(tape, h, layer.attn_norm)?;

        let f = self.linear(tape, h, layer.ffn_inner)?;
        let f = tape.gelu(f);
        let f = self.linear(tape, f, layer.ffn_outer)?;
        let out = tape.add(h, f)?;
        self.norm(tape, out, layer.ffn_norm)
    }

    /// One disentangled-attention block (attention, residual, norm,
    /// feed-forward) of `role`'s encoder `layer` applied to `x`
    /// `[batch·seq_len × width]`. Probabilities are recorded in `probe`.
    pub fn attention_block<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        role: Role,
        layer: usize,
        x: Var,
        rows: &RowLayout,
        probe: Option<&mut AttentionProbe>,
    ) -> Result<Var> {
        let enc = self.encoder(role);
        let l = enc
            .layers
            .get(layer)
            .ok_or(Error::Index {
                what: "encoder layer",
                index: layer,
                bound: enc.layers.len(),
            })?
            .clone();
        let grid = relative_grid(rows.seq_len, self.config.max_rel_distance);
        let p = tape.param(&self.store, self.rel_pos);
        let wq = tape.param(&self.store, l.rel_query);
        let wk = tape.param(&self.store, l.rel_key);
        let pq = tape.matmul(p, wq)?;
        let pk = tape.matmul(p, wk)?;
        self.layer_forward(tape, enc, &l, x, rows, &grid, (pq, pk), probe)
    }

    /// The convolution branch of `role`'s first layer applied to `x`.
    pub fn conv_branch_forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        role: Role,
        x: Var,
        rows: &RowLayout,
    ) -> Result<Var> {
        self.conv_branch(tape, self.encoder(role), x, rows)
    }

    /// Width of `role`'s encoder.
    pub fn width(&self, role: Role) -> usize {
        self.encoder(role).width
    }

    /// Parameter names of the relative-position projections in `role`'s
    /// encoder, one entry per distinct storage.
    pub fn position_projection_names(&self, role: Role) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut seen: Vec<ParamId> = Vec::new();
        for l in &self.encoder(role).layers {
            if !seen.contains(&l.rel_query) {
                seen.push(l.rel_query);
                out.push((
                    self.store.get(l.rel_query).name.clone(),
                    self.store.get(l.rel_key).name.clone(),
                ));
            }
        }
        out
    }
}

/// Final discriminator embedding table `E_G + E_Delta`.
pub fn finalize_embeddings<T: Real>(e_g: &Tensor<T>, e_delta: &Tensor<T>) -> Result<Tensor<T>> {
    if e_g.shape() != e_delta.shape() {
        return Err(Error::Shape {
            op: "finalize_embeddings",
            lhs: e_g.shape().to_vec(),
            rhs: e_delta.shape().to_vec(),
        });
    }
    let data = e_g
        .data()
        .iter()
        .zip(e_delta.data())
        .map(|(&a, &b)| a + b)
        .collect();
    Tensor::new(e_g.shape(), data)
}

/// Discriminator-only parameter set: every discriminator parameter, the
/// position table, and `E_D` in place of `E_G`/`E_Delta`, sorted by name.
pub fn discriminator_export<T: Real>(model: &Model<T>) -> Result<Vec<(String, Tensor<T>)>> {
    let store = model.params();
    let e_d = finalize_embeddings(&store.get(model.e_g).value, &store.get(model.e_delta).value)?;
    let mut out: Vec<(String, Tensor<T>)> = store
        .iter()
        .filter(|(_, p)| Model::<T>::is_discriminator_param(&p.name) || p.name == REL_POS)
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    out.push((E_D.to_string(), e_d));
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
