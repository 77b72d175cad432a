//! Bidirectional transformer over a class token followed by a grid of
//! visual tokens.
//!
//! A single embedding table holds, in order, the `K` visual codes, the mask
//! token, the `C` class labels and a null class used for unconditional
//! passes. The head scores every position against that same table and keeps
//! only the first `K` columns.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AttentionDims, ParamId, ParamSet, Scalar, Tape, Tensor, Var};

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub dropout: f32,
    pub codebook_size: usize,
    pub num_classes: usize,
    pub grid_height: usize,
    pub grid_width: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            hidden_dim: 128,
            depth: 4,
            heads: 4,
            mlp_dim: 512,
            dropout: 0.1,
            codebook_size: 64,
            num_classes: 2,
            grid_height: 8,
            grid_width: 8,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.mlp_dim < self.hidden_dim {
            return bad(format!("mlp_dim {} < hidden_dim {}", self.mlp_dim, self.hidden_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.codebook_size < 2 {
            return bad(format!("codebook_size {} < 2", self.codebook_size));
        }
        if self.num_classes == 0 || self.depth == 0 || self.grid_len() == 0 {
            return bad("num_classes, depth and grid dims must be positive".into());
        }
        Ok(())
    }

    /// Visual positions per sample.
    pub fn grid_len(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// Visual positions plus the class token.
    pub fn seq_len(&self) -> usize {
        self.grid_len() + 1
    }

    pub fn mask_id(&self) -> usize {
        self.codebook_size
    }

    pub fn class_row(&self, label: usize) -> usize {
        self.codebook_size + 1 + label
    }

    pub fn null_row(&self) -> usize {
        self.codebook_size + 1 + self.num_classes
    }

    pub fn embedding_rows(&self) -> usize {
        self.codebook_size + 1 + self.num_classes + 1
    }
}

/// Per-position `K`-way logits for every visual position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid {
    pub positions: usize,
    pub k: usize,
    pub data: Vec<f32>,
}

impl LogitsGrid {
    pub fn row(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.k..(pos + 1) * self.k]
    }
}

/// One sequence to score: visual tokens (entries in `[0, K]`, `K` = mask)
/// and a class label, `None` for the null class.
#[derive(Debug, Clone, Copy)]
pub struct Input<'a> {
    pub tokens: &'a [usize],
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: ParamId,
    positional: ParamId,
    layers: Vec<LayerIds>,
    final_gain: ParamId,
    final_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    config: TransformerConfig,
    params: ParamSet,
    layout: Layout,
}

fn build_params(config: &TransformerConfig, rng: &mut ChaCha8Rng) -> (ParamSet, Layout) {
    let h = config.hidden_dim;
    let mut ps = ParamSet::new();
    let mut normal = |ps: &mut ParamSet, name: String, shape: Vec<usize>| ps.add(name, Tensor::randn(shape, INIT_STD, rng));
    let embedding = normal(&mut ps, "embedding".into(), vec![config.embedding_rows(), h]);
    let positional = normal(&mut ps, "positional".into(), vec![config.seq_len(), h]);
    let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).unwrap();
    let zeros = |n: usize| Tensor::zeros(vec![n]);
    let mut layers = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let n = |s: &str| format!("layers.{l}.{s}");
        let ln1_gain = ps.add(n("ln1.gain"), ones(h));
        let ln1_bias = ps.add(n("ln1.bias"), zeros(h));
        let wq = normal(&mut ps, n("attn.wq"), vec![h, h]);
        let bq = ps.add(n("attn.bq"), zeros(h));
        let wk = normal(&mut ps, n("attn.wk"), vec![h, h]);
        let bk = ps.add(n("attn.bk"), zeros(h));
        let wv = normal(&mut ps, n("attn.wv"), vec![h, h]);
        let bv = ps.add(n("attn.bv"), zeros(h));
        let wo = normal(&mut ps, n("attn.wo"), vec![h, h]);
        let bo = ps.add(n("attn.bo"), zeros(h));
        let ln2_gain = ps.add(n("ln2.gain"), ones(h));
        let ln2_bias = ps.add(n("ln2.bias"), zeros(h));
        let fc1_w = normal(&mut ps, n("mlp.fc1.w"), vec![h, config.mlp_dim]);
        let fc1_b = ps.add(n("mlp.fc1.b"), zeros(config.mlp_dim));
        let fc2_w = normal(&mut ps, n("mlp.fc2.w"), vec![config.mlp_dim, h]);
        let fc2_b = ps.add(n("mlp.fc2.b"), zeros(h));
        layers.push(LayerIds {
            ln1_gain,
            ln1_bias,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_gain,
            ln2_bias,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        });
    }
    let final_gain = ps.add("final_ln.gain", ones(h));
    let final_bias = ps.add("final_ln.bias", zeros(h));
    let layout = Layout {
        embedding,
        positional,
        layers,
        final_gain,
        final_bias,
    };
    (ps, layout)
}

impl Transformer {
    /// Fresh model: normal(0, 0.02) weights and embeddings, zero biases,
    /// unit layer-norm gains.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build_params(&config, &mut rng);
        Ok(Transformer { config, params, layout })
    }

    /// Model with the given tensors, matched by name against the layout of
    /// `config`.
    pub fn from_tensors(config: TransformerConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(named)?;
        Ok(model)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn embedding_id(&self) -> ParamId {
        self.layout.embedding
    }

    pub fn positional_id(&self) -> ParamId {
        self.layout.positional
    }

    fn check_input(&self, input: &Input<'_>) -> Result<()> {
        let c = &self.config;
        if input.tokens.len() != c.grid_len() {
            return Err(Error::Dimension {
                op: "embed_inputs",
                left: vec![input.tokens.len()],
                right: vec![c.grid_len()],
            });
        }
        if let Some(&t) = input.tokens.iter().find(|&&t| t > c.mask_id()) {
            return Err(Error::Index(format!("token {t} outside [0, {}]", c.mask_id())));
        }
        if let Some(l) = input.label.filter(|&l| l >= c.num_classes) {
            return Err(Error::Index(format!("class {l} with {} classes", c.num_classes)));
        }
        Ok(())
    }

    /// Embedding rows for a batch: class (or null) token, then the grid.
    pub fn input_rows(&self, batch: &[Input<'_>]) -> Result<Vec<usize>> {
        let mut rows = Vec::with_capacity(batch.len() * self.config.seq_len());
        for input in batch {
            self.check_input(input)?;
            rows.push(match input.label {
                Some(l) => self.config.class_row(l),
                None => self.config.null_row(),
            });
            rows.extend_from_slice(input.tokens);
        }
        Ok(rows)
    }

    /// Token plus positional embeddings, `[B·S × hidden]`.
    pub fn embed_inputs<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &[Var], batch: &[Input<'_>]) -> Result<Var> {
        let rows = self.input_rows(batch)?;
        let x = tape.gather(p[self.layout.embedding.0], &rows)?;
        tape.add_tiled(x, p[self.layout.positional.0])
    }

    /// Pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`. Dropout hits
    /// the attention weights and the MLP output when `rng` is given.
    pub fn attention_block<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &[Var],
        layer: usize,
        x: Var,
        batch: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let ids = &self.layout.layers[layer];
        let v = |id: ParamId| p[id.0];
        let dims = AttentionDims {
            batch,
            seq: self.config.seq_len(),
            heads: self.config.heads,
            hidden: self.config.hidden_dim,
        };
        let mut noop = ChaCha8Rng::seed_from_u64(0);
        let (p_drop, rng): (f32, &mut dyn RngCore) = match rng {
            Some(r) => (self.config.dropout, r),
            None => (0.0, &mut noop),
        };

        let h = tape.layer_norm(x, v(ids.ln1_gain), v(ids.ln1_bias))?;
        let proj = |w: ParamId, b: ParamId, tape: &mut Tape<'_, T>| -> Result<Var> {
            let m = tape.matmul(h, v(w))?;
            tape.add_bias(m, v(b))
        };
        let q = proj(ids.wq, ids.bq, tape)?;
        let k = proj(ids.wk, ids.bk, tape)?;
        let val = proj(ids.wv, ids.bv, tape)?;
        let a = tape.attention(q, k, val, dims, p_drop, rng)?;
        let o = tape.matmul(a, v(ids.wo))?;
        let o = tape.add_bias(o, v(ids.bo))?;
        let x = tape.add(x, o)?;

        let h = tape.layer_norm(x, v(ids.ln2_gain), v(ids.ln2_bias))?;
        let m = tape.matmul(h, v(ids.fc1_w))?;
        let m = tape.add_bias(m, v(ids.fc1_b))?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, v(ids.fc2_w))?;
        let m = tape.add_bias(m, v(ids.fc2_b))?;
        let m = tape.dropout(m, p_drop, rng);
        tape.add(x, m)
    }

    /// Full pass on an existing tape. `p` holds the bound parameters (see
    /// [`ParamSet::bind`]). Returns logits `[B·N × K]`, visual positions
    /// only, in batch-major order. Dropout is active iff `rng` is given.
    pub fn forward_on<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &[Var],
        batch: &[Input<'_>],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mut x = self.embed_inputs(tape, p, batch)?;
        for layer in 0..self.config.depth {
            let r = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
            x = self.attention_block(tape, p, layer, x, batch.len(), r)?;
        }
        let x = tape.layer_norm(x, p[self.layout.final_gain.0], p[self.layout.final_bias.0])?;
        let s = self.config.seq_len();
        let visual: Vec<usize> = (0..batch.len()).flat_map(|b| (b * s + 1)..((b + 1) * s)).collect();
        let x = tape.select_rows(x, &visual)?;
        let all = tape.matmul_nt(x, p[self.layout.embedding.0])?;
        tape.slice_cols(all, 0, self.config.codebook_size)
    }

    /// Eval-mode logits for a batch of sequences.
    pub fn forward_batch(&self, batch: &[Input<'_>]) -> Result<Vec<LogitsGrid>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.forward_on(&mut tape, &p, batch, None)?;
        let per = self.config.grid_len() * self.config.codebook_size;
        Ok(tape
            .value(out)
            .chunks_exact(per)
            .map(|c| LogitsGrid {
                positions: self.config.grid_len(),
                k: self.config.codebook_size,
                data: c.to_vec(),
            })
            .collect())
    }

    pub fn forward(&self, tokens: &[usize], label: Option<usize>) -> Result<LogitsGrid> {
        Ok(self.forward_batch(&[Input { tokens, label }])?.remove(0))
    }
}
