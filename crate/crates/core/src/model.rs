//! The denoising network.
//!
//! Each leaf gets a hierarchical encoding from a gated recurrent cell run over
//! its key path. Present leaves add a value encoding from their own encoder;
//! Masked and Missing leaves carry the hierarchical encoding alone. A
//! transformer mixes the leaf sequence, with only Present positions usable as
//! attention keys, and per-leaf decoders turn Masked positions into
//! categorical logits, mixture parameters or a text latent.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnLayout, Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::numeric::{dice_features, softmax, EmbeddingKind, GmmParams};
use crate::rng::{stream_rng, Rng, Stream};
use crate::schema::{Cell, EntityInstance, EntitySchema, LeafKind, TextSpec, Value};

/// Width used as the muP base shape.
const MUP_BASE_WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    Standard,
    Mup,
}

/// Network hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub n_entity_layers: usize,
    pub n_heads: usize,
    /// Residual blocks per property encoder and decoder.
    pub n_enc_dec_layers: usize,
    pub gmm_components: usize,
    /// One unit-variance component per numerical leaf (squared-error loss).
    pub unit_variance: bool,
    pub n_text_layers: usize,
    pub embedding: EmbeddingKind,
    pub embedding_dim: usize,
    /// Share the periodic frequencies across numerical leaves.
    pub tie_numeric_embeddings: bool,
    pub init: InitScheme,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model_dim: 32,
            n_entity_layers: 2,
            n_heads: 4,
            n_enc_dec_layers: 2,
            gmm_components: 50,
            unit_variance: false,
            n_text_layers: 1,
            embedding: EmbeddingKind::Periodic,
            embedding_dim: 16,
            tie_numeric_embeddings: false,
            init: InitScheme::Standard,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::invalid("model_dim must be a positive multiple of n_heads"));
        }
        if self.n_entity_layers == 0 || self.n_enc_dec_layers == 0 || self.n_text_layers == 0 {
            return Err(Error::invalid("all depths must be at least 1"));
        }
        if self.gmm_components == 0 || (self.unit_variance && self.gmm_components != 1) {
            return Err(Error::invalid("unit_variance needs gmm_components = 1"));
        }
        if self.embedding_dim == 0 || !self.embedding_dim.is_multiple_of(2) {
            return Err(Error::invalid("embedding_dim must be even and positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    fn head_width(&self, kind: &LeafKind) -> usize {
        match kind {
            LeafKind::Categorical { categories } => categories.len(),
            LeafKind::Numerical { .. } if self.unit_variance => 1,
            LeafKind::Numerical { .. } => 3 * self.gmm_components,
            LeafKind::Text(_) => self.model_dim,
        }
    }
}

/// Decoder output for one masked leaf.
#[derive(Debug, Clone, PartialEq)]
pub enum PropertyPrediction {
    CategoricalLogits(Vec<f64>),
    Gmm(GmmParams),
    /// Decoded latent that conditions the autoregressive text decoder.
    Text(Vec<f64>),
}

/// How text is generated from a latent.
pub enum TextDecoding<'r> {
    Greedy,
    Sample { temperature: f64, rng: &'r mut Rng },
}

/// Parameters plus everything needed to rebuild the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: EntitySchema,
    /// Path-segment vocabulary of the key encoder.
    pub key_vocab: Vec<String>,
    pub params: ParamStore,
    /// Optimal-constant predictions per leaf (mean, mode or most frequent
    /// string) in normalized units, filled in by training.
    pub baseline: Vec<Option<Value>>,
}

/// Optional knobs of a forward pass.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Sequence slot -> leaf index. Defaults to schema order.
    pub order: Option<&'a [usize]>,
    /// Per entity, the Masked leaves to decode. Defaults to all Masked leaves.
    pub decode: Option<&'a [Vec<usize>]>,
    /// Dropout source; `None` runs in evaluation mode.
    pub dropout: Option<&'a mut Rng>,
}

/// Head outputs of one forward pass, grouped per leaf.
pub struct ForwardTrace {
    pub heads: Vec<LeafHead>,
}

pub struct LeafHead {
    pub leaf: usize,
    /// Batch positions of the decoded rows.
    pub entities: Vec<usize>,
    /// `rows x head_width`: logits, raw mixture parameters or text latents.
    pub node: NodeId,
}

fn p(kind: &str, path: &str, rest: &str) -> String {
    format!("{kind}.{path}.{rest}")
}

struct Init<'a> {
    store: ParamStore,
    rng: Rng,
    cfg: &'a ModelConfig,
}

impl Init<'_> {
    fn hidden_lr(&self) -> f64 {
        match self.cfg.init {
            InitScheme::Standard => 1.0,
            InitScheme::Mup => MUP_BASE_WIDTH as f64 / self.cfg.model_dim as f64,
        }
    }

    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                std * z
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    fn matrix(&mut self, name: String, fan_in: usize, fan_out: usize) {
        let t = self.normal(fan_in, fan_out, (1.0 / fan_in as f64).sqrt());
        let lr = self.hidden_lr();
        self.store.add(name, t, lr, true);
    }

    /// Output layer; zero-initialized under muP.
    fn readout(&mut self, name: String, fan_in: usize, fan_out: usize) {
        let t = match self.cfg.init {
            InitScheme::Standard => self.normal(fan_in, fan_out, (1.0 / fan_in as f64).sqrt()),
            InitScheme::Mup => Tensor::zeros(fan_in, fan_out),
        };
        self.store.add(name, t, 1.0, true);
    }

    fn bias(&mut self, name: String, n: usize) {
        self.store.add(name, Tensor::zeros(1, n), 1.0, false);
    }

    fn embedding(&mut self, name: String, rows: usize, cols: usize) {
        let t = self.normal(rows, cols, 1.0);
        self.store.add(name, t, 1.0, false);
    }

    fn layer_norm(&mut self, prefix: &str) {
        let d = self.cfg.model_dim;
        self.store.add(format!("{prefix}.ln.g"), Tensor::from_vec(1, d, vec![1.0; d]), 1.0, false);
        self.store.add(format!("{prefix}.ln.b"), Tensor::zeros(1, d), 1.0, false);
    }

    fn residual_block(&mut self, prefix: &str) {
        let d = self.cfg.model_dim;
        self.matrix(format!("{prefix}.w1"), d, 8 * d);
        self.bias(format!("{prefix}.b1"), 8 * d);
        self.matrix(format!("{prefix}.w2"), 4 * d, d);
        self.bias(format!("{prefix}.b2"), d);
        self.layer_norm(prefix);
    }

    fn transformer_layer(&mut self, prefix: &str) {
        let d = self.cfg.model_dim;
        for w in ["q", "k", "v", "o"] {
            self.matrix(format!("{prefix}.w{w}"), d, d);
            self.bias(format!("{prefix}.b{w}"), d);
        }
        self.layer_norm(&format!("{prefix}.attn"));
        self.matrix(format!("{prefix}.ff1"), d, 4 * d);
        self.bias(format!("{prefix}.fb1"), 4 * d);
        self.matrix(format!("{prefix}.ff2"), 4 * d, d);
        self.bias(format!("{prefix}.fb2"), d);
        self.layer_norm(&format!("{prefix}.ff"));
    }

    fn frequencies(&mut self, name: String) {
        let k = self.cfg.embedding_dim / 2;
        let t = self.normal(1, k, 2.0 * std::f64::consts::PI);
        self.store.add(name, t, 1.0, false);
    }
}

impl Model {
    /// Initialize parameters for `schema`. Deterministic in `config.seed`.
    pub fn new(config: ModelConfig, schema: EntitySchema) -> Result<Model> {
        config.validate()?;
        let mut key_vocab: Vec<String> = Vec::new();
        for leaf in schema.leaves() {
            for seg in leaf.segments() {
                if !key_vocab.iter().any(|k| k == seg) {
                    key_vocab.push(seg.to_string());
                }
            }
        }
        let d = config.model_dim;
        let mut init = Init { store: ParamStore::new(), rng: stream_rng(config.seed, Stream::Init, 0), cfg: &config };

        init.embedding("key.embed".into(), key_vocab.len(), d);
        init.matrix("key.gru.wx".into(), d, 3 * d);
        init.matrix("key.gru.wh".into(), d, 3 * d);
        init.bias("key.gru.bx".into(), 3 * d);
        init.bias("key.gru.bh".into(), 3 * d);
        if config.tie_numeric_embeddings && config.embedding == EmbeddingKind::Periodic {
            init.frequencies("enc.numeric.freqs".into());
        }

        for leaf in schema.leaves() {
            let path = &leaf.path;
            match &leaf.kind {
                LeafKind::Categorical { categories } => {
                    init.embedding(p("enc", path, "table"), categories.len(), d);
                }
                LeafKind::Numerical { .. } => {
                    if config.embedding == EmbeddingKind::Periodic && !config.tie_numeric_embeddings {
                        init.frequencies(p("enc", path, "freqs"));
                    }
                    init.matrix(p("enc", path, "proj"), config.embedding_dim, d);
                    init.bias(p("enc", path, "proj_b"), d);
                }
                LeafKind::Text(t) => {
                    init.embedding(p("enc", path, "tok"), t.token_count() + 1, d);
                    init.embedding(p("enc", path, "pos"), t.max_length + 1, d);
                    for l in 0..config.n_text_layers {
                        init.transformer_layer(&p("enc", path, &format!("layer{l}")));
                    }
                }
            }
            if !matches!(leaf.kind, LeafKind::Text(_)) {
                for b in 0..config.n_enc_dec_layers {
                    init.residual_block(&p("enc", path, &format!("block{b}")));
                }
            }
            for b in 0..config.n_enc_dec_layers {
                init.residual_block(&p("dec", path, &format!("block{b}")));
            }
            match &leaf.kind {
                LeafKind::Text(t) => {
                    init.embedding(p("dec", path, "tok"), t.token_count(), d);
                    init.embedding(p("dec", path, "pos"), t.max_length + 1, d);
                    for l in 0..config.n_text_layers {
                        init.transformer_layer(&p("dec", path, &format!("layer{l}")));
                    }
                    init.readout(p("dec", path, "out"), d, t.token_count());
                    init.bias(p("dec", path, "out_b"), t.token_count());
                }
                kind => {
                    let w = config.head_width(kind);
                    init.readout(p("dec", path, "head"), d, w);
                    init.bias(p("dec", path, "head_b"), w);
                }
            }
        }
        for l in 0..config.n_entity_layers {
            init.transformer_layer(&format!("entity.layer{l}"));
        }
        let params = init.store;
        Ok(Model { config, schema, key_vocab, params, baseline: Vec::new() })
    }

    pub fn dim(&self) -> usize {
        self.schema.dim()
    }

    fn key_tokens(&self, leaf: usize) -> Vec<usize> {
        self.schema
            .leaf(leaf)
            .segments()
            .map(|s| self.key_vocab.iter().position(|k| k == s).expect("segment in key vocabulary"))
            .collect()
    }

    /// Hierarchical encodings of all leaves, `D x model_dim`.
    fn hierarchical_node(&self, g: &mut Graph) -> NodeId {
        let d = self.config.model_dim;
        let dim = self.dim();
        let tokens: Vec<Vec<usize>> = (0..dim).map(|i| self.key_tokens(i)).collect();
        let max_depth = tokens.iter().map(Vec::len).max().unwrap_or(0);
        let (embed, wx, wh, bx, bh) = (
            g.param_by_name("key.embed"),
            g.param_by_name("key.gru.wx"),
            g.param_by_name("key.gru.wh"),
            g.param_by_name("key.gru.bx"),
            g.param_by_name("key.gru.bh"),
        );
        let mut parts = Vec::new();
        for depth in 1..=max_depth {
            let group: Vec<usize> = (0..dim).filter(|&i| tokens[i].len() == depth).collect();
            if group.is_empty() {
                continue;
            }
            let mut h = g.constant(Tensor::zeros(group.len(), d));
            for t in 0..depth {
                let x = g.gather_rows(embed, group.iter().map(|&i| tokens[i][t]).collect());
                let gx = g.linear(x, wx, Some(bx));
                let gh = g.linear(h, wh, Some(bh));
                h = g.gru(gx, gh, h);
            }
            parts.push(g.scatter_rows(h, group, dim));
        }
        let mut acc = parts[0];
        for &part in &parts[1..] {
            acc = g.add(acc, part);
        }
        acc
    }

    /// Hierarchical encoding of one leaf path.
    pub fn hierarchical_encoding(&self, path: &str) -> Result<Vec<f64>> {
        let leaf = self.schema.require_leaf(path)?;
        let mut g = Graph::new(&self.params);
        let h = self.hierarchical_node(&mut g);
        Ok(g.value(h).row(leaf).to_vec())
    }

    fn dropout(&self, g: &mut Graph, x: NodeId, rng: &mut Option<&mut Rng>) -> NodeId {
        let rate = self.config.dropout;
        match rng {
            Some(r) if rate > 0.0 => {
                let n = g.value(x).data.len();
                let keep = 1.0 / (1.0 - rate);
                let mask = (0..n).map(|_| if r.gen::<f64>() < rate { 0.0 } else { keep }).collect();
                g.mul_const(x, mask)
            }
            _ => x,
        }
    }

    fn residual_block(&self, g: &mut Graph, x: NodeId, prefix: &str, rng: &mut Option<&mut Rng>) -> NodeId {
        let w1 = g.param_by_name(&format!("{prefix}.w1"));
        let b1 = g.param_by_name(&format!("{prefix}.b1"));
        let w2 = g.param_by_name(&format!("{prefix}.w2"));
        let b2 = g.param_by_name(&format!("{prefix}.b2"));
        let h = g.linear(x, w1, Some(b1));
        let h = g.glu(h);
        let h = self.dropout(g, h, rng);
        let h = g.linear(h, w2, Some(b2));
        let y = g.add(x, h);
        let (lg, lb) = (g.param_by_name(&format!("{prefix}.ln.g")), g.param_by_name(&format!("{prefix}.ln.b")));
        g.layer_norm(y, lg, lb)
    }

    fn transformer_layer(&self, g: &mut Graph, x: NodeId, prefix: &str, layout: AttnLayout, rng: &mut Option<&mut Rng>) -> NodeId {
        let lin = |g: &mut Graph, x: NodeId, w: &str| {
            let wn = g.param_by_name(&format!("{prefix}.w{w}"));
            let bn = g.param_by_name(&format!("{prefix}.b{w}"));
            g.linear(x, wn, Some(bn))
        };
        let q = lin(g, x, "q");
        let k = lin(g, x, "k");
        let v = lin(g, x, "v");
        let a = g.attention(q, k, v, layout);
        let a = lin(g, a, "o");
        let a = self.dropout(g, a, rng);
        let y = g.add(x, a);
        let (lg, lb) = (g.param_by_name(&format!("{prefix}.attn.ln.g")), g.param_by_name(&format!("{prefix}.attn.ln.b")));
        let y = g.layer_norm(y, lg, lb);
        let (f1, fb1) = (g.param_by_name(&format!("{prefix}.ff1")), g.param_by_name(&format!("{prefix}.fb1")));
        let (f2, fb2) = (g.param_by_name(&format!("{prefix}.ff2")), g.param_by_name(&format!("{prefix}.fb2")));
        let f = g.linear(y, f1, Some(fb1));
        let f = g.relu(f);
        let f = self.dropout(g, f, rng);
        let f = g.linear(f, f2, Some(fb2));
        let f = self.dropout(g, f, rng);
        let z = g.add(y, f);
        let (lg, lb) = (g.param_by_name(&format!("{prefix}.ff.ln.g")), g.param_by_name(&format!("{prefix}.ff.ln.b")));
        g.layer_norm(z, lg, lb)
    }

    /// Value encodings for Present cells of one leaf, `rows x model_dim`.
    fn encode_values(&self, g: &mut Graph, leaf: usize, values: &[&Value], rng: &mut Option<&mut Rng>) -> Result<NodeId> {
        let spec = self.schema.leaf(leaf);
        let path = &spec.path;
        let x = match &spec.kind {
            LeafKind::Categorical { categories } => {
                let mut idx = Vec::with_capacity(values.len());
                for v in values {
                    match v {
                        Value::Cat(c) if *c < categories.len() => idx.push(*c),
                        other => return Err(Error::data(format!("value {other:?} does not fit categorical `{path}`"))),
                    }
                }
                let table = g.param_by_name(&p("enc", path, "table"));
                g.gather_rows(table, idx)
            }
            LeafKind::Numerical { .. } => {
                let mut xs = Vec::with_capacity(values.len());
                for v in values {
                    match v {
                        Value::Num(x) if x.is_finite() => xs.push(*x),
                        other => return Err(Error::data(format!("value {other:?} does not fit numerical `{path}`"))),
                    }
                }
                let feats = match self.config.embedding {
                    EmbeddingKind::Periodic => {
                        let name = if self.config.tie_numeric_embeddings {
                            "enc.numeric.freqs".to_string()
                        } else {
                            p("enc", path, "freqs")
                        };
                        let f = g.param_by_name(&name);
                        g.periodic(f, xs)
                    }
                    EmbeddingKind::Dice => {
                        let k = self.config.embedding_dim;
                        let data = xs.iter().flat_map(|&x| dice_features(x, k, (0.0, 1.0))).collect();
                        g.constant(Tensor::from_vec(xs.len(), k, data))
                    }
                };
                let (w, b) = (g.param_by_name(&p("enc", path, "proj")), g.param_by_name(&p("enc", path, "proj_b")));
                g.linear(feats, w, Some(b))
            }
            LeafKind::Text(t) => {
                let mut seqs = Vec::with_capacity(values.len());
                for v in values {
                    match v {
                        Value::Text(s) => seqs.push(t.encode(s)?),
                        other => return Err(Error::data(format!("value {other:?} does not fit text `{path}`"))),
                    }
                }
                return Ok(self.encode_text(g, leaf, t, &seqs, rng));
            }
        };
        let mut h = x;
        for b in 0..self.config.n_enc_dec_layers {
            h = self.residual_block(g, h, &p("enc", path, &format!("block{b}")), rng);
        }
        Ok(h)
    }

    fn encode_text(&self, g: &mut Graph, leaf: usize, t: &TextSpec, seqs: &[Vec<usize>], rng: &mut Option<&mut Rng>) -> NodeId {
        let path = &self.schema.leaf(leaf).path;
        let s = t.max_length + 1;
        let cls = t.token_count();
        let mut tok = Vec::with_capacity(seqs.len() * s);
        let mut pos = Vec::with_capacity(seqs.len() * s);
        let mut valid = Vec::with_capacity(seqs.len() * s);
        for seq in seqs {
            for j in 0..s {
                let id = if j == 0 { cls } else { seq.get(j - 1).copied().unwrap_or(TextSpec::PAD) };
                tok.push(id);
                pos.push(j);
                valid.push(j == 0 || j <= seq.len());
            }
        }
        let te = g.param_by_name(&p("enc", path, "tok"));
        let pe = g.param_by_name(&p("enc", path, "pos"));
        let a = g.gather_rows(te, tok);
        let b = g.gather_rows(pe, pos);
        let mut x = g.add(a, b);
        let layout = AttnLayout { block: s, heads: self.config.n_heads, causal: false, key_valid: valid };
        for l in 0..self.config.n_text_layers {
            x = self.transformer_layer(g, x, &p("enc", path, &format!("layer{l}")), layout.clone(), rng);
        }
        g.gather_rows(x, (0..seqs.len()).map(|i| i * s).collect())
    }

    /// Teacher-forced text decoder logits, `(n * (max_length + 1)) x tokens`.
    /// Row `j` of block `i` predicts token `j` of sequence `i`.
    fn text_decoder(&self, g: &mut Graph, leaf: usize, latent: NodeId, inputs: &[Vec<usize>], rng: &mut Option<&mut Rng>) -> NodeId {
        let spec = self.schema.leaf(leaf);
        let t = spec.text().expect("text leaf");
        let path = &spec.path;
        let s = t.max_length + 1;
        let n = inputs.len();
        let mut tok_rows = Vec::new();
        let mut tok_ids = Vec::new();
        for (i, seq) in inputs.iter().enumerate() {
            for j in 1..s {
                tok_rows.push(i * s + j);
                tok_ids.push(seq.get(j - 1).copied().unwrap_or(TextSpec::PAD));
            }
        }
        let te = g.param_by_name(&p("dec", path, "tok"));
        let pe = g.param_by_name(&p("dec", path, "pos"));
        let emb = g.gather_rows(te, tok_ids);
        let emb = g.scatter_rows(emb, tok_rows, n * s);
        let pre = g.scatter_rows(latent, (0..n).map(|i| i * s).collect(), n * s);
        let pos = g.gather_rows(pe, (0..n * s).map(|r| r % s).collect());
        let x = g.add(emb, pre);
        let mut x = g.add(x, pos);
        let layout = AttnLayout { block: s, heads: self.config.n_heads, causal: true, key_valid: vec![true; n * s] };
        for l in 0..self.config.n_text_layers {
            x = self.transformer_layer(g, x, &p("dec", path, &format!("layer{l}")), layout.clone(), rng);
        }
        let (w, b) = (g.param_by_name(&p("dec", path, "out")), g.param_by_name(&p("dec", path, "out_b")));
        g.linear(x, w, Some(b))
    }

    /// Record the forward pass of a batch. Entities must be normalized.
    pub fn forward_graph(&self, g: &mut Graph, entities: &[EntityInstance], opts: &mut ForwardOptions) -> Result<ForwardTrace> {
        let dim = self.dim();
        let d = self.config.model_dim;
        let identity: Vec<usize> = (0..dim).collect();
        let order = opts.order.unwrap_or(&identity);
        if order.len() != dim {
            return Err(Error::invalid("leaf order must be a permutation of the schema leaves"));
        }
        let mut slot_of = vec![usize::MAX; dim];
        for (s, &leaf) in order.iter().enumerate() {
            if leaf >= dim || slot_of[leaf] != usize::MAX {
                return Err(Error::invalid("leaf order must be a permutation of the schema leaves"));
            }
            slot_of[leaf] = s;
        }
        for e in entities {
            self.schema.check_width(e)?;
            if e.effective_dim() == 0 {
                return Err(Error::data("entity has every leaf Missing"));
            }
        }
        let bsz = entities.len();
        let rows = bsz * dim;
        let mut rng = opts.dropout.as_deref_mut();

        let hier = self.hierarchical_node(g);
        let mut x = g.gather_rows(hier, (0..rows).map(|r| order[r % dim]).collect());
        for leaf in 0..dim {
            let mut at = Vec::new();
            let mut values = Vec::new();
            for (b, e) in entities.iter().enumerate() {
                if let Cell::Present(v) = &e.cells[leaf] {
                    at.push(b * dim + slot_of[leaf]);
                    values.push(v);
                }
            }
            if at.is_empty() {
                continue;
            }
            let enc = self.encode_values(g, leaf, &values, &mut rng)?;
            let placed = g.scatter_rows(enc, at, rows);
            x = g.add(x, placed);
        }

        let key_valid: Vec<bool> = (0..rows).map(|r| entities[r / dim].cells[order[r % dim]].is_present()).collect();
        let layout = AttnLayout { block: dim, heads: self.config.n_heads, causal: false, key_valid };
        for l in 0..self.config.n_entity_layers {
            x = self.transformer_layer(g, x, &format!("entity.layer{l}"), layout.clone(), &mut rng);
        }
        debug_assert_eq!(g.value(x).cols, d);

        let mut heads = Vec::new();
        for leaf in 0..dim {
            let mut members = Vec::new();
            for (b, e) in entities.iter().enumerate() {
                let wanted = match opts.decode {
                    Some(sel) => sel[b].contains(&leaf),
                    None => true,
                };
                if wanted && e.cells[leaf].is_masked() {
                    members.push(b);
                }
            }
            if members.is_empty() {
                continue;
            }
            let path = &self.schema.leaf(leaf).path;
            let mut h = g.gather_rows(x, members.iter().map(|&b| b * dim + slot_of[leaf]).collect());
            for b in 0..self.config.n_enc_dec_layers {
                h = self.residual_block(g, h, &p("dec", path, &format!("block{b}")), &mut rng);
            }
            let node = match &self.schema.leaf(leaf).kind {
                LeafKind::Text(_) => h,
                _ => {
                    let (w, bias) = (g.param_by_name(&p("dec", path, "head")), g.param_by_name(&p("dec", path, "head_b")));
                    g.linear(h, w, Some(bias))
                }
            };
            heads.push(LeafHead { leaf, entities: members, node });
        }
        Ok(ForwardTrace { heads })
    }

    fn prediction_from_row(&self, leaf: usize, row: &[f64]) -> PropertyPrediction {
        match &self.schema.leaf(leaf).kind {
            LeafKind::Categorical { .. } => PropertyPrediction::CategoricalLogits(row.to_vec()),
            LeafKind::Numerical { .. } => PropertyPrediction::Gmm(GmmParams::from_head(
                row,
                self.config.gmm_components,
                self.config.unit_variance,
            )),
            LeafKind::Text(_) => PropertyPrediction::Text(row.to_vec()),
        }
    }

    /// Evaluation-mode predictions for every requested Masked leaf of every entity.
    pub fn predict_batch(
        &self,
        entities: &[EntityInstance],
        order: Option<&[usize]>,
        decode: Option<&[Vec<usize>]>,
    ) -> Result<Vec<BTreeMap<usize, PropertyPrediction>>> {
        let mut g = Graph::new(&self.params);
        let mut opts = ForwardOptions { order, decode, dropout: None };
        let trace = self.forward_graph(&mut g, entities, &mut opts)?;
        let mut out = vec![BTreeMap::new(); entities.len()];
        for head in &trace.heads {
            let v = g.value(head.node);
            for (r, &b) in head.entities.iter().enumerate() {
                let pred = self.prediction_from_row(head.leaf, v.row(r));
                check_finite(&pred)?;
                out[b].insert(head.leaf, pred);
            }
        }
        Ok(out)
    }

    /// Predictions for all Masked leaves of one entity.
    pub fn forward(&self, entity: &EntityInstance) -> Result<BTreeMap<usize, PropertyPrediction>> {
        Ok(self.predict_batch(std::slice::from_ref(entity), None, None)?.pop().expect("one entity"))
    }

    /// Encoding of a single Present value, `model_dim` wide.
    pub fn encode_property(&self, leaf: usize, value: &Value) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let node = self.encode_values(&mut g, leaf, &[value], &mut None)?;
        Ok(g.value(node).row(0).to_vec())
    }

    /// Text logits for each position given a latent and a (teacher) token prefix.
    pub fn text_logits(&self, leaf: usize, latent: &[f64], tokens: &[usize]) -> Vec<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let lat = g.constant(Tensor::from_vec(1, latent.len(), latent.to_vec()));
        let out = self.text_decoder(&mut g, leaf, lat, &[tokens.to_vec()], &mut None);
        let v = g.value(out);
        (0..v.rows).map(|r| v.row(r).to_vec()).collect()
    }

    /// Generate text from a latent, one token per decoder pass.
    pub fn decode_text(&self, leaf: usize, latent: &[f64], mut mode: TextDecoding) -> String {
        let t = self.schema.leaf(leaf).text().expect("text leaf").clone();
        let mut tokens: Vec<usize> = Vec::new();
        while tokens.len() < t.max_length {
            let logits = self.text_logits(leaf, latent, &tokens);
            let row = &logits[tokens.len()];
            // Padding is never a valid output.
            let next = match &mut mode {
                TextDecoding::Greedy => argmax(&row[1..]) + 1,
                TextDecoding::Sample { temperature, rng } => {
                    let scaled: Vec<f64> = row[1..].iter().map(|l| l / *temperature).collect();
                    sample_index(&softmax(&scaled), rng) + 1
                }
            };
            if next == TextSpec::END {
                break;
            }
            tokens.push(next);
        }
        t.decode(&tokens)
    }

    /// Reconstruction loss of one prediction against the true value.
    pub fn reconstruction_loss(&self, leaf: usize, pred: &PropertyPrediction, truth: &Value) -> Result<f64> {
        match (pred, truth) {
            (PropertyPrediction::CategoricalLogits(l), Value::Cat(c)) if *c < l.len() => Ok(categorical_nll(l, *c)),
            (PropertyPrediction::Gmm(params), Value::Num(x)) => crate::numeric::gmm_nll(params, *x),
            (PropertyPrediction::Text(latent), Value::Text(s)) => {
                let t = self.schema.leaf(leaf).text().ok_or_else(|| Error::invalid("leaf is not text"))?;
                let ids = t.encode(s)?;
                let logits = self.text_logits(leaf, latent, &ids);
                let mut total = 0.0;
                for j in 0..=ids.len() {
                    let target = ids.get(j).copied().unwrap_or(TextSpec::END);
                    total += categorical_nll(&logits[j], target);
                }
                Ok(total / (ids.len() + 1) as f64)
            }
            _ => Err(Error::invalid("prediction kind does not match the value kind")),
        }
    }

    /// Weighted reconstruction loss of a corrupted batch. `truths[b]` holds the
    /// clean values; losses are summed over Masked leaves and multiplied by
    /// `weights[b]`. Returns the scalar node and per-(entity, leaf) losses.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        corrupted: &[EntityInstance],
        truths: &[EntityInstance],
        weights: &[f64],
        opts: &mut ForwardOptions,
    ) -> Result<(NodeId, Vec<(usize, usize, f64)>)> {
        let trace = self.forward_graph(g, corrupted, opts)?;
        let mut rng = opts.dropout.as_deref_mut();
        let mut parts = Vec::new();
        let mut detail = Vec::new();
        for head in &trace.heads {
            let leaf = head.leaf;
            let w: Vec<f64> = head.entities.iter().map(|&b| weights[b]).collect();
            let truth = |b: usize| -> Result<&Value> {
                truths[b].cells[leaf].value().ok_or_else(|| Error::data("masked leaf has no true value"))
            };
            let (node, per_row) = match &self.schema.leaf(leaf).kind {
                LeafKind::Categorical { .. } => {
                    let mut t = Vec::with_capacity(w.len());
                    for &b in &head.entities {
                        match truth(b)? {
                            Value::Cat(c) => t.push(*c),
                            _ => return Err(Error::data("categorical truth expected")),
                        }
                    }
                    g.cross_entropy(head.node, &t, &w)
                }
                LeafKind::Numerical { .. } => {
                    let mut t = Vec::with_capacity(w.len());
                    for &b in &head.entities {
                        match truth(b)? {
                            Value::Num(x) => t.push(*x),
                            _ => return Err(Error::data("numerical truth expected")),
                        }
                    }
                    g.gmm_nll(head.node, &t, &w, self.config.gmm_components, self.config.unit_variance)
                }
                LeafKind::Text(spec) => {
                    let s = spec.max_length + 1;
                    let mut seqs = Vec::with_capacity(w.len());
                    for &b in &head.entities {
                        match truth(b)? {
                            Value::Text(txt) => seqs.push(spec.encode(txt)?),
                            _ => return Err(Error::data("text truth expected")),
                        }
                    }
                    let logits = self.text_decoder(g, leaf, head.node, &seqs, &mut rng);
                    let mut targets = Vec::with_capacity(seqs.len() * s);
                    let mut tw = Vec::with_capacity(seqs.len() * s);
                    for (i, seq) in seqs.iter().enumerate() {
                        let per_token = w[i] / (seq.len() + 1) as f64;
                        for j in 0..s {
                            targets.push(if j < seq.len() { seq[j] } else if j == seq.len() { TextSpec::END } else { TextSpec::PAD });
                            tw.push(if j <= seq.len() { per_token } else { 0.0 });
                        }
                    }
                    let (node, rows) = g.cross_entropy(logits, &targets, &tw);
                    let per_seq = seqs
                        .iter()
                        .enumerate()
                        .map(|(i, seq)| rows[i * s..i * s + seq.len() + 1].iter().sum::<f64>() / (seq.len() + 1) as f64)
                        .collect();
                    (node, per_seq)
                }
            };
            for (r, &b) in head.entities.iter().enumerate() {
                detail.push((b, leaf, per_row[r]));
            }
            parts.push(node);
        }
        if parts.is_empty() {
            return Err(Error::invalid("batch has no Masked leaves to score"));
        }
        Ok((g.sum_scalars(parts), detail))
    }
}

const MAGIC: &[u8; 8] = b"ENTDIFF\x01";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    schema: String,
    fingerprint: String,
    baseline: Vec<Option<serde_json::Value>>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

fn value_to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::Num(x) => serde_json::json!({ "num": x }),
        Value::Cat(c) => serde_json::json!({ "cat": c }),
        Value::Text(t) => serde_json::json!({ "text": t }),
    }
}

fn value_from_json(v: &serde_json::Value) -> Result<Value> {
    let bad = || Error::Checkpoint(format!("bad baseline entry {v}"));
    if let Some(x) = v.get("num") {
        Ok(Value::Num(x.as_f64().ok_or_else(bad)?))
    } else if let Some(c) = v.get("cat") {
        Ok(Value::Cat(c.as_u64().ok_or_else(bad)? as usize))
    } else if let Some(t) = v.get("text") {
        Ok(Value::Text(t.as_str().ok_or_else(bad)?.to_string()))
    } else {
        Err(bad())
    }
}

impl Model {
    /// Serialize to the checkpoint container: magic, little-endian header
    /// length, JSON header, then every tensor as little-endian f64 in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            schema: self.schema.save(),
            fingerprint: self.schema.fingerprint(),
            baseline: self.baseline.iter().map(|b| b.as_ref().map(value_to_json)).collect(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry { name: name.to_string(), rows: t.rows, cols: t.cols })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let corrupt = |what: &str| Error::Checkpoint(format!("corrupt checkpoint: {what}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let schema = EntitySchema::load(&header.schema)?;
        if schema.fingerprint() != header.fingerprint {
            return Err(Error::Checkpoint("schema does not match the stored fingerprint".into()));
        }
        let mut model = Model::new(header.config, schema)?;
        if header.tensors.len() != model.params.len() {
            return Err(corrupt("tensor count does not match the architecture"));
        }
        let mut offset = 16 + len;
        for (id, entry) in header.tensors.iter().enumerate() {
            if model.params.name(id) != entry.name {
                return Err(corrupt(&format!("unexpected tensor `{}`", entry.name)));
            }
            let t = model.params.get_mut(id);
            if t.rows != entry.rows || t.cols != entry.cols {
                return Err(corrupt(&format!("shape mismatch for `{}`", entry.name)));
            }
            let n = t.data.len() * 8;
            let raw = bytes.get(offset..offset + n).ok_or_else(|| corrupt("truncated tensor data"))?;
            for (x, chunk) in t.data.iter_mut().zip(raw.chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            offset += n;
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        model.baseline = header
            .baseline
            .iter()
            .map(|b| b.as_ref().map(value_from_json).transpose())
            .collect::<Result<_>>()?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Model> {
        Model::from_bytes(&std::fs::read(path)?)
    }
}

fn check_finite(pred: &PropertyPrediction) -> Result<()> {
    let ok = match pred {
        PropertyPrediction::CategoricalLogits(v) | PropertyPrediction::Text(v) => v.iter().all(|x| x.is_finite()),
        PropertyPrediction::Gmm(p) => p.means.iter().chain(&p.log_scales).chain(&p.weights).all(|x| x.is_finite()),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::numerical("network produced non-finite outputs"))
    }
}

pub(crate) fn categorical_nll(logits: &[f64], target: usize) -> f64 {
    crate::numeric::log_sum_exp(logits) - logits[target]
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sample_index<R: rand::Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::schema::PropertySpec;

    fn mixed_schema() -> EntitySchema {
        EntitySchema::from_leaves(vec![
            PropertySpec { path: "launch.day".into(), kind: LeafKind::Numerical { normalizer: None } },
            PropertySpec { path: "launch.month".into(), kind: LeafKind::Numerical { normalizer: None } },
            PropertySpec { path: "oem".into(), kind: LeafKind::Categorical { categories: vec!["a".into(), "b".into(), "c".into()] } },
            PropertySpec { path: "name".into(), kind: LeafKind::Text(TextSpec { max_length: 6, ..TextSpec::default() }) },
        ])
        .unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig { model_dim: 8, n_heads: 2, n_entity_layers: 1, n_enc_dec_layers: 1, gmm_components: 3, embedding_dim: 4, ..ModelConfig::default() }
    }

    fn entity() -> EntityInstance {
        EntityInstance::new(vec![
            Cell::Present(Value::Num(0.3)),
            Cell::Masked,
            Cell::Present(Value::Cat(2)),
            Cell::Masked,
        ])
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::new(small(), mixed_schema()).unwrap();
        let b = Model::new(small(), mixed_schema()).unwrap();
        assert_eq!(a, b);
        let c = Model::new(ModelConfig { seed: 1, ..small() }, mixed_schema()).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn parameters_grow_with_leaves() {
        let one = EntitySchema::from_leaves(vec![PropertySpec { path: "x".into(), kind: LeafKind::Numerical { normalizer: None } }]).unwrap();
        let two = EntitySchema::from_leaves(vec![
            PropertySpec { path: "x".into(), kind: LeafKind::Numerical { normalizer: None } },
            PropertySpec { path: "y".into(), kind: LeafKind::Numerical { normalizer: None } },
        ])
        .unwrap();
        let a = Model::new(small(), one).unwrap();
        let b = Model::new(small(), two).unwrap();
        assert!(b.params.numel() > a.params.numel());
    }

    #[test]
    fn hierarchical_encodings() {
        let m = Model::new(small(), mixed_schema()).unwrap();
        let day = m.hierarchical_encoding("launch.day").unwrap();
        assert_eq!(day, m.hierarchical_encoding("launch.day").unwrap());
        let month = m.hierarchical_encoding("launch.month").unwrap();
        let dist: f64 = day.iter().zip(&month).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(dist > 0.0);
        assert_eq!(m.hierarchical_encoding("oem").unwrap().len(), 8);
        assert!(m.hierarchical_encoding("launch.hour").is_err());
    }

    #[test]
    fn property_encodings() {
        let m = Model::new(small(), mixed_schema()).unwrap();
        let a = m.encode_property(2, &Value::Cat(1)).unwrap();
        assert_eq!(a, m.encode_property(2, &Value::Cat(1)).unwrap());
        assert_ne!(a, m.encode_property(2, &Value::Cat(0)).unwrap());
        assert_eq!(m.encode_property(0, &Value::Num(0.5)).unwrap().len(), 8);
        assert_eq!(m.encode_property(3, &Value::Text("abc".into())).unwrap().len(), 8);
        assert!(m.encode_property(2, &Value::Num(0.5)).is_err());
    }

    #[test]
    fn forward_shapes() {
        let m = Model::new(small(), mixed_schema()).unwrap();
        let preds = m.forward(&entity()).unwrap();
        assert_eq!(preds.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
        match &preds[&1] {
            PropertyPrediction::Gmm(p) => assert_eq!(p.components(), 3),
            other => panic!("{other:?}"),
        }
        let mut e = entity();
        e.cells[1] = Cell::Present(Value::Num(0.1));
        e.cells[3] = Cell::Missing;
        e.cells[2] = Cell::Masked;
        let preds = m.forward(&e).unwrap();
        match &preds[&2] {
            PropertyPrediction::CategoricalLogits(l) => assert_eq!(l.len(), 3),
            other => panic!("{other:?}"),
        }
        let full = EntityInstance::new(vec![
            Cell::Present(Value::Num(0.3)),
            Cell::Present(Value::Num(0.3)),
            Cell::Present(Value::Cat(0)),
            Cell::Present(Value::Text("x".into())),
        ]);
        assert!(m.forward(&full).unwrap().is_empty());
        assert!(m.forward(&EntityInstance::new(vec![Cell::Missing; 4])).is_err());
    }

    #[test]
    fn fully_masked_forward_is_finite() {
        let m = Model::new(small(), mixed_schema()).unwrap();
        let preds = m.forward(&EntityInstance::all_masked(4)).unwrap();
        assert_eq!(preds.len(), 4);
        let text = m.decode_text(3, match &preds[&3] {
            PropertyPrediction::Text(l) => l,
            _ => unreachable!(),
        }, TextDecoding::Greedy);
        assert!(text.len() <= 6);
        let mut rng = seeded(1);
        let sampled = m.decode_text(3, match &preds[&3] {
            PropertyPrediction::Text(l) => l,
            _ => unreachable!(),
        }, TextDecoding::Sample { temperature: 1.0, rng: &mut rng });
        assert!(sampled.len() <= 6);
    }

    #[test]
    fn graph_loss_matches_reconstruction_loss() {
        let m = Model::new(small(), mixed_schema()).unwrap();
        let truth = EntityInstance::new(vec![
            Cell::Present(Value::Num(0.3)),
            Cell::Present(Value::Num(0.8)),
            Cell::Present(Value::Cat(2)),
            Cell::Present(Value::Text("hey".into())),
        ]);
        let corrupted = entity();
        let preds = m.forward(&corrupted).unwrap();
        let direct: f64 = [1usize, 3]
            .iter()
            .map(|&l| m.reconstruction_loss(l, &preds[&l], truth.cells[l].value().unwrap()).unwrap())
            .sum();
        let mut g = Graph::new(&m.params);
        let (node, detail) = m
            .loss_graph(&mut g, &[corrupted], &[truth], &[2.5], &mut ForwardOptions::default())
            .unwrap();
        assert!((g.value(node).scalar() - 2.5 * direct).abs() < 1e-10);
        assert_eq!(detail.len(), 2);
        assert!(m.reconstruction_loss(1, &preds[&1], &Value::Cat(0)).is_err());
    }

    fn random_entity(rng: &mut Rng) -> EntityInstance {
        let words = ["ab", "hey", "x y", ""];
        let mut cells = vec![
            Cell::Present(Value::Num(rng.gen())),
            Cell::Present(Value::Num(rng.gen())),
            Cell::Present(Value::Cat(rng.gen_range(0..3))),
            Cell::Present(Value::Text(words[rng.gen_range(0..4)].into())),
        ];
        for c in cells.iter_mut() {
            if rng.gen_bool(0.15) {
                *c = Cell::Missing;
            }
        }
        if cells.iter().all(Cell::is_missing) {
            cells[0] = Cell::Present(Value::Num(0.5));
        }
        EntityInstance::new(cells)
    }

    fn mask_some(e: &EntityInstance, rng: &mut Rng) -> EntityInstance {
        let mut out = e.clone();
        let present: Vec<usize> = (0..4).filter(|&i| e.cells[i].is_present()).collect();
        out.cells[present[rng.gen_range(0..present.len())]] = Cell::Masked;
        for &i in &present {
            if rng.gen_bool(0.4) {
                out.cells[i] = Cell::Masked;
            }
        }
        out
    }

    fn per_path_losses(m: &Model, corrupted: &[EntityInstance], truths: &[EntityInstance], order: Option<&[usize]>) -> Vec<(usize, usize, f64)> {
        let mut g = Graph::new(&m.params);
        let w = vec![1.0; corrupted.len()];
        let mut opts = ForwardOptions { order, ..ForwardOptions::default() };
        let (_, mut detail) = m.loss_graph(&mut g, corrupted, truths, &w, &mut opts).unwrap();
        detail.sort_by_key(|a| (a.0, a.1));
        detail
    }

    #[test]
    fn leaf_order_does_not_change_losses() {
        let m = Model::new(small(), mixed_schema()).unwrap();
        let mut rng = seeded(3);
        let truths: Vec<EntityInstance> = (0..12).map(|_| random_entity(&mut rng)).collect();
        let corrupted: Vec<EntityInstance> = truths.iter().map(|e| mask_some(e, &mut rng)).collect();
        let base = per_path_losses(&m, &corrupted, &truths, None);
        for order in [[3, 1, 0, 2], [2, 3, 1, 0], [1, 0, 3, 2]] {
            let permuted = per_path_losses(&m, &corrupted, &truths, Some(&order));
            assert_eq!(base.len(), permuted.len());
            for (a, b) in base.iter().zip(&permuted) {
                assert_eq!((a.0, a.1), (b.0, b.1));
                assert!((a.2 - b.2).abs() < 1e-6, "{a:?} vs {b:?}");
            }
        }
        assert!(m.predict_batch(&corrupted, Some(&[0, 0, 1, 2]), None).is_err());
    }

    #[test]
    fn masked_truths_are_never_read() {
        let m = Model::new(small(), mixed_schema()).unwrap();
        let corrupted = vec![entity()];
        let mut a = EntityInstance::new(vec![
            Cell::Present(Value::Num(0.3)),
            Cell::Present(Value::Num(0.1)),
            Cell::Present(Value::Cat(2)),
            Cell::Present(Value::Text("ab".into())),
        ]);
        let la = per_path_losses(&m, &corrupted, &[a.clone()], None);
        a.cells[3] = Cell::Present(Value::Text("different".chars().take(6).collect()));
        let lb = per_path_losses(&m, &corrupted, &[a], None);
        assert_eq!(la[0], lb[0]);
        assert_ne!(la[1], lb[1]);
    }

    #[test]
    fn batching_matches_single_entity_passes() {
        let m = Model::new(small(), mixed_schema()).unwrap();
        let mut rng = seeded(5);
        let truths: Vec<EntityInstance> = (0..6).map(|_| random_entity(&mut rng)).collect();
        let corrupted: Vec<EntityInstance> = truths.iter().map(|e| mask_some(e, &mut rng)).collect();
        let batch = m.predict_batch(&corrupted, None, None).unwrap();
        for (e, preds) in corrupted.iter().zip(&batch) {
            let single = m.forward(e).unwrap();
            assert_eq!(single.keys().collect::<Vec<_>>(), preds.keys().collect::<Vec<_>>());
            for (k, v) in &single {
                match (v, &preds[k]) {
                    (PropertyPrediction::CategoricalLogits(a), PropertyPrediction::CategoricalLogits(b))
                    | (PropertyPrediction::Text(a), PropertyPrediction::Text(b)) => {
                        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9))
                    }
                    (PropertyPrediction::Gmm(a), PropertyPrediction::Gmm(b)) => {
                        assert!(a.means.iter().zip(&b.means).all(|(x, y)| (x - y).abs() < 1e-9))
                    }
                    _ => panic!("kind changed"),
                }
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let schema = EntitySchema::from_leaves(vec![
            PropertySpec { path: "a".into(), kind: LeafKind::Numerical { normalizer: None } },
            PropertySpec { path: "b".into(), kind: LeafKind::Categorical { categories: vec!["p".into(), "q".into(), "r".into()] } },
        ])
        .unwrap();
        let mut m = Model::new(ModelConfig { dropout: 0.0, ..small() }, schema).unwrap();
        let truths = vec![
            EntityInstance::new(vec![Cell::Present(Value::Num(0.2)), Cell::Present(Value::Cat(1))]),
            EntityInstance::new(vec![Cell::Present(Value::Num(0.9)), Cell::Present(Value::Cat(2))]),
        ];
        let corrupted = vec![
            EntityInstance::new(vec![Cell::Present(Value::Num(0.2)), Cell::Masked]),
            EntityInstance::new(vec![Cell::Masked, Cell::Present(Value::Cat(2))]),
        ];
        let loss = |m: &Model| {
            let mut g = Graph::new(&m.params);
            let (node, _) = m.loss_graph(&mut g, &corrupted, &truths, &[1.5, 0.7], &mut ForwardOptions::default()).unwrap();
            g.value(node).scalar()
        };
        let grads = {
            let mut g = Graph::new(&m.params);
            let (node, _) = m.loss_graph(&mut g, &corrupted, &truths, &[1.5, 0.7], &mut ForwardOptions::default()).unwrap();
            g.backward(node)
        };
        let mut rng = seeded(9);
        let mut checked = 0;
        for id in 0..m.params.len() {
            let Some(grad) = grads.get(id).cloned() else { continue };
            for _ in 0..3 {
                let j = rng.gen_range(0..grad.data.len());
                let h = 1e-5;
                let orig = m.params.get(id).data[j];
                m.params.get_mut(id).data[j] = orig + h;
                let up = loss(&m);
                m.params.get_mut(id).data[j] = orig - h;
                let down = loss(&m);
                m.params.get_mut(id).data[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grad.data[j];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4);
                assert!(rel < 1e-3, "{}[{j}]: {analytic} vs {numeric}", m.params.name(id));
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut m = Model::new(small(), mixed_schema()).unwrap();
        m.baseline = vec![Some(Value::Num(0.25)), None, Some(Value::Cat(1)), Some(Value::Text("hi".into()))];
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }
}
