//! Post-LN encoder-decoder Transformer with relative-position self-attention.
//!
//! Every block computes `x ← LN(x + Dropout(F(x)))`. Self-attention layers
//! add learned relative-position embeddings (shared across heads, one
//! key table and one value table per layer) with clipping distance `k`.
//! Cross-attention is purely content-based. The target embedding doubles as
//! the output projection.
//!
//! Weights are stored `[in, out]` so a projection is `x · W + b`.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenMatrix;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub rel_clip: usize,
    pub dropout: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub ln_eps: f64,
    /// Scale residual-branch output matrices by (2L)^(-1/4) at init.
    pub residual_scaling: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 256,
            heads: 4,
            rel_clip: 16,
            dropout: 0.1,
            src_vocab: 8000,
            tgt_vocab: 8000,
            max_len: 256,
            ln_eps: 1e-6,
            residual_scaling: true,
        }
    }
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("layer counts must be positive".into());
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} is not divisible into {} heads", self.d_model, self.heads));
        }
        if self.rel_clip == 0 {
            return bad("rel_clip must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.src_vocab <= 4 || self.tgt_vocab <= 4 {
            return bad("vocabularies must contain more than the reserved symbols".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

/// `clamp(j - i, -k, k)`; the table row is this plus `k`.
pub fn relative_index(i: usize, j: usize, k: usize) -> i64 {
    let d = j as i64 - i as i64;
    d.clamp(-(k as i64), k as i64)
}

fn rel_table_index(lq: usize, lk: usize, q_offset: usize, k: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(lq * lk);
    for i in 0..lq {
        for j in 0..lk {
            idx.push((relative_index(i + q_offset, j, k) + k as i64) as usize);
        }
    }
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Embedding,
    Weight { residual_out: bool },
    RelTable,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn spec(name: String, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name, shape, init }
}

fn attention_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, rel: Option<(usize, usize)>) {
    for p in ["q", "k", "v", "o"] {
        out.push(spec(
            format!("{prefix}.{p}.weight"),
            vec![d, d],
            Init::Weight { residual_out: p == "o" },
        ));
        out.push(spec(format!("{prefix}.{p}.bias"), vec![d], Init::Zeros));
    }
    if let Some((rows, dh)) = rel {
        out.push(spec(format!("{prefix}.rel_k"), vec![rows, dh], Init::RelTable));
        out.push(spec(format!("{prefix}.rel_v"), vec![rows, dh], Init::RelTable));
    }
}

fn ffn_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, ff: usize) {
    out.push(spec(format!("{prefix}.w1"), vec![d, ff], Init::Weight { residual_out: false }));
    out.push(spec(format!("{prefix}.b1"), vec![ff], Init::Zeros));
    out.push(spec(format!("{prefix}.w2"), vec![ff, d], Init::Weight { residual_out: true }));
    out.push(spec(format!("{prefix}.b2"), vec![d], Init::Zeros));
}

fn ln_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(spec(format!("{prefix}.gain"), vec![d], Init::Ones));
    out.push(spec(format!("{prefix}.bias"), vec![d], Init::Zeros));
}

/// Every parameter name and shape, a pure function of the config.
pub fn parameter_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let rel = Some((2 * cfg.rel_clip + 1, cfg.head_dim()));
    let mut out = vec![
        spec("src_embed".into(), vec![cfg.src_vocab, d], Init::Embedding),
        spec("tgt_embed".into(), vec![cfg.tgt_vocab, d], Init::Embedding),
    ];
    for l in 0..cfg.enc_layers {
        attention_specs(&mut out, &format!("enc.{l}.self_attn"), d, rel);
        ln_specs(&mut out, &format!("enc.{l}.ln1"), d);
        ffn_specs(&mut out, &format!("enc.{l}.ffn"), d, cfg.d_ff());
        ln_specs(&mut out, &format!("enc.{l}.ln2"), d);
    }
    for l in 0..cfg.dec_layers {
        attention_specs(&mut out, &format!("dec.{l}.self_attn"), d, rel);
        ln_specs(&mut out, &format!("dec.{l}.ln1"), d);
        attention_specs(&mut out, &format!("dec.{l}.cross_attn"), d, None);
        ln_specs(&mut out, &format!("dec.{l}.ln2"), d);
        ffn_specs(&mut out, &format!("dec.{l}.ffn"), d, cfg.d_ff());
        ln_specs(&mut out, &format!("dec.{l}.ln3"), d);
    }
    out
}

/// Named weight tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ParameterSet { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Checks that names and shapes are exactly those `cfg` implies.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = parameter_specs(cfg);
        if specs.len() != self.tensors.len() {
            return Err(Error::Data(format!(
                "parameter set has {} tensors, the model needs {}",
                self.tensors.len(),
                specs.len()
            )));
        }
        for s in specs {
            match self.tensors.get(&s.name) {
                None => return Err(Error::Data(format!("missing parameter {}", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::Shape {
                        op: "parameter",
                        lhs: t.shape().to_vec(),
                        rhs: s.shape,
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Uniform Xavier weights, zero biases, unit LN gains; residual-branch output
/// matrices scaled by (2L)^(-1/4) when `cfg.residual_scaling` is set.
/// Each tensor draws from its own stream keyed by (seed, name).
pub fn init_parameters<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    let mut tensors = BTreeMap::new();
    for s in parameter_specs(cfg) {
        let mut rng = seed::rng(&[seed, seed::name_hash(&s.name)]);
        let uniform = |rng: &mut rand_chacha::ChaCha8Rng, bound: f64, n: usize| -> Vec<T> {
            (0..n).map(|_| T::from_f64c(rng.gen_range(-bound..=bound))).collect()
        };
        let n: usize = s.shape.iter().product();
        let data = match s.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Embedding => uniform(&mut rng, (3.0 / cfg.d_model as f64).sqrt(), n),
            Init::RelTable | Init::Weight { .. } => {
                let (fan_in, fan_out) = (s.shape[0] as f64, s.shape[1] as f64);
                let mut bound = (6.0 / (fan_in + fan_out)).sqrt();
                if let Init::Weight { residual_out: true } = s.init {
                    if cfg.residual_scaling {
                        let layers = if s.name.starts_with("enc.") { cfg.enc_layers } else { cfg.dec_layers };
                        bound *= (2.0 * layers as f64).powf(-0.25);
                    }
                }
                uniform(&mut rng, bound, n)
            }
        };
        tensors.insert(s.name, Tensor::new(&s.shape, data)?);
    }
    Ok(ParameterSet { tensors })
}

/// Lazily records parameters on a graph, as trainable leaves or constants.
pub struct Bound<'g, 'p, T: Real> {
    graph: &'g Graph<T>,
    params: &'p ParameterSet<T>,
    trainable: bool,
    vars: RefCell<HashMap<String, Var<'g, T>>>,
}

impl<'g, 'p, T: Real> Bound<'g, 'p, T> {
    pub fn new(graph: &'g Graph<T>, params: &'p ParameterSet<T>, trainable: bool) -> Self {
        Bound {
            graph,
            params,
            trainable,
            vars: RefCell::new(HashMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?
            .clone();
        let v = if self.trainable { self.graph.param(t) } else { self.graph.constant(t) };
        self.vars.borrow_mut().insert(name.to_owned(), v);
        Ok(v)
    }

    /// Parameters touched so far, by name.
    pub fn bound_vars(&self) -> Vec<(String, Var<'g, T>)> {
        let mut v: Vec<(String, Var<'g, T>)> =
            self.vars.borrow().iter().map(|(k, v)| (k.clone(), *v)).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}

/// Per-dimension standard deviation summary of one LN input.
#[derive(Debug, Clone, PartialEq)]
pub struct LnStat {
    pub site: String,
    pub min_dim_std: f64,
    pub max_dim_std: f64,
}

/// Forward-pass settings.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub training: bool,
    pub seed: u64,
    pub step: u64,
    /// When set, LN input statistics are appended here.
    pub probe: Option<&'a RefCell<Vec<LnStat>>>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions::default()
    }

    pub fn train(seed: u64, step: u64) -> Self {
        ForwardOptions {
            training: true,
            seed,
            step,
            probe: None,
        }
    }
}

fn dim_std_summary<T: Real>(x: &Tensor<T>) -> (f64, f64) {
    let d = *x.shape().last().unwrap_or(&1);
    let rows = x.numel() / d.max(1);
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for row in x.data().chunks(d) {
        for (j, v) in row.iter().enumerate() {
            let v = v.as_f64();
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    let n = rows.max(1) as f64;
    let stds = mean.iter().zip(&sq).map(|(m, s)| {
        let m = m / n;
        (s / n - m * m).max(0.0).sqrt()
    });
    stds.fold((f64::INFINITY, 0.0), |(lo, hi), s| (lo.min(s), hi.max(s)))
}

struct Ctx<'o, 'a> {
    opts: &'o ForwardOptions<'a>,
    dropout: f64,
    eps: f64,
}

impl Ctx<'_, '_> {
    fn residual<'g, T: Real>(
        &self,
        p: &Bound<'g, '_, T>,
        x: Var<'g, T>,
        branch: Var<'g, T>,
        ln: &str,
        site: u64,
    ) -> Result<Var<'g, T>> {
        let mut rng = seed::rng(&[self.opts.seed, self.opts.step, site]);
        let y = x.add(&branch.dropout(self.dropout, self.opts.training, &mut rng)?)?;
        if let Some(probe) = self.opts.probe {
            let (lo, hi) = dim_std_summary(&y.value());
            probe.borrow_mut().push(LnStat {
                site: ln.to_owned(),
                min_dim_std: lo,
                max_dim_std: hi,
            });
        }
        y.layer_norm(&p.get(&format!("{ln}.gain"))?, &p.get(&format!("{ln}.bias"))?, T::from_f64c(self.eps))
    }
}

/// Relative-position tables for one self-attention layer.
#[derive(Clone, Copy)]
pub struct RelPos<'g, T: Real> {
    pub keys: Var<'g, T>,
    pub values: Var<'g, T>,
    pub clip: usize,
}

/// Additive mask of 0 and -inf, shape `[B, H, Lq, Lk]`, hiding padded keys
/// and, if `causal`, keys after the query position (`q_offset` shifts the
/// query positions for incremental decoding).
pub fn attention_mask<T: Real>(
    key_pad: Option<(&[bool], usize)>,
    batch: usize,
    heads: usize,
    lq: usize,
    lk: usize,
    causal: bool,
    q_offset: usize,
) -> Tensor<T> {
    let ninf = T::neg_infinity();
    let mut data = Vec::with_capacity(batch * heads * lq * lk);
    for b in 0..batch {
        for _ in 0..heads {
            for i in 0..lq {
                for j in 0..lk {
                    let padded = key_pad.is_some_and(|(m, cols)| m[b * cols + j]);
                    let future = causal && j > i + q_offset;
                    data.push(if padded || future { ninf } else { T::zero() });
                }
            }
        }
    }
    Tensor::new(&[batch, heads, lq, lk], data).expect("mask shape")
}

/// Scaled dot-product attention over split heads.
///
/// `q` is `[B, H, Lq, dh]`, `k` and `v` are `[B, H, Lk, dh]`. With `rel`
/// the logits gain `q · rel_keys[clip(j - i)]` and the output gains
/// `Σ_j p_ij · rel_vals[clip(j - i)]`. `mask`, if given, must be
/// `[B, H, Lq, Lk]` and is added to the scaled logits.
pub fn attention<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    rel: Option<RelPos<'g, T>>,
    mask: Option<&Tensor<T>>,
    q_offset: usize,
) -> Result<Var<'g, T>> {
    let qs = q.shape();
    let ks = k.shape();
    if qs.len() != 4 || ks.len() != 4 || qs[..2] != ks[..2] || qs[3] != ks[3] || v.shape() != ks {
        return Err(Error::Shape {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let (lq, lk, dh) = (qs[2], ks[2], qs[3]);
    let mut scores = q.matmul_t(&k)?;
    let index = rel.map(|r| Arc::new(rel_table_index(lq, lk, q_offset, r.clip)));
    if let (Some(r), Some(idx)) = (rel, &index) {
        let qr = q.matmul_t(&r.keys)?;
        scores = scores.add(&qr.gather_last(idx.clone(), lk)?)?;
    }
    scores = scores.scale(T::from_f64c(1.0 / (dh as f64).sqrt()));
    if let Some(m) = mask {
        if m.shape() != scores.shape().as_slice() {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: m.shape().to_vec(),
                rhs: scores.shape(),
            });
        }
        scores = scores.add(&q.graph().constant(m.clone()))?;
    }
    let p = scores.softmax(3)?;
    let mut out = p.matmul(&v)?;
    if let (Some(r), Some(idx)) = (rel, index) {
        let pr = p.scatter_last(idx, 2 * r.clip + 1)?;
        out = out.add(&pr.matmul(&r.values)?)?;
    }
    Ok(out)
}

fn linear<'g, T: Real>(p: &Bound<'g, '_, T>, x: Var<'g, T>, prefix: &str) -> Result<Var<'g, T>> {
    x.matmul(&p.get(&format!("{prefix}.weight"))?)?
        .add(&p.get(&format!("{prefix}.bias"))?)
}

fn split_heads<'g, T: Real>(x: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], heads, s[2] / heads])?.permute(&[0, 2, 1, 3])
}

fn merge_heads<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    x.permute(&[0, 2, 1, 3])?.reshape(&[s[0], s[2], s[1] * s[3]])
}

fn rel_pos<'g, T: Real>(p: &Bound<'g, '_, T>, prefix: &str, clip: usize) -> Result<RelPos<'g, T>> {
    Ok(RelPos {
        keys: p.get(&format!("{prefix}.rel_k"))?,
        values: p.get(&format!("{prefix}.rel_v"))?,
        clip,
    })
}

fn ffn<'g, T: Real>(p: &Bound<'g, '_, T>, x: Var<'g, T>, prefix: &str) -> Result<Var<'g, T>> {
    let h = x
        .matmul(&p.get(&format!("{prefix}.w1"))?)?
        .add(&p.get(&format!("{prefix}.b1"))?)?
        .gelu();
    h.matmul(&p.get(&format!("{prefix}.w2"))?)?
        .add(&p.get(&format!("{prefix}.b2"))?)
}

fn embed<'g, T: Real>(p: &Bound<'g, '_, T>, table: &str, ids: &TokenMatrix, d: usize) -> Result<Var<'g, T>> {
    let flat: Vec<usize> = ids.data.iter().map(|&i| i as usize).collect();
    p.get(table)?
        .embedding(&flat)?
        .reshape(&[ids.rows, ids.cols, d])
        .map(|e| e.scale(T::from_f64c((d as f64).sqrt())))
}

fn check_len(cfg: &ModelConfig, m: &TokenMatrix, what: &str) -> Result<()> {
    if m.cols > cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "{what} length {} exceeds max_len {}",
            m.cols, cfg.max_len
        )));
    }
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::InvalidArgument(format!("empty {what} batch")));
    }
    Ok(())
}

/// Site ids for dropout streams: (layer, sublayer) in a flat numbering.
fn site(decoder: bool, layer: usize, sub: u64) -> u64 {
    ((decoder as u64) << 40) | ((layer as u64) << 8) | sub
}

/// Encoder output `[B, Ls, d]`.
pub fn encode<'g, T: Real>(
    p: &Bound<'g, '_, T>,
    cfg: &ModelConfig,
    src: &TokenMatrix,
    opts: &ForwardOptions<'_>,
) -> Result<Var<'g, T>> {
    check_len(cfg, src, "source")?;
    let ctx = Ctx {
        opts,
        dropout: cfg.dropout,
        eps: cfg.ln_eps,
    };
    let (b, l, h) = (src.rows, src.cols, cfg.heads);
    let mask = attention_mask::<T>(Some((&src.pad_mask(), l)), b, h, l, l, false, 0);
    let mut x = embed(p, "src_embed", src, cfg.d_model)?;
    for layer in 0..cfg.enc_layers {
        let pre = format!("enc.{layer}");
        let att = format!("{pre}.self_attn");
        let q = split_heads(linear(p, x, &format!("{att}.q"))?, h)?;
        let k = split_heads(linear(p, x, &format!("{att}.k"))?, h)?;
        let v = split_heads(linear(p, x, &format!("{att}.v"))?, h)?;
        let a = attention(q, k, v, Some(rel_pos(p, &att, cfg.rel_clip)?), Some(&mask), 0)?;
        let a = linear(p, merge_heads(a)?, &format!("{att}.o"))?;
        x = ctx.residual(p, x, a, &format!("{pre}.ln1"), site(false, layer, 0))?;
        let f = ffn(p, x, &format!("{pre}.ffn"))?;
        x = ctx.residual(p, x, f, &format!("{pre}.ln2"), site(false, layer, 1))?;
    }
    Ok(x)
}

/// Decoder pass over a full target prefix; returns logits `[B, Lt, V]`.
pub fn decode_full<'g, T: Real>(
    p: &Bound<'g, '_, T>,
    cfg: &ModelConfig,
    enc: Var<'g, T>,
    src: &TokenMatrix,
    tgt_in: &TokenMatrix,
    opts: &ForwardOptions<'_>,
) -> Result<Var<'g, T>> {
    check_len(cfg, tgt_in, "target")?;
    if tgt_in.rows != src.rows {
        return Err(Error::InvalidArgument(format!(
            "{} source rows but {} target rows",
            src.rows, tgt_in.rows
        )));
    }
    let ctx = Ctx {
        opts,
        dropout: cfg.dropout,
        eps: cfg.ln_eps,
    };
    let (b, lt, ls, h) = (tgt_in.rows, tgt_in.cols, src.cols, cfg.heads);
    let self_mask = attention_mask::<T>(None, b, h, lt, lt, true, 0);
    let cross_mask = attention_mask::<T>(Some((&src.pad_mask(), ls)), b, h, lt, ls, false, 0);
    let mut y = embed(p, "tgt_embed", tgt_in, cfg.d_model)?;
    for layer in 0..cfg.dec_layers {
        let pre = format!("dec.{layer}");
        let att = format!("{pre}.self_attn");
        let q = split_heads(linear(p, y, &format!("{att}.q"))?, h)?;
        let k = split_heads(linear(p, y, &format!("{att}.k"))?, h)?;
        let v = split_heads(linear(p, y, &format!("{att}.v"))?, h)?;
        let a = attention(q, k, v, Some(rel_pos(p, &att, cfg.rel_clip)?), Some(&self_mask), 0)?;
        let a = linear(p, merge_heads(a)?, &format!("{att}.o"))?;
        y = ctx.residual(p, y, a, &format!("{pre}.ln1"), site(true, layer, 0))?;

        let cross = format!("{pre}.cross_attn");
        let q = split_heads(linear(p, y, &format!("{cross}.q"))?, h)?;
        let k = split_heads(linear(p, enc, &format!("{cross}.k"))?, h)?;
        let v = split_heads(linear(p, enc, &format!("{cross}.v"))?, h)?;
        let c = attention(q, k, v, None, Some(&cross_mask), 0)?;
        let c = linear(p, merge_heads(c)?, &format!("{cross}.o"))?;
        y = ctx.residual(p, y, c, &format!("{pre}.ln2"), site(true, layer, 1))?;

        let f = ffn(p, y, &format!("{pre}.ffn"))?;
        y = ctx.residual(p, y, f, &format!("{pre}.ln3"), site(true, layer, 2))?;
    }
    let logits = y
        .reshape(&[b * lt, cfg.d_model])?
        .matmul_t(&p.get("tgt_embed")?)?;
    logits.reshape(&[b, lt, cfg.tgt_vocab])
}

/// Logits `[B, Lt, V]` for teacher-forced decoding.
pub fn forward<'g, T: Real>(
    p: &Bound<'g, '_, T>,
    cfg: &ModelConfig,
    src: &TokenMatrix,
    tgt_in: &TokenMatrix,
    opts: &ForwardOptions<'_>,
) -> Result<Var<'g, T>> {
    let enc = encode(p, cfg, src, opts)?;
    decode_full(p, cfg, enc, src, tgt_in, opts)
}

/// Label-smoothed cross entropy of `forward` against `tgt_out`, averaged
/// over non-pad target tokens.
pub fn loss<'g, T: Real>(
    p: &Bound<'g, '_, T>,
    cfg: &ModelConfig,
    src: &TokenMatrix,
    tgt_in: &TokenMatrix,
    tgt_out: &TokenMatrix,
    smoothing: f64,
    opts: &ForwardOptions<'_>,
) -> Result<Var<'g, T>> {
    let logits = forward(p, cfg, src, tgt_in, opts)?;
    let targets: Vec<usize> = tgt_out.data.iter().map(|&t| t as usize).collect();
    logits
        .reshape(&[tgt_out.rows * tgt_out.cols, cfg.tgt_vocab])?
        .cross_entropy(&targets, smoothing, crate::subword::PAD as usize)
}

struct LayerCache<T> {
    self_k: Option<Tensor<T>>,
    self_v: Option<Tensor<T>>,
    cross_k: Tensor<T>,
    cross_v: Tensor<T>,
}

/// Incremental decoding state for a batch of hypotheses.
pub struct DecoderState<T: Real = f32> {
    src_pad: Vec<bool>,
    src_len: usize,
    layers: Vec<LayerCache<T>>,
    /// Number of target positions already consumed.
    pub pos: usize,
    rows: usize,
}

impl<T: Real> DecoderState<T> {
    /// Runs the encoder and precomputes cross-attention keys and values.
    pub fn new(params: &ParameterSet<T>, cfg: &ModelConfig, src: &TokenMatrix) -> Result<Self> {
        let g = Graph::<T>::new();
        let p = Bound::new(&g, params, false);
        let enc = encode(&p, cfg, src, &ForwardOptions::eval())?;
        let mut layers = Vec::with_capacity(cfg.dec_layers);
        for layer in 0..cfg.dec_layers {
            let cross = format!("dec.{layer}.cross_attn");
            layers.push(LayerCache {
                self_k: None,
                self_v: None,
                cross_k: split_heads(linear(&p, enc, &format!("{cross}.k"))?, cfg.heads)?.value(),
                cross_v: split_heads(linear(&p, enc, &format!("{cross}.v"))?, cfg.heads)?.value(),
            });
        }
        Ok(DecoderState {
            src_pad: src.pad_mask(),
            src_len: src.cols,
            layers,
            pos: 0,
            rows: src.rows,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Keeps rows `indices` (with repetition) in the given order.
    pub fn reorder(&mut self, indices: &[usize]) -> Result<()> {
        for c in &mut self.layers {
            for t in [&mut c.self_k, &mut c.self_v].into_iter().flatten() {
                *t = t.index_select0(indices)?;
            }
            c.cross_k = c.cross_k.index_select0(indices)?;
            c.cross_v = c.cross_v.index_select0(indices)?;
        }
        let l = self.src_len;
        self.src_pad = indices
            .iter()
            .flat_map(|&r| self.src_pad[r * l..(r + 1) * l].iter().copied())
            .collect();
        self.rows = indices.len();
        Ok(())
    }

    /// Feeds one token per row and returns next-token log-probabilities `[B, V]`.
    pub fn step(&mut self, params: &ParameterSet<T>, cfg: &ModelConfig, tokens: &[u32]) -> Result<Tensor<T>> {
        if tokens.len() != self.rows {
            return Err(Error::InvalidArgument(format!(
                "{} tokens for {} decoder rows",
                tokens.len(),
                self.rows
            )));
        }
        if self.pos >= cfg.max_len {
            return Err(Error::InvalidArgument(format!("decoding past max_len {}", cfg.max_len)));
        }
        let g = Graph::<T>::new();
        let p = Bound::new(&g, params, false);
        let opts = ForwardOptions::eval();
        let ctx = Ctx {
            opts: &opts,
            dropout: 0.0,
            eps: cfg.ln_eps,
        };
        let (b, h) = (self.rows, cfg.heads);
        let ids = TokenMatrix {
            rows: b,
            cols: 1,
            data: tokens.to_vec(),
        };
        let cross_mask = attention_mask::<T>(Some((&self.src_pad, self.src_len)), b, h, 1, self.src_len, false, 0);
        let mut y = embed(&p, "tgt_embed", &ids, cfg.d_model)?;
        for layer in 0..cfg.dec_layers {
            let pre = format!("dec.{layer}");
            let att = format!("{pre}.self_attn");
            let q = split_heads(linear(&p, y, &format!("{att}.q"))?, h)?;
            let k_new = split_heads(linear(&p, y, &format!("{att}.k"))?, h)?.value();
            let v_new = split_heads(linear(&p, y, &format!("{att}.v"))?, h)?.value();
            let cache = &mut self.layers[layer];
            let k_all = match &cache.self_k {
                Some(k) => Tensor::concat(&[k, &k_new], 2)?,
                None => k_new,
            };
            let v_all = match &cache.self_v {
                Some(v) => Tensor::concat(&[v, &v_new], 2)?,
                None => v_new,
            };
            cache.self_k = Some(k_all.clone());
            cache.self_v = Some(v_all.clone());
            let a = attention(
                q,
                g.constant(k_all),
                g.constant(v_all),
                Some(rel_pos(&p, &att, cfg.rel_clip)?),
                None,
                self.pos,
            )?;
            let a = linear(&p, merge_heads(a)?, &format!("{att}.o"))?;
            y = ctx.residual(&p, y, a, &format!("{pre}.ln1"), 0)?;

            let cross = format!("{pre}.cross_attn");
            let q = split_heads(linear(&p, y, &format!("{cross}.q"))?, h)?;
            let k = g.constant(cache.cross_k.clone());
            let v = g.constant(cache.cross_v.clone());
            let c = attention(q, k, v, None, Some(&cross_mask), 0)?;
            let c = linear(&p, merge_heads(c)?, &format!("{cross}.o"))?;
            y = ctx.residual(&p, y, c, &format!("{pre}.ln2"), 0)?;

            let f = ffn(&p, y, &format!("{pre}.ffn"))?;
            y = ctx.residual(&p, y, f, &format!("{pre}.ln3"), 0)?;
        }
        self.pos += 1;
        let logits = y.reshape(&[b, cfg.d_model])?.matmul_t(&p.get("tgt_embed")?)?.value();
        let lp = crate::tensor::log_softmax_rows(logits.data(), cfg.tgt_vocab);
        Tensor::new(&[b, cfg.tgt_vocab], lp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 8,
            heads: 2,
            rel_clip: 2,
            dropout: 0.0,
            src_vocab: 11,
            tgt_vocab: 9,
            max_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn relative_index_examples() {
        assert_eq!(relative_index(3, 5, 16), 2);
        assert_eq!(relative_index(0, 40, 16), 16);
        assert_eq!(relative_index(40, 0, 16), -16);
        assert_eq!(relative_index(7, 7, 16), 0);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..tiny() }.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig {
            d_model: 256,
            heads: 4,
            enc_layers: 1,
            dec_layers: 1,
            src_vocab: 10,
            tgt_vocab: 10,
            ..ModelConfig::default()
        };
        let p = init_parameters::<f32>(&cfg, 0).unwrap();
        assert_eq!(p.get("enc.0.self_attn.q.weight").unwrap().shape(), &[256, 256]);
        assert_eq!(cfg.head_dim(), 64);
        assert_eq!(p.get("enc.0.self_attn.rel_k").unwrap().shape(), &[33, 64]);
        p.check_against(&cfg).unwrap();
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_parameters::<f32>(&tiny(), 5).unwrap();
        let b = init_parameters::<f32>(&tiny(), 5).unwrap();
        let c = init_parameters::<f32>(&tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        let cfg = tiny();
        let params = init_parameters::<f64>(&cfg, 3).unwrap();
        let src = TokenMatrix::from_rows(&[vec![5, 6, 7, 2], vec![8, 2]]);
        let tgt = TokenMatrix::from_rows(&[vec![1, 4, 5, 6, 7, 8], vec![1, 8, 7, 6, 5, 4]]);
        let g = Graph::<f64>::new();
        let p = Bound::new(&g, &params, false);
        let full = forward(&p, &cfg, &src, &tgt, &ForwardOptions::eval()).unwrap().value();
        let mut st = DecoderState::new(&params, &cfg, &src).unwrap();
        for t in 0..tgt.cols {
            let lp = st.step(&params, &cfg, &[tgt.get(0, t), tgt.get(1, t)]).unwrap();
            for r in 0..2 {
                let row = &full.data()[(r * tgt.cols + t) * cfg.tgt_vocab..(r * tgt.cols + t + 1) * cfg.tgt_vocab];
                let lse = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let z: f64 = row.iter().map(|x| (x - lse).exp()).sum::<f64>().ln() + lse;
                for v in 0..cfg.tgt_vocab {
                    let want = row[v] - z;
                    let got = lp.data()[r * cfg.tgt_vocab + v];
                    assert!((want - got).abs() < 1e-9, "t={t} r={r}");
                }
            }
        }
    }

    #[test]
    fn reorder_duplicates_rows() {
        let cfg = tiny();
        let params = init_parameters::<f64>(&cfg, 3).unwrap();
        let src = TokenMatrix::from_rows(&[vec![5, 6, 2], vec![7, 2]]);
        let mut st = DecoderState::new(&params, &cfg, &src).unwrap();
        st.step(&params, &cfg, &[1, 1]).unwrap();
        st.reorder(&[1, 1, 0]).unwrap();
        let lp = st.step(&params, &cfg, &[4, 4, 4]).unwrap();
        let v = cfg.tgt_vocab;
        assert_eq!(lp.data()[..v], lp.data()[v..2 * v]);
        assert_ne!(lp.data()[..v], lp.data()[2 * v..]);
    }

    #[test]
    fn too_long_input_is_rejected() {
        let cfg = ModelConfig { max_len: 3, ..tiny() };
        let params = init_parameters::<f32>(&cfg, 0).unwrap();
        let g = Graph::<f32>::new();
        let p = Bound::new(&g, &params, false);
        let src = TokenMatrix::from_rows(&[vec![5, 5, 5, 2]]);
        let tgt = TokenMatrix::from_rows(&[vec![1, 4]]);
        assert!(forward(&p, &cfg, &src, &tgt, &ForwardOptions::eval()).is_err());
    }
}
