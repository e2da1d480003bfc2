//! Single-block projection heads: a standard pre-norm Transformer block ("GPT head") and a
//! normalized Transformer block whose hidden states and weight slices live on the unit sphere
//! ("nGPT head"), plus pooling into a unit embedding.
//!
//! Forward passes are written once against the tape so that training, evaluation and tracing all
//! share the same arithmetic. Several samples are processed together by stacking their tokens;
//! attention is computed per sample over its own row span.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConcatAxis, NormMode, Reduce, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RMS_NORM_EPS: f64 = 1e-6;
pub const INIT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Gpt,
    Ngpt,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Gpt => "gpt",
            HeadKind::Ngpt => "ngpt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Cls,
    Last,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub d: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub causal: bool,
    pub pooling: Pooling,
}

impl HeadConfig {
    /// `d_mlp = 4d`; causal attention exactly when pooling takes the last token.
    pub fn new(d: usize, n_heads: usize, pooling: Pooling) -> Result<Self> {
        let cfg = Self {
            d,
            n_heads,
            d_mlp: 4 * d,
            causal: pooling == Pooling::Last,
            pooling,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads ({}) must divide d ({})",
                self.n_heads, self.d
            )));
        }
        if self.d_mlp == 0 {
            return Err(Error::Config("d_mlp must be at least 1".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d / self.n_heads
    }
}

/// Weights shared by both block kinds, generic so the same layout holds tensors or tape vars.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    pub w_o: T,
    pub w_u: T,
    pub w_v_mlp: T,
    pub w_o_mlp: T,
}

impl<T> BlockWeights<T> {
    fn flat(&self) -> Vec<&T> {
        let mut out: Vec<&T> = Vec::new();
        out.extend(&self.w_q);
        out.extend(&self.w_k);
        out.extend(&self.w_v);
        out.extend([&self.w_o, &self.w_u, &self.w_v_mlp, &self.w_o_mlp]);
        out
    }

    fn flat_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = Vec::new();
        out.extend(self.w_q.iter_mut());
        out.extend(self.w_k.iter_mut());
        out.extend(self.w_v.iter_mut());
        out.extend([
            &mut self.w_o,
            &mut self.w_u,
            &mut self.w_v_mlp,
            &mut self.w_o_mlp,
        ]);
        out
    }

    fn names(n_heads: usize) -> Vec<String> {
        let mut out = Vec::new();
        for m in ["w_q", "w_k", "w_v"] {
            out.extend((0..n_heads).map(|h| format!("attn.{m}.{h}")));
        }
        out.extend(["attn.w_o", "mlp.w_u", "mlp.w_v", "mlp.w_o"].map(String::from));
        out
    }

    fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BlockWeights<U> {
        BlockWeights {
            w_q: self.w_q.iter().map(&mut f).collect(),
            w_k: self.w_k.iter().map(&mut f).collect(),
            w_v: self.w_v.iter().map(&mut f).collect(),
            w_o: f(&self.w_o),
            w_u: f(&self.w_u),
            w_v_mlp: f(&self.w_v_mlp),
            w_o_mlp: f(&self.w_o_mlp),
        }
    }

    fn from_iter(n_heads: usize, it: &mut impl Iterator<Item = T>) -> Option<Self> {
        let mut take = |n: usize| -> Option<Vec<T>> { (0..n).map(|_| it.next()).collect() };
        let w_q = take(n_heads)?;
        let w_k = take(n_heads)?;
        let w_v = take(n_heads)?;
        let mut rest = take(4)?.into_iter();
        Some(Self {
            w_q,
            w_k,
            w_v,
            w_o: rest.next()?,
            w_u: rest.next()?,
            w_v_mlp: rest.next()?,
            w_o_mlp: rest.next()?,
        })
    }
}

fn block_shapes(cfg: &HeadConfig) -> Vec<[usize; 2]> {
    let (d, dh, dm) = (cfg.d, cfg.d_head(), cfg.d_mlp);
    let mut out = vec![[d, dh]; 3 * cfg.n_heads];
    out.extend([[d, d], [d, dm], [d, dm], [dm, d]]);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GptParams<T> {
    pub block: BlockWeights<T>,
    /// RMSNorm gain before attention, `1×d`.
    pub attn_norm_gain: T,
    /// RMSNorm gain before the MLP, `1×d`.
    pub mlp_norm_gain: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGptParams<T> {
    pub block: BlockWeights<T>,
    /// Attention eigen-rate, `1×d`.
    pub alpha_attn: T,
    /// MLP eigen-rate, `1×d`.
    pub alpha_mlp: T,
    /// `1×d_head`, shared by every attention head.
    pub s_qk: T,
    /// `1×d_mlp`.
    pub s_u: T,
    /// `1×d_mlp`.
    pub s_v: T,
}

pub type GptHeadParams = GptParams<Tensor>;
pub type NGptHeadParams = NGptParams<Tensor>;

/// Learnable state of either head kind. Parameters are listed in a fixed declaration order
/// (see [`HeadParams::names`]) used by checkpoints and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    Gpt(GptHeadParams),
    Ngpt(NGptHeadParams),
}

/// Head parameters recorded on a tape.
pub enum BoundHead<'t> {
    Gpt(GptParams<Var<'t>>),
    Ngpt(NGptParams<Var<'t>>),
}

impl<'t> BoundHead<'t> {
    /// Assembles a head from leaves already on a tape, in declaration order.
    pub fn from_vars(kind: HeadKind, cfg: &HeadConfig, vars: &[Var<'t>]) -> Result<Self> {
        let shapes = HeadParams::shapes(kind, cfg);
        let actual: Vec<[usize; 2]> = vars.iter().map(|v| v.shape()).collect();
        if shapes != actual {
            return Err(Error::Dimension(format!("{kind} head variables do not match the config")));
        }
        let mut it = vars.iter().copied();
        let block = BlockWeights::from_iter(cfg.n_heads, &mut it).expect("length checked");
        let mut next = || it.next().expect("length checked");
        Ok(match kind {
            HeadKind::Gpt => BoundHead::Gpt(GptParams {
                block,
                attn_norm_gain: next(),
                mlp_norm_gain: next(),
            }),
            HeadKind::Ngpt => BoundHead::Ngpt(NGptParams {
                block,
                alpha_attn: next(),
                alpha_mlp: next(),
                s_qk: next(),
                s_u: next(),
                s_v: next(),
            }),
        })
    }
}

impl HeadParams {
    /// Weights ~ N(0, 1/d); nGPT weights are then renormalized, α = 0.05, scale vectors = 1.
    pub fn init(kind: HeadKind, cfg: &HeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (cfg.d as f64).sqrt()).expect("positive std");
        let mut random = |[r, c]: [usize; 2]| {
            Tensor::from_raw(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect())
        };
        let mut it = block_shapes(cfg).into_iter().map(&mut random);
        let block = BlockWeights::from_iter(cfg.n_heads, &mut it).expect("shape list matches layout");
        Ok(match kind {
            HeadKind::Gpt => HeadParams::Gpt(GptParams {
                block,
                attn_norm_gain: Tensor::filled(1, cfg.d, 1.0),
                mlp_norm_gain: Tensor::filled(1, cfg.d, 1.0),
            }),
            HeadKind::Ngpt => {
                let mut p = NGptParams {
                    block,
                    alpha_attn: Tensor::filled(1, cfg.d, INIT_ALPHA),
                    alpha_mlp: Tensor::filled(1, cfg.d, INIT_ALPHA),
                    s_qk: Tensor::filled(1, cfg.d_head(), 1.0),
                    s_u: Tensor::filled(1, cfg.d_mlp, 1.0),
                    s_v: Tensor::filled(1, cfg.d_mlp, 1.0),
                };
                p.renormalize()?;
                HeadParams::Ngpt(p)
            }
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            HeadParams::Gpt(_) => HeadKind::Gpt,
            HeadParams::Ngpt(_) => HeadKind::Ngpt,
        }
    }

    pub fn names(kind: HeadKind, cfg: &HeadConfig) -> Vec<String> {
        let mut names = BlockWeights::<()>::names(cfg.n_heads);
        match kind {
            HeadKind::Gpt => names.extend(["norm.attn_gain", "norm.mlp_gain"].map(String::from)),
            HeadKind::Ngpt => names.extend(
                ["alpha.attn", "alpha.mlp", "scale.qk", "scale.u", "scale.v"].map(String::from),
            ),
        }
        names
    }

    pub fn shapes(kind: HeadKind, cfg: &HeadConfig) -> Vec<[usize; 2]> {
        let mut shapes = block_shapes(cfg);
        match kind {
            HeadKind::Gpt => shapes.extend([[1, cfg.d], [1, cfg.d]]),
            HeadKind::Ngpt => shapes.extend([
                [1, cfg.d],
                [1, cfg.d],
                [1, cfg.d_head()],
                [1, cfg.d_mlp],
                [1, cfg.d_mlp],
            ]),
        }
        shapes
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            HeadParams::Gpt(p) => {
                let mut v = p.block.flat();
                v.extend([&p.attn_norm_gain, &p.mlp_norm_gain]);
                v
            }
            HeadParams::Ngpt(p) => {
                let mut v = p.block.flat();
                v.extend([&p.alpha_attn, &p.alpha_mlp, &p.s_qk, &p.s_u, &p.s_v]);
                v
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            HeadParams::Gpt(p) => {
                let mut v = p.block.flat_mut();
                v.extend([&mut p.attn_norm_gain, &mut p.mlp_norm_gain]);
                v
            }
            HeadParams::Ngpt(p) => {
                let mut v = p.block.flat_mut();
                v.extend([
                    &mut p.alpha_attn,
                    &mut p.alpha_mlp,
                    &mut p.s_qk,
                    &mut p.s_u,
                    &mut p.s_v,
                ]);
                v
            }
        }
    }

    /// Rebuilds parameters from tensors in declaration order, checking every shape.
    pub fn from_tensors(kind: HeadKind, cfg: &HeadConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = Self::shapes(kind, cfg);
        if shapes.len() != tensors.len() {
            return Err(Error::Dimension(format!(
                "{kind} head needs {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        let names = Self::names(kind, cfg);
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(&names) {
            if t.shape() != *s {
                return Err(Error::Dimension(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    s
                )));
            }
        }
        let mut it = tensors.into_iter();
        let block = BlockWeights::from_iter(cfg.n_heads, &mut it).expect("length checked");
        let mut next = || it.next().expect("length checked");
        Ok(match kind {
            HeadKind::Gpt => HeadParams::Gpt(GptParams {
                block,
                attn_norm_gain: next(),
                mlp_norm_gain: next(),
            }),
            HeadKind::Ngpt => HeadParams::Ngpt(NGptParams {
                block,
                alpha_attn: next(),
                alpha_mlp: next(),
                s_qk: next(),
                s_u: next(),
                s_v: next(),
            }),
        })
    }

    /// Records every parameter as a tape leaf. The returned list follows declaration order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> (BoundHead<'t>, Vec<Var<'t>>) {
        let mut leaves = Vec::new();
        let mut leaf = |t: &Tensor| {
            let v = tape.leaf(t.clone());
            leaves.push(v);
            v
        };
        let bound = match self {
            HeadParams::Gpt(p) => BoundHead::Gpt(GptParams {
                block: p.block.map(&mut leaf),
                attn_norm_gain: leaf(&p.attn_norm_gain),
                mlp_norm_gain: leaf(&p.mlp_norm_gain),
            }),
            HeadParams::Ngpt(p) => BoundHead::Ngpt(NGptParams {
                block: p.block.map(&mut leaf),
                alpha_attn: leaf(&p.alpha_attn),
                alpha_mlp: leaf(&p.alpha_mlp),
                s_qk: leaf(&p.s_qk),
                s_u: leaf(&p.s_u),
                s_v: leaf(&p.s_v),
            }),
        };
        (bound, leaves)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Single-sample forward pass, `T×d` in and out.
    pub fn forward(&self, cfg: &HeadConfig, h_in: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_trace(cfg, h_in)?.output)
    }

    pub fn forward_with_trace(&self, cfg: &HeadConfig, h_in: &Tensor) -> Result<Trace> {
        let tape = Tape::checked();
        let (bound, _) = self.bind(&tape);
        let x = tape.leaf(h_in.clone());
        let t = block_forward(&bound, cfg, x, &[h_in.rows()])?;
        Ok(Trace {
            input: h_in.clone(),
            attention_out: t.attention_out.value(),
            post_attention: t.post_attention.value(),
            mlp_out: t.mlp_out.value(),
            output: t.output.value(),
        })
    }

    /// Pooled unit embeddings for a list of samples, one row each.
    pub fn embed(&self, cfg: &HeadConfig, samples: &[&Tensor], mode: NormMode) -> Result<Tensor> {
        let tape = Tape::new(mode);
        let (bound, _) = self.bind(&tape);
        let (x, lens) = stack_samples(&tape, samples, cfg.d)?;
        let trace = block_forward(&bound, cfg, x, &lens)?;
        Ok(pool(trace.output, &lens, cfg.pooling)?.value())
    }
}

/// Intermediate states of one block application.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub input: Tensor,
    /// Raw output of the attention module (before any residual or interpolation).
    pub attention_out: Tensor,
    /// `h'`: state after the attention sub-layer.
    pub post_attention: Tensor,
    /// Raw output of the MLP module.
    pub mlp_out: Tensor,
    /// `h`: block output.
    pub output: Tensor,
}

/// The same fields as [`Trace`], as tape variables over stacked tokens.
pub struct TraceVars<'t> {
    pub attention_out: Var<'t>,
    pub post_attention: Var<'t>,
    pub mlp_out: Var<'t>,
    pub output: Var<'t>,
}

/// Stacks `T_i×d` samples into one `(ΣT_i)×d` leaf.
pub fn stack_samples<'t>(tape: &'t Tape, samples: &[&Tensor], d: usize) -> Result<(Var<'t>, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples to embed".into()));
    }
    let mut data = Vec::new();
    let mut lens = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.cols() != d {
            return Err(Error::Dimension(format!(
                "sample {i} has width {}, head expects d = {d}",
                s.cols()
            )));
        }
        data.extend_from_slice(s.data());
        lens.push(s.rows());
    }
    let rows = lens.iter().sum();
    Ok((tape.leaf(Tensor::new(rows, d, data)?), lens))
}

/// Applies the block to stacked tokens; `lens` gives each sample's token count in order.
pub fn block_forward<'t>(
    head: &BoundHead<'t>,
    cfg: &HeadConfig,
    x: Var<'t>,
    lens: &[usize],
) -> Result<TraceVars<'t>> {
    let [rows, d] = x.shape();
    if d != cfg.d {
        return Err(Error::Dimension(format!("input width {d}, head expects {}", cfg.d)));
    }
    if lens.contains(&0) || lens.iter().sum::<usize>() != rows {
        return Err(Error::Dimension(format!(
            "token counts {lens:?} do not cover {rows} stacked rows"
        )));
    }
    match head {
        BoundHead::Gpt(p) => gpt_block(p, cfg, x, lens),
        BoundHead::Ngpt(p) => ngpt_block(p, cfg, x, lens),
    }
}

fn rms_norm<'t>(x: Var<'t>, gain: Var<'t>, d: usize) -> Result<Var<'t>> {
    // x / sqrt(mean(x²) + ε) == √d · x / sqrt(‖x‖² + dε)
    x.normalize_rows_eps(d as f64 * RMS_NORM_EPS)?
        .scale((d as f64).sqrt())?
        .mul(gain)
}

fn gpt_block<'t>(
    p: &GptParams<Var<'t>>,
    cfg: &HeadConfig,
    x: Var<'t>,
    lens: &[usize],
) -> Result<TraceVars<'t>> {
    let scale = 1.0 / (cfg.d_head() as f64).sqrt();
    let xa = rms_norm(x, p.attn_norm_gain, cfg.d)?;
    let mut head_q = Vec::with_capacity(cfg.n_heads);
    let mut head_k = Vec::with_capacity(cfg.n_heads);
    let mut head_v = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        head_q.push(xa.matmul(p.block.w_q[h])?.scale(scale)?);
        head_k.push(xa.matmul(p.block.w_k[h])?);
        head_v.push(xa.matmul(p.block.w_v[h])?);
    }
    let attn = attention(&head_q, &head_k, &head_v, lens, cfg.causal)?.matmul(p.block.w_o)?;
    let h1 = x.add(attn)?;

    let xm = rms_norm(h1, p.mlp_norm_gain, cfg.d)?;
    let gate = xm.matmul(p.block.w_u)?.silu()?;
    let lin = xm.matmul(p.block.w_v_mlp)?;
    let mlp = gate.mul(lin)?.matmul(p.block.w_o_mlp)?;
    let out = h1.add(mlp)?;
    Ok(TraceVars {
        attention_out: attn,
        post_attention: h1,
        mlp_out: mlp,
        output: out,
    })
}

/// `Norm((1-α)⊙a + α⊙b)` for unit-row `a`, `b`.
fn slerp_like<'t>(a: Var<'t>, b: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    a.add(alpha.mul(b.sub(a)?)?)?.normalize_rows()
}

fn ngpt_block<'t>(
    p: &NGptParams<Var<'t>>,
    cfg: &HeadConfig,
    x: Var<'t>,
    lens: &[usize],
) -> Result<TraceVars<'t>> {
    let logit_scale = (cfg.d_head() as f64).sqrt();
    let mut head_q = Vec::with_capacity(cfg.n_heads);
    let mut head_k = Vec::with_capacity(cfg.n_heads);
    let mut head_v = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let q = x.matmul(p.block.w_q[h])?.normalize_rows()?.mul(p.s_qk)?;
        head_q.push(q.scale(logit_scale)?);
        head_k.push(x.matmul(p.block.w_k[h])?.normalize_rows()?.mul(p.s_qk)?);
        head_v.push(x.matmul(p.block.w_v[h])?);
    }
    let attn = attention(&head_q, &head_k, &head_v, lens, cfg.causal)?.matmul(p.block.w_o)?;
    let h1 = slerp_like(x.normalize_rows()?, attn.normalize_rows()?, p.alpha_attn)?;

    let u = h1.matmul(p.block.w_u)?.mul(p.s_u)?;
    let v = h1
        .matmul(p.block.w_v_mlp)?
        .mul(p.s_v)?
        .scale((cfg.d_mlp as f64).sqrt())?;
    let mlp = v.silu()?.mul(u)?.matmul(p.block.w_o_mlp)?;
    let out = slerp_like(h1.normalize_rows()?, mlp.normalize_rows()?, p.alpha_mlp)?;
    Ok(TraceVars {
        attention_out: attn,
        post_attention: h1,
        mlp_out: mlp,
        output: out,
    })
}

/// Multi-head attention over each sample's span. Queries arrive pre-scaled.
fn attention<'t>(
    q: &[Var<'t>],
    k: &[Var<'t>],
    v: &[Var<'t>],
    lens: &[usize],
    causal: bool,
) -> Result<Var<'t>> {
    // A single token attends only to itself with weight exactly 1.
    if lens.iter().all(|&t| t == 1) {
        return Var::concat(v, ConcatAxis::Cols);
    }
    let mut heads = Vec::with_capacity(q.len());
    for h in 0..q.len() {
        let mut per_sample = Vec::with_capacity(lens.len());
        let mut offset = 0;
        for &t in lens {
            let vs = v[h].slice_rows(offset, t)?;
            if t == 1 {
                per_sample.push(vs);
            } else {
                let qs = q[h].slice_rows(offset, t)?;
                let ks = k[h].slice_rows(offset, t)?;
                let mut scores = qs.matmul(ks.transpose()?)?;
                if causal {
                    let mask: Vec<bool> = (0..t * t).map(|i| i % t > i / t).collect();
                    scores = scores.masked_fill(&mask)?;
                }
                per_sample.push(scores.softmax_rows()?.matmul(vs)?);
            }
            offset += t;
        }
        heads.push(Var::concat(&per_sample, ConcatAxis::Rows)?);
    }
    Var::concat(&heads, ConcatAxis::Cols)
}

/// Pools each sample's rows and normalizes: `B×d` unit rows.
pub fn pool<'t>(h: Var<'t>, lens: &[usize], pooling: Pooling) -> Result<Var<'t>> {
    if lens.iter().all(|&t| t == 1) {
        return h.normalize_rows();
    }
    let mut rows = Vec::with_capacity(lens.len());
    let mut offset = 0;
    for &t in lens {
        rows.push(match pooling {
            Pooling::Cls => h.slice_rows(offset, 1)?,
            Pooling::Last => h.slice_rows(offset + t - 1, 1)?,
            Pooling::Mean => h.slice_rows(offset, t)?.mean(Reduce::Rows)?,
        });
        offset += t;
    }
    Var::concat(&rows, ConcatAxis::Rows)?.normalize_rows()
}

/// `e = Norm(Pooling(h))` for one `T×d` sequence.
pub fn pool_and_embed(h: &Tensor, pooling: Pooling) -> Result<Tensor> {
    let tape = Tape::checked();
    let x = tape.leaf(h.clone());
    Ok(pool(x, &[h.rows()], pooling)?.value())
}

pub fn gpt_block_forward(params: &GptHeadParams, h_in: &Tensor, cfg: &HeadConfig) -> Result<Tensor> {
    HeadParams::Gpt(params.clone()).forward(cfg, h_in)
}

pub fn ngpt_block_forward(params: &NGptHeadParams, h_in: &Tensor, cfg: &HeadConfig) -> Result<Tensor> {
    HeadParams::Ngpt(params.clone()).forward(cfg, h_in)
}

/// Which slices of a weight matrix run along the embedding dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceAxis {
    /// Each column (length = rows) is a slice; for `d×k` input projections.
    Columns,
    /// Each row (length = cols) is a slice; for `k×d` output projections.
    Rows,
}

fn normalize_slices(t: &mut Tensor, axis: SliceAxis, name: &str) -> Result<()> {
    let (rows, cols) = (t.rows(), t.cols());
    match axis {
        SliceAxis::Rows => {
            for r in 0..rows {
                let row = t.row_slice_mut(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(Error::DegenerateNorm(format!("{name}: row {r} is all zeros")));
                }
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        SliceAxis::Columns => {
            for c in 0..cols {
                let n = (0..rows).map(|r| t.get(r, c).powi(2)).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(Error::DegenerateNorm(format!("{name}: column {c} is all zeros")));
                }
                for r in 0..rows {
                    let v = t.get(r, c) / n;
                    t.set(r, c, v);
                }
            }
        }
    }
    Ok(())
}

impl<T> NGptParams<T> {
    /// Weight matrices paired with the axis of their embedding-dimension slices.
    fn weights_with_axes(&mut self) -> Vec<(&mut T, SliceAxis)> {
        let b = &mut self.block;
        let mut out: Vec<(&mut T, SliceAxis)> = Vec::new();
        for t in b.w_q.iter_mut().chain(b.w_k.iter_mut()).chain(b.w_v.iter_mut()) {
            out.push((t, SliceAxis::Columns));
        }
        out.push((&mut b.w_o, SliceAxis::Rows));
        out.push((&mut b.w_u, SliceAxis::Columns));
        out.push((&mut b.w_v_mlp, SliceAxis::Columns));
        out.push((&mut b.w_o_mlp, SliceAxis::Rows));
        out
    }
}

impl NGptHeadParams {
    /// Rescales every weight slice along the embedding dimension to unit length.
    /// α and scale vectors are untouched. Idempotent up to rounding of already-unit slices.
    pub fn renormalize(&mut self) -> Result<()> {
        for (i, (t, axis)) in self.weights_with_axes().into_iter().enumerate() {
            normalize_slices(t, axis, &format!("weight matrix #{i}"))?;
        }
        Ok(())
    }

    pub fn renormalized(&self) -> Result<Self> {
        let mut p = self.clone();
        p.renormalize()?;
        Ok(p)
    }

    /// Largest `|‖slice‖ − 1|` over every weight slice.
    pub fn max_slice_norm_error(&self) -> f64 {
        let mut me = self.clone();
        let mut worst = 0.0_f64;
        for (t, axis) in me.weights_with_axes() {
            let norms: Vec<f64> = match axis {
                SliceAxis::Rows => t.row_norms(),
                SliceAxis::Columns => t.transpose().row_norms(),
            };
            for n in norms {
                worst = worst.max((n - 1.0).abs());
            }
        }
        worst
    }
}

pub fn renormalize_weights(params: &NGptHeadParams) -> Result<NGptHeadParams> {
    params.renormalized()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, n_heads: usize, pooling: Pooling) -> HeadConfig {
        HeadConfig::new(d, n_heads, pooling).unwrap()
    }

    fn random_input(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor::new(t, d, (0..t * d).map(|_| n.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(HeadConfig::new(8, 3, Pooling::Mean).is_err());
        let c = cfg(8, 2, Pooling::Last);
        assert!(c.causal);
        assert_eq!(c.d_mlp, 32);
        assert_eq!(c.d_head(), 4);
        assert!(!cfg(8, 2, Pooling::Cls).causal);
    }

    #[test]
    fn gpt_zero_projections_are_identity() {
        let c = cfg(8, 2, Pooling::Mean);
        let HeadParams::Gpt(mut p) = HeadParams::init(HeadKind::Gpt, &c, 1).unwrap() else {
            unreachable!()
        };
        p.block.w_o = Tensor::zeros(8, 8);
        p.block.w_o_mlp = Tensor::zeros(32, 8);
        let x = random_input(4, 8, 2);
        let y = gpt_block_forward(&p, &x, &c).unwrap();
        assert_eq!(y, x);

        let trace = HeadParams::Gpt(p).forward_with_trace(&c, &x).unwrap();
        assert!(trace.attention_out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_token_mask_equivalence() {
        for kind in [HeadKind::Gpt, HeadKind::Ngpt] {
            let bi = cfg(8, 2, Pooling::Mean);
            let mut causal = bi.clone();
            causal.causal = true;
            let p = HeadParams::init(kind, &bi, 3).unwrap();
            let x = random_input(1, 8, 4);
            assert_eq!(p.forward(&bi, &x).unwrap(), p.forward(&causal, &x).unwrap());
        }
    }

    #[test]
    fn ngpt_zero_alpha_is_normalized_input() {
        let c = cfg(8, 2, Pooling::Mean);
        let HeadParams::Ngpt(mut p) = HeadParams::init(HeadKind::Ngpt, &c, 5).unwrap() else {
            unreachable!()
        };
        p.alpha_attn = Tensor::zeros(1, 8);
        p.alpha_mlp = Tensor::zeros(1, 8);
        let x = random_input(3, 8, 6);
        let y = ngpt_block_forward(&p, &x, &c).unwrap();
        let norms = x.row_norms();
        for r in 0..3 {
            for col in 0..8 {
                assert!((y.get(r, col) - x.get(r, col) / norms[r]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ngpt_rows_are_unit() {
        let c = cfg(8, 2, Pooling::Mean);
        let p = HeadParams::init(HeadKind::Ngpt, &c, 7).unwrap();
        let trace = p.forward_with_trace(&c, &random_input(5, 8, 8)).unwrap();
        for t in [&trace.post_attention, &trace.output] {
            for n in t.row_norms() {
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(trace.output, p.forward(&c, &trace.input).unwrap());
    }

    #[test]
    fn pooling_strategies() {
        let x = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e = pool_and_embed(&x, Pooling::Mean).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.get(0, 0) - h).abs() < 1e-15 && (e.get(0, 1) - h).abs() < 1e-15);
        assert_eq!(pool_and_embed(&x, Pooling::Cls).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(pool_and_embed(&x, Pooling::Last).unwrap().data(), &[0.0, 1.0]);

        let single = Tensor::row(&[3.0, -4.0]);
        let a = pool_and_embed(&single, Pooling::Cls).unwrap();
        assert_eq!(a, pool_and_embed(&single, Pooling::Last).unwrap());
        assert_eq!(a, pool_and_embed(&single, Pooling::Mean).unwrap());

        let zero = Tensor::new(2, 2, vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        assert!(matches!(pool_and_embed(&zero, Pooling::Mean), Err(Error::DegenerateNorm(_))));
    }

    #[test]
    fn renormalize_scale_invariance_and_idempotence() {
        let c = cfg(8, 2, Pooling::Mean);
        let HeadParams::Ngpt(p) = HeadParams::init(HeadKind::Ngpt, &c, 9).unwrap() else {
            unreachable!()
        };
        assert!(p.max_slice_norm_error() < 1e-12);

        // Scale one embedding-dimension slice of W_Q (a column) by 7.
        let mut scaled = p.clone();
        for r in 0..8 {
            let v = scaled.block.w_q[0].get(r, 1) * 7.0;
            scaled.block.w_q[0].set(r, 1, v);
        }
        let fixed = scaled.renormalized().unwrap();
        assert!(fixed.block.w_q[0].max_abs_diff(&p.block.w_q[0]) < 1e-15);

        let once = scaled.renormalized().unwrap();
        let twice = once.renormalized().unwrap();
        assert_eq!(once.renormalized().unwrap(), twice);
        assert_eq!(once.alpha_attn, scaled.alpha_attn);
        assert_eq!(once.s_qk, scaled.s_qk);
    }

    #[test]
    fn renormalize_rejects_zero_slice() {
        let c = cfg(8, 2, Pooling::Mean);
        let HeadParams::Ngpt(mut p) = HeadParams::init(HeadKind::Ngpt, &c, 9).unwrap() else {
            unreachable!()
        };
        p.block.w_o_mlp.row_slice_mut(3).fill(0.0);
        assert!(matches!(p.renormalize(), Err(Error::DegenerateNorm(_))));
    }

    #[test]
    fn wrong_width_is_a_dimension_error() {
        let c = cfg(8, 2, Pooling::Mean);
        let p = HeadParams::init(HeadKind::Gpt, &c, 1).unwrap();
        assert!(matches!(p.forward(&c, &random_input(2, 6, 1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn tensor_round_trip_through_declaration_order() {
        let c = cfg(8, 4, Pooling::Cls);
        for kind in [HeadKind::Gpt, HeadKind::Ngpt] {
            let p = HeadParams::init(kind, &c, 11).unwrap();
            let names = HeadParams::names(kind, &c);
            assert_eq!(names.len(), p.tensors().len());
            let back = HeadParams::from_tensors(
                kind,
                &c,
                p.tensors().into_iter().cloned().collect(),
            )
            .unwrap();
            assert_eq!(p, back);
        }
    }

    #[test]
    fn head_from_leaves_matches_bind() {
        let c = cfg(8, 2, Pooling::Mean);
        let x = random_input(3, 8, 4);
        for kind in [HeadKind::Gpt, HeadKind::Ngpt] {
            let p = HeadParams::init(kind, &c, 3).unwrap();
            let tape = Tape::checked();
            let vars: Vec<Var> = p.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
            let bound = BoundHead::from_vars(kind, &c, &vars).unwrap();
            let out = block_forward(&bound, &c, tape.leaf(x.clone()), &[3]).unwrap().output.value();
            assert_eq!(out, p.forward(&c, &x).unwrap());
            assert!(BoundHead::from_vars(kind, &c, &vars[1..]).is_err());
        }
    }
}
