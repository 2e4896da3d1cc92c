//! Linear layers and the pre-LN self-attention block.

use crate::error::{Error, Result};
use crate::numerics::{AttnSegment, Graph, ParamId, ParamStore, Rng, Tensor, Transpose, Var};

fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
    if store.get(id).shape() != shape {
        return Err(Error::Checkpoint(format!(
            "parameter {name} has shape {:?}, expected {:?}",
            store.get(id).shape(),
            shape
        )));
    }
    Ok(id)
}

/// Registers a parameter with scaled-uniform init or fetches an existing one.
pub(crate) enum Init<'a> {
    Fresh(&'a mut Rng),
    Existing,
}

pub(crate) fn param(
    store: &mut ParamStore,
    init: &mut Init<'_>,
    name: String,
    shape: Vec<usize>,
    fill: Fill,
) -> Result<ParamId> {
    match init {
        Init::Existing => lookup(store, &name, &shape),
        Init::Fresh(rng) => {
            let t = match fill {
                Fill::Uniform(bound) => Tensor::uniform(shape, bound, rng),
                Fill::Constant(c) => {
                    let n = shape.iter().product();
                    Tensor::new(shape, vec![c; n])?
                }
            };
            Ok(store.insert(name, t))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Fill {
    Uniform(f64),
    Constant(f64),
}

impl Fill {
    pub fn fan_in(n: usize) -> Self {
        Fill::Uniform(1.0 / (n as f64).sqrt())
    }
}

/// `y = x W + b` with `W` stored as `in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn build(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let w = param(
            store,
            init,
            format!("{name}.w"),
            vec![fan_in, fan_out],
            Fill::fan_in(fan_in),
        )?;
        let b = param(store, init, format!("{name}.b"), vec![fan_out], Fill::fan_in(fan_in))?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn build(store: &mut ParamStore, init: &mut Init<'_>, name: &str, d: usize) -> Result<Self> {
        let gain = param(store, init, format!("{name}.g"), vec![d], Fill::Constant(1.0))?;
        let bias = param(store, init, format!("{name}.b"), vec![d], Fill::Constant(0.0))?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Pre-layer-norm transformer block:
/// `h = x + Attn(LN(x))`, `out = h + FFN(LN(h))` with a GELU feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

impl Block {
    pub(crate) fn build(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        d: usize,
        ffn: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::build(store, init, &format!("{name}.ln1"), d)?,
            q: Linear::build(store, init, &format!("{name}.attn.q"), d, d)?,
            k: Linear::build(store, init, &format!("{name}.attn.k"), d, d)?,
            v: Linear::build(store, init, &format!("{name}.attn.v"), d, d)?,
            o: Linear::build(store, init, &format!("{name}.attn.o"), d, d)?,
            ln2: LayerNorm::build(store, init, &format!("{name}.ln2"), d)?,
            ff1: Linear::build(store, init, &format!("{name}.ffn.1"), d, ffn)?,
            ff2: Linear::build(store, init, &format!("{name}.ffn.2"), ffn, d)?,
            heads,
        })
    }

    /// Runs the block over packed sequences `(start, len)` of `x`.
    ///
    /// With `query_offsets`, only one row per sequence (at the given offset)
    /// is computed; the result then has one row per sequence.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        seqs: &[(usize, usize)],
        query_offsets: Option<&[usize]>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let k = self.k.forward(g, store, h)?;
        let v = self.v.forward(g, store, h)?;
        let (resid, q, segs) = match query_offsets {
            None => {
                let q = self.q.forward(g, store, h)?;
                let segs = seqs
                    .iter()
                    .map(|&(start, len)| AttnSegment {
                        q_start: start,
                        q_len: len,
                        k_start: start,
                        k_len: len,
                    })
                    .collect();
                (x, q, segs)
            }
            Some(offsets) => {
                if offsets.len() != seqs.len() {
                    return Err(Error::Internal("one query offset per sequence required".into()));
                }
                let rows: Vec<usize> = seqs.iter().zip(offsets).map(|(s, o)| s.0 + o).collect();
                let hq = g.gather_rows(h, rows.clone())?;
                let q = self.q.forward(g, store, hq)?;
                let xq = g.gather_rows(x, rows)?;
                let segs = seqs
                    .iter()
                    .enumerate()
                    .map(|(b, &(start, len))| AttnSegment {
                        q_start: b,
                        q_len: 1,
                        k_start: start,
                        k_len: len,
                    })
                    .collect();
                (xq, q, segs)
            }
        };
        let a = g.attention(q, k, v, self.heads, segs)?;
        let o = self.o.forward(g, store, a)?;
        let h1 = g.add(resid, o)?;
        let h2 = self.ln2.forward(g, store, h1)?;
        let f = self.ff1.forward(g, store, h2)?;
        let f = g.gelu(f);
        let f = self.ff2.forward(g, store, f)?;
        g.add(h1, f)
    }
}

/// Embedding table lookup: row `ids[i]` of the table.
pub fn embed(g: &mut Graph, store: &ParamStore, table: ParamId, ids: Vec<usize>) -> Result<Var> {
    let t = g.param(store, table);
    g.gather_rows(t, ids)
}

/// `x · wᵀ + b` for a `[d]` weight vector and one-element bias.
pub fn score_rows(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let s = g.matmul_t(x, wv, Transpose::Yes)?;
    g.add_row(s, bv)
}
