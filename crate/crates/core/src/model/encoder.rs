//! Pre-layer-norm transformer encoder with a hand-written backward pass.

use ndarray::{s, Array2, ArrayView2, Zip};
use rand::Rng;

use super::layers::{gelu, gelu_grad, normal_matrix, prefixed, LayerNorm, LayerNormCache, Linear, Parameters};
use super::{Batch, ModelConfig};

/// Additive score for attention to padding; finite so a fully padded row
/// still yields a well-defined (and unused) distribution.
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ln2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

pub(crate) struct BlockCache {
    ln1: LayerNormCache,
    normed1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LayerNormCache,
    normed2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

struct Shape {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

impl Shape {
    fn rows(&self, b: usize) -> std::ops::Range<usize> {
        b * self.seq..(b + 1) * self.seq
    }

    fn cols(&self, h: usize) -> std::ops::Range<usize> {
        h * self.head_dim..(h + 1) * self.head_dim
    }
}

impl Block {
    fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (h, i, std) = (cfg.hidden, cfg.intermediate, cfg.init_std);
        Self {
            ln1: LayerNorm::new(h, cfg.layer_norm_eps),
            query: Linear::new(h, h, std, rng),
            key: Linear::new(h, h, std, rng),
            value: Linear::new(h, h, std, rng),
            output: Linear::new(h, h, std, rng),
            ln2: LayerNorm::new(h, cfg.layer_norm_eps),
            ff_in: Linear::new(h, i, std, rng),
            ff_out: Linear::new(i, h, std, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            output: self.output.zeros_like(),
            ln2: self.ln2.zeros_like(),
            ff_in: self.ff_in.zeros_like(),
            ff_out: self.ff_out.zeros_like(),
        }
    }

    fn forward(&self, x: &Array2<f64>, keep: &Array2<bool>, shape: &Shape) -> (Array2<f64>, BlockCache) {
        let (normed1, ln1) = self.ln1.forward(x);
        let q = self.query.forward(normed1.view());
        let k = self.key.forward(normed1.view());
        let v = self.value.forward(normed1.view());
        let scale = 1.0 / (shape.head_dim as f64).sqrt();

        let mut attn = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(shape.batch * shape.heads);
        for b in 0..shape.batch {
            let rows = shape.rows(b);
            for h in 0..shape.heads {
                let cols = shape.cols(h);
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t());
                for mut row in p.rows_mut() {
                    for (j, sc) in row.iter_mut().enumerate() {
                        *sc = if keep[[b, j]] { *sc * scale } else { MASKED_SCORE };
                    }
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let z = row.sum();
                    row.mapv_inplace(|v| v / z);
                }
                attn.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let mid = x + &self.output.forward(attn.view());
        let (normed2, ln2) = self.ln2.forward(&mid);
        let pre_act = self.ff_in.forward(normed2.view());
        let act = pre_act.mapv(gelu);
        let out = &mid + &self.ff_out.forward(act.view());
        let cache = BlockCache {
            ln1,
            normed1,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            normed2,
            pre_act,
            act,
        };
        (out, cache)
    }

    fn backward(&self, dout: Array2<f64>, cache: &BlockCache, shape: &Shape, grad: &mut Block) -> Array2<f64> {
        // feed-forward branch
        let dact = self.ff_out.backward(cache.act.view(), &dout, &mut grad.ff_out);
        let mut dpre = dact;
        Zip::from(&mut dpre)
            .and(&cache.pre_act)
            .for_each(|d, &x| *d *= gelu_grad(x));
        let dnormed2 = self.ff_in.backward(cache.normed2.view(), &dpre, &mut grad.ff_in);
        let dmid = dout + &self.ln2.backward(&dnormed2, &cache.ln2, &mut grad.ln2);

        // attention branch
        let dattn = self.output.backward(cache.attn.view(), &dmid, &mut grad.output);
        let scale = 1.0 / (shape.head_dim as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for b in 0..shape.batch {
            let rows = shape.rows(b);
            for h in 0..shape.heads {
                let cols = shape.cols(h);
                let p = &cache.probs[b * shape.heads + h];
                let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
                let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
                let vh = cache.v.slice(s![rows.clone(), cols.clone()]);
                let dout_h = dattn.slice(s![rows.clone(), cols.clone()]);
                let dp = dout_h.dot(&vh.t());
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dout_h));
                let mut ds = dp;
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut drow)
                        .and(&prow)
                        .for_each(|d, &pv| *d = pv * (*d - dot) * scale);
                }
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
            }
        }
        let n1 = cache.normed1.view();
        let mut dnormed1 = self.query.backward(n1, &dq, &mut grad.query);
        dnormed1 += &self.key.backward(n1, &dk, &mut grad.key);
        dnormed1 += &self.value.backward(n1, &dv, &mut grad.value);
        dmid + &self.ln1.backward(&dnormed1, &cache.ln1, &mut grad.ln1)
    }
}

impl Parameters for Block {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut v = Vec::new();
        v.extend(prefixed("ln1", self.ln1.tensors()));
        v.extend(prefixed("query", self.query.tensors()));
        v.extend(prefixed("key", self.key.tensors()));
        v.extend(prefixed("value", self.value.tensors()));
        v.extend(prefixed("output", self.output.tensors()));
        v.extend(prefixed("ln2", self.ln2.tensors()));
        v.extend(prefixed("ff_in", self.ff_in.tensors()));
        v.extend(prefixed("ff_out", self.ff_out.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = Vec::new();
        v.extend(prefixed("ln1", self.ln1.tensors_mut()));
        v.extend(prefixed("query", self.query.tensors_mut()));
        v.extend(prefixed("key", self.key.tensors_mut()));
        v.extend(prefixed("value", self.value.tensors_mut()));
        v.extend(prefixed("output", self.output.tensors_mut()));
        v.extend(prefixed("ln2", self.ln2.tensors_mut()));
        v.extend(prefixed("ff_in", self.ff_in.tensors_mut()));
        v.extend(prefixed("ff_out", self.ff_out.tensors_mut()));
        v
    }
}

/// Learned token and position embeddings, a stack of pre-LN blocks and a
/// final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    num_heads: usize,
}

pub(crate) struct EncoderCache {
    ids: Vec<u32>,
    blocks: Vec<BlockCache>,
    ln_final: LayerNormCache,
    batch: usize,
    seq: usize,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let token_embedding = normal_matrix(cfg.vocab_size, cfg.hidden, cfg.init_std, rng);
        let position_embedding = normal_matrix(cfg.max_len, cfg.hidden, cfg.init_std, rng);
        let blocks = (0..cfg.layers).map(|_| Block::new(cfg, rng)).collect();
        Self {
            token_embedding,
            position_embedding,
            blocks,
            ln_final: LayerNorm::new(cfg.hidden, cfg.layer_norm_eps),
            num_heads: cfg.heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            token_embedding: Array2::zeros(self.token_embedding.raw_dim()),
            position_embedding: Array2::zeros(self.position_embedding.raw_dim()),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            ln_final: self.ln_final.zeros_like(),
            num_heads: self.num_heads,
        }
    }

    pub fn hidden(&self) -> usize {
        self.token_embedding.ncols()
    }

    fn shape(&self, batch: &Batch) -> Shape {
        Shape {
            batch: batch.batch_size(),
            seq: batch.seq_len(),
            heads: self.num_heads,
            head_dim: self.hidden() / self.num_heads,
        }
    }

    /// Final hidden states, one row per (sequence, position), row-major over
    /// the batch. Ids must already be range-checked.
    pub(crate) fn forward(&self, batch: &Batch) -> (Array2<f64>, EncoderCache) {
        let shape = self.shape(batch);
        let ids: Vec<u32> = batch.ids.iter().copied().collect();
        let mut x = Array2::zeros((ids.len(), self.hidden()));
        for (n, (mut row, &id)) in x.rows_mut().into_iter().zip(&ids).enumerate() {
            let pos = n % shape.seq;
            row.assign(&self.token_embedding.row(id as usize));
            row += &self.position_embedding.row(pos);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, &batch.attention, &shape);
            caches.push(cache);
            x = next;
        }
        let (out, ln_final) = self.ln_final.forward(&x);
        let cache = EncoderCache {
            ids,
            blocks: caches,
            ln_final,
            batch: shape.batch,
            seq: shape.seq,
        };
        (out, cache)
    }

    pub(crate) fn backward(&self, dout: &Array2<f64>, cache: &EncoderCache, grad: &mut Encoder) {
        let shape = Shape {
            batch: cache.batch,
            seq: cache.seq,
            heads: self.num_heads,
            head_dim: self.hidden() / self.num_heads,
        };
        let mut dx = self.ln_final.backward(dout, &cache.ln_final, &mut grad.ln_final);
        for ((block, bc), g) in self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
            dx = block.backward(dx, bc, &shape, g);
        }
        for (n, (row, &id)) in dx.rows().into_iter().zip(&cache.ids).enumerate() {
            let mut t = grad.token_embedding.row_mut(id as usize);
            t += &row;
            let mut p = grad.position_embedding.row_mut(n % shape.seq);
            p += &row;
        }
    }
}

impl Parameters for Encoder {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut v = vec![
            (
                "token_embedding".to_string(),
                self.token_embedding.as_slice().expect("contiguous"),
            ),
            (
                "position_embedding".to_string(),
                self.position_embedding.as_slice().expect("contiguous"),
            ),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("blocks.{i}"), b.tensors()));
        }
        v.extend(prefixed("ln_final", self.ln_final.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = vec![
            (
                "token_embedding".to_string(),
                self.token_embedding.as_slice_mut().expect("contiguous"),
            ),
            (
                "position_embedding".to_string(),
                self.position_embedding.as_slice_mut().expect("contiguous"),
            ),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(prefixed(&format!("blocks.{i}"), b.tensors_mut()));
        }
        v.extend(prefixed("ln_final", self.ln_final.tensors_mut()));
        v
    }
}

/// Rows of `m` selected by `rows`, in order.
pub(crate) fn gather_rows(m: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (mut dst, &r) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&m.row(r));
    }
    out
}
