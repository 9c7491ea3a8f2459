//! Incremental inference with a key/value cache (batch size 1).

use super::kernels::*;
use super::{Model, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KvCache<T> {
    /// Per layer: keys and values `[len, d_model]`.
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Result of [`Model::extend`].
#[derive(Debug, Clone)]
pub struct Step<T> {
    /// Logits at the last appended position.
    pub logits: Vec<T>,
    /// Attention of the last appended position, `[layer][head][key]`,
    /// present when requested.
    pub attention: Option<Vec<Vec<Vec<T>>>>,
}

impl<T: Real> Model<T> {
    pub fn new_cache(&self) -> KvCache<T> {
        let l = self.config.n_layers;
        KvCache {
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            len: 0,
        }
    }

    /// Appends `tokens` to the cached sequence and returns the logits of the
    /// final position.
    pub fn extend(&self, cache: &mut KvCache<T>, tokens: &[u32], want_attention: bool) -> Result<Step<T>> {
        let cfg = &self.config;
        let (c, f, v, nh) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.n_heads);
        let hs = cfg.head_dim();
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("extend needs at least one token".into()));
        }
        let total = cache.len + tokens.len();
        if total > cfg.context_len {
            return Err(Error::Overlength {
                len: total,
                context_len: cfg.context_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::UnknownTokenId(bad));
        }
        let n = tokens.len();
        let lay = &self.layout;
        let start = cache.len;
        let wte = self.p(&lay.tok);
        let wpe = self.p(&lay.pos);
        let mut x = vec![T::zero(); n * c];
        for (i, row) in x.chunks_exact_mut(c).enumerate() {
            let (tok, pos) = (tokens[i] as usize, start + i);
            for ((o, &a), &b) in row.iter_mut().zip(&wte[tok * c..(tok + 1) * c]).zip(&wpe[pos * c..(pos + 1) * c]) {
                *o = a + b;
            }
        }
        let mut mean = vec![T::zero(); n];
        let mut rstd = vec![T::zero(); n];
        let mut ln = vec![T::zero(); n * c];
        let mut qkv = vec![T::zero(); n * 3 * c];
        let mut atty = vec![T::zero(); n * c];
        let mut proj = vec![T::zero(); n * c];
        let mut fch = vec![T::zero(); n * f];
        let mut fch_gelu = vec![T::zero(); n * f];
        let mut attn_out = want_attention.then(Vec::new);
        let scale = T::lit(1.0 / (hs as f64).sqrt());
        let mut scores = vec![T::zero(); total];

        for (l, lo) in lay.layers.iter().enumerate() {
            layernorm(&mut ln, &mut mean, &mut rstd, &x, self.p(&lo.ln1_g), self.p(&lo.ln1_b), c);
            linear(&mut qkv, &ln, self.p(&lo.qkv_w), Some(self.p(&lo.qkv_b)), n, c, 3 * c);
            let (keys, vals) = (&mut cache.keys[l], &mut cache.values[l]);
            for row in qkv.chunks_exact(3 * c) {
                keys.extend_from_slice(&row[c..2 * c]);
                vals.extend_from_slice(&row[2 * c..3 * c]);
            }
            let mut layer_att = Vec::new();
            for i in 0..n {
                let pos = start + i;
                let q_row = &qkv[i * 3 * c..i * 3 * c + c];
                for h in 0..nh {
                    let q = &q_row[h * hs..(h + 1) * hs];
                    let sc = &mut scores[..=pos];
                    for (j, s) in sc.iter_mut().enumerate() {
                        let k = &keys[j * c + h * hs..j * c + (h + 1) * hs];
                        *s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    }
                    let max = sc.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for s in sc.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let inv = sum.recip();
                    for s in sc.iter_mut() {
                        *s *= inv;
                    }
                    let out = &mut atty[i * c + h * hs..i * c + (h + 1) * hs];
                    out.fill(T::zero());
                    for (j, &p) in sc.iter().enumerate() {
                        let vv = &vals[j * c + h * hs..j * c + (h + 1) * hs];
                        for (o, &vj) in out.iter_mut().zip(vv) {
                            *o += p * vj;
                        }
                    }
                    if i == n - 1 && want_attention {
                        layer_att.push(sc.to_vec());
                    }
                }
            }
            if let Some(a) = attn_out.as_mut() {
                a.push(layer_att);
            }
            linear(&mut proj, &atty, self.p(&lo.proj_w), Some(self.p(&lo.proj_b)), n, c, c);
            for (xi, &p) in x.iter_mut().zip(&proj) {
                *xi += p;
            }
            layernorm(&mut ln, &mut mean, &mut rstd, &x, self.p(&lo.ln2_g), self.p(&lo.ln2_b), c);
            linear(&mut fch, &ln, self.p(&lo.fc_w), Some(self.p(&lo.fc_b)), n, c, f);
            gelu(&mut fch_gelu, &fch);
            linear(&mut proj, &fch_gelu, self.p(&lo.fcproj_w), Some(self.p(&lo.fcproj_b)), n, f, c);
            for (xi, &p) in x.iter_mut().zip(&proj) {
                *xi += p;
            }
        }
        cache.len = total;
        let last = &x[(n - 1) * c..];
        let mut lnl = vec![T::zero(); c];
        let (mut m1, mut r1) = ([T::zero()], [T::zero()]);
        layernorm(&mut lnl, &mut m1, &mut r1, last, self.p(&lay.lnf_g), self.p(&lay.lnf_b), c);
        let mut logits = vec![T::zero(); v];
        linear(&mut logits, &lnl, self.p(&lay.head), None, 1, c, v);
        Ok(Step {
            logits,
            attention: attn_out,
        })
    }

    /// Greedy decoding; returns the prompt followed by `max_new` tokens.
    /// Ties go to the lowest token id.
    pub fn generate_greedy(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let mut cache = self.new_cache();
        self.generate_from(&mut cache, prompt, max_new)
    }

    /// Greedy decoding continuing from a cache that already holds a prefix
    /// (which is not repeated in the output).
    pub fn generate_from(&self, cache: &mut KvCache<T>, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let total = cache.len + prompt.len() + max_new;
        if total > self.config.context_len {
            return Err(Error::Overlength {
                len: total,
                context_len: self.config.context_len,
            });
        }
        let mut out = prompt.to_vec();
        if max_new == 0 {
            return Ok(out);
        }
        let mut step = self.extend(cache, prompt, false)?;
        for i in 0..max_new {
            let next = argmax(&step.logits) as u32;
            out.push(next);
            if i + 1 < max_new {
                step = self.extend(cache, &[next], false)?;
            }
        }
        Ok(out)
    }

    /// Softmax of the logits at the final prompt position.
    pub fn last_token_distribution(&self, prompt: &[u32]) -> Result<Vec<f64>> {
        let mut cache = self.new_cache();
        let step = self.extend(&mut cache, prompt, false)?;
        Ok(softmax(&step.logits))
    }
}
