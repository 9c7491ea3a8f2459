//! Decoder-only transformer: pre-norm blocks, GELU MLP, learned positions,
//! untied output projection. Parameters live in one flat buffer described by a
//! [`Layout`]; gradients and optimizer moments share that layout.

pub mod infer;
pub mod kernels;

use std::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
pub use infer::KvCache;
use kernels::*;
pub use kernels::{argmax, softmax, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
}

impl ModelConfig {
    /// 8 layers, width 512, 8 heads, FFN 2048, context 512.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_len: 512,
            d_model: 512,
            n_layers: 8,
            n_heads: 8,
            d_ffn: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 || self.context_len == 0 || self.d_model == 0 || self.n_layers == 0 {
            return bad("model dimensions must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.d_ffn == 0 {
            return bad("d_ffn must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

#[derive(Debug, Clone)]
struct LayerOffsets {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    qkv_w: Range<usize>,
    qkv_b: Range<usize>,
    proj_w: Range<usize>,
    proj_b: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    fc_w: Range<usize>,
    fc_b: Range<usize>,
    fcproj_w: Range<usize>,
    fcproj_b: Range<usize>,
}

/// Names, shapes and offsets of every parameter tensor.
#[derive(Debug, Clone)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    pub total: usize,
    tok: Range<usize>,
    pos: Range<usize>,
    layers: Vec<LayerOffsets>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    head: Range<usize>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (c, f, v) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size);
        let mut specs = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, shape: Vec<usize>, decay: bool| {
            let n: usize = shape.iter().product();
            let range = total..total + n;
            total += n;
            specs.push(TensorSpec {
                name,
                shape,
                range: range.clone(),
                decay,
            });
            range
        };
        let tok = push("tok_embed".into(), vec![v, c], false);
        let pos = push("pos_embed".into(), vec![cfg.context_len, c], false);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.scale"), vec![c], false),
                ln1_b: push(p("ln1.bias"), vec![c], false),
                qkv_w: push(p("attn.qkv.weight"), vec![c, 3 * c], true),
                qkv_b: push(p("attn.qkv.bias"), vec![3 * c], false),
                proj_w: push(p("attn.proj.weight"), vec![c, c], true),
                proj_b: push(p("attn.proj.bias"), vec![c], false),
                ln2_g: push(p("ln2.scale"), vec![c], false),
                ln2_b: push(p("ln2.bias"), vec![c], false),
                fc_w: push(p("mlp.fc.weight"), vec![c, f], true),
                fc_b: push(p("mlp.fc.bias"), vec![f], false),
                fcproj_w: push(p("mlp.proj.weight"), vec![f, c], true),
                fcproj_b: push(p("mlp.proj.bias"), vec![c], false),
            });
        }
        let lnf_g = push("ln_f.scale".into(), vec![c], false);
        let lnf_b = push("ln_f.bias".into(), vec![c], false);
        let head = push("lm_head.weight".into(), vec![c, v], true);
        Self {
            specs,
            total,
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            head,
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

/// Mutable views of two ordered, disjoint ranges of one buffer.
fn two_mut<'a, T>(buf: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.end - b.start])
}

#[derive(Debug, Clone, Copy)]
pub struct InitOptions {
    /// Start with an all-zero output projection (uniform predictions).
    pub zero_head: bool,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

/// Per-layer cached activations.
#[derive(Debug, Clone)]
struct LayerActs<T> {
    ln1: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    qkv: Vec<T>,
    att: Vec<T>,
    atty: Vec<T>,
    res2: Vec<T>,
    ln2: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    fch: Vec<T>,
    fch_gelu: Vec<T>,
}

/// Output of [`Model::forward`]: logits, attention matrices and everything
/// backward needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub batch: usize,
    pub seq: usize,
    tokens: Vec<u32>,
    n_heads: usize,
    vocab: usize,
    /// Residual stream entering each layer, plus the final one.
    xs: Vec<Vec<T>>,
    layers: Vec<LayerActs<T>>,
    lnf: Vec<T>,
    lnf_mean: Vec<T>,
    lnf_rstd: Vec<T>,
    logits: Vec<T>,
}

impl<T: Real> ForwardTrace<T> {
    /// Logits `[batch·seq, vocab]`.
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn logits_at(&self, b: usize, t: usize) -> &[T] {
        let n = b * self.seq + t;
        &self.logits[n * self.vocab..(n + 1) * self.vocab]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Attention probabilities `[seq, seq]` of one head.
    pub fn attention(&self, layer: usize, b: usize, head: usize) -> &[T] {
        let t = self.seq;
        let off = (b * self.n_heads + head) * t * t;
        &self.layers[layer].att[off..off + t * t]
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }
}

/// Token-level cross-entropy statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    /// Mean natural-log cross-entropy over unmasked positions.
    pub loss: f64,
    pub count: usize,
    /// Unmasked positions whose argmax equals the target.
    pub correct: usize,
}

/// Cross-entropy over `[n, v]` logits. Returns the statistics and the
/// gradient of the mean loss with respect to the logits. With an empty mask
/// the gradient is all zeros.
pub fn cross_entropy<T: Real>(logits: &[T], v: usize, targets: &[u32], mask: &[bool]) -> (LossStats, Vec<T>) {
    let n = targets.len();
    assert_eq!(logits.len(), n * v);
    assert_eq!(mask.len(), n);
    let count = mask.iter().filter(|&&m| m).count();
    let mut dlogits = vec![T::zero(); n * v];
    let mut sum = 0.0f64;
    let mut correct = 0;
    let inv = if count > 0 { 1.0 / count as f64 } else { 0.0 };
    let mut e = vec![T::zero(); v];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let row = &logits[i * v..(i + 1) * v];
        let tgt = targets[i] as usize;
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = 0.0f64;
        for (ej, &x) in e.iter_mut().zip(row) {
            *ej = (x - max).exp();
            z += ej.to_f64().unwrap();
        }
        sum += z.ln() - (row[tgt] - max).to_f64().unwrap();
        if argmax(row) == tgt {
            correct += 1;
        }
        let scale = inv / z;
        let d = &mut dlogits[i * v..(i + 1) * v];
        for (dj, &ej) in d.iter_mut().zip(&e) {
            *dj = T::lit(ej.to_f64().unwrap() * scale);
        }
        d[tgt] -= T::lit(inv);
    }
    let loss = if count > 0 { sum / count as f64 } else { 0.0 };
    (LossStats { loss, count, correct }, dlogits)
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64, opts: InitOptions) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = rng::stream(seed, 0, "init");
        let normal = Normal::new(0.0, 0.02).unwrap();
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        for spec in &layout.specs {
            let name = spec.name.as_str();
            let slice = &mut params[spec.range.clone()];
            if name.ends_with(".scale") {
                slice.fill(T::one());
            } else if name.ends_with(".bias") {
                // zeros
            } else if name == "lm_head.weight" && opts.zero_head {
                // zeros
            } else {
                let scale = if name.ends_with("attn.proj.weight") || name.ends_with("mlp.proj.weight") {
                    resid_scale
                } else {
                    1.0
                };
                for x in slice.iter_mut() {
                    *x = T::lit(normal.sample(&mut rng) * scale);
                }
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.find(name).map(|s| &self.params[s.range.clone()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.find(name)?.range.clone();
        Some(&mut self.params[r])
    }

    fn p(&self, r: &Range<usize>) -> &[T] {
        &self.params[r.clone()]
    }

    /// Forward pass over `batch` rows of `seq` tokens each (row-major).
    pub fn forward(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<ForwardTrace<T>> {
        let cfg = &self.config;
        if seq > cfg.context_len {
            return Err(Error::Overlength {
                len: seq,
                context_len: cfg.context_len,
            });
        }
        if tokens.len() != batch * seq || seq == 0 {
            return Err(Error::InvalidArgument(format!(
                "forward expects {batch}x{seq} tokens, got {}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::UnknownTokenId(bad));
        }
        let (c, f, v, nh) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.n_heads);
        let n = batch * seq;
        let lay = &self.layout;

        let mut x = vec![T::zero(); n * c];
        let wte = self.p(&lay.tok);
        let wpe = self.p(&lay.pos);
        for (i, row) in x.chunks_exact_mut(c).enumerate() {
            let tok = tokens[i] as usize;
            let pos = i % seq;
            for ((o, &a), &b) in row.iter_mut().zip(&wte[tok * c..(tok + 1) * c]).zip(&wpe[pos * c..(pos + 1) * c]) {
                *o = a + b;
            }
        }

        let mut xs = Vec::with_capacity(cfg.n_layers + 1);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lo in &lay.layers {
            let mut a = LayerActs {
                ln1: vec![T::zero(); n * c],
                ln1_mean: vec![T::zero(); n],
                ln1_rstd: vec![T::zero(); n],
                qkv: vec![T::zero(); n * 3 * c],
                att: vec![T::zero(); batch * nh * seq * seq],
                atty: vec![T::zero(); n * c],
                res2: vec![T::zero(); n * c],
                ln2: vec![T::zero(); n * c],
                ln2_mean: vec![T::zero(); n],
                ln2_rstd: vec![T::zero(); n],
                fch: vec![T::zero(); n * f],
                fch_gelu: vec![T::zero(); n * f],
            };
            layernorm(&mut a.ln1, &mut a.ln1_mean, &mut a.ln1_rstd, &x, self.p(&lo.ln1_g), self.p(&lo.ln1_b), c);
            linear(&mut a.qkv, &a.ln1, self.p(&lo.qkv_w), Some(self.p(&lo.qkv_b)), n, c, 3 * c);
            attention(&mut a.atty, &mut a.att, &a.qkv, batch, seq, c, nh);
            linear(&mut a.res2, &a.atty, self.p(&lo.proj_w), Some(self.p(&lo.proj_b)), n, c, c);
            for (r, &xi) in a.res2.iter_mut().zip(&x) {
                *r += xi;
            }
            layernorm(&mut a.ln2, &mut a.ln2_mean, &mut a.ln2_rstd, &a.res2, self.p(&lo.ln2_g), self.p(&lo.ln2_b), c);
            linear(&mut a.fch, &a.ln2, self.p(&lo.fc_w), Some(self.p(&lo.fc_b)), n, c, f);
            gelu(&mut a.fch_gelu, &a.fch);
            let mut next = vec![T::zero(); n * c];
            linear(&mut next, &a.fch_gelu, self.p(&lo.fcproj_w), Some(self.p(&lo.fcproj_b)), n, f, c);
            for (r, &xi) in next.iter_mut().zip(&a.res2) {
                *r += xi;
            }
            xs.push(std::mem::replace(&mut x, next));
            layers.push(a);
        }
        let mut lnf = vec![T::zero(); n * c];
        let mut lnf_mean = vec![T::zero(); n];
        let mut lnf_rstd = vec![T::zero(); n];
        layernorm(&mut lnf, &mut lnf_mean, &mut lnf_rstd, &x, self.p(&lay.lnf_g), self.p(&lay.lnf_b), c);
        xs.push(x);
        let mut logits = vec![T::zero(); n * v];
        linear(&mut logits, &lnf, self.p(&lay.head), None, n, c, v);
        Ok(ForwardTrace {
            batch,
            seq,
            tokens: tokens.to_vec(),
            n_heads: nh,
            vocab: v,
            xs,
            layers,
            lnf,
            lnf_mean,
            lnf_rstd,
            logits,
        })
    }

    /// Mean next-token cross-entropy over unmasked positions, plus the logit
    /// gradient to feed [`Model::backward`].
    pub fn lm_loss(&self, trace: &ForwardTrace<T>, targets: &[u32], mask: &[bool]) -> Result<(LossStats, Vec<T>)> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        if targets.len() != trace.batch * trace.seq || mask.len() != targets.len() {
            return Err(Error::InvalidArgument("targets/mask length mismatch".into()));
        }
        Ok(cross_entropy(&trace.logits, trace.vocab, targets, mask))
    }

    /// Accumulates parameter gradients into `grads` (same layout as params)
    /// given the logit gradient.
    pub fn backward(&self, trace: &ForwardTrace<T>, dlogits: &[T], grads: &mut [T]) {
        let cfg = &self.config;
        let lay = &self.layout;
        let (c, f, v, nh) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.n_heads);
        let (batch, seq) = (trace.batch, trace.seq);
        let n = batch * seq;
        assert_eq!(grads.len(), lay.total);
        assert_eq!(dlogits.len(), n * v);

        let mut dlnf = vec![T::zero(); n * c];
        linear_backward(
            Some(&mut dlnf),
            &mut grads[lay.head.clone()],
            None,
            dlogits,
            &trace.lnf,
            self.p(&lay.head),
            n,
            c,
            v,
        );
        let mut dres = vec![T::zero(); n * c];
        {
            let (dg, db) = two_mut(grads, &lay.lnf_g, &lay.lnf_b);
            layernorm_backward(
                &mut dres,
                dg,
                db,
                &dlnf,
                &trace.xs[cfg.n_layers],
                self.p(&lay.lnf_g),
                &trace.lnf_mean,
                &trace.lnf_rstd,
                c,
            );
        }
        let mut dfch_gelu = vec![T::zero(); n * f];
        let mut dfch = vec![T::zero(); n * f];
        let mut dln = vec![T::zero(); n * c];
        let mut datty = vec![T::zero(); n * c];
        let mut dqkv = vec![T::zero(); n * 3 * c];
        for (l, lo) in lay.layers.iter().enumerate().rev() {
            let a = &trace.layers[l];
            // MLP branch: dres is the gradient at the block output.
            dfch_gelu.fill(T::zero());
            {
                let (dw, db) = two_mut(grads, &lo.fcproj_w, &lo.fcproj_b);
                linear_backward(Some(&mut dfch_gelu), dw, Some(db), &dres, &a.fch_gelu, self.p(&lo.fcproj_w), n, f, c);
            }
            dfch.fill(T::zero());
            gelu_backward(&mut dfch, &a.fch, &dfch_gelu);
            dln.fill(T::zero());
            {
                let (dw, db) = two_mut(grads, &lo.fc_w, &lo.fc_b);
                linear_backward(Some(&mut dln), dw, Some(db), &dfch, &a.ln2, self.p(&lo.fc_w), n, c, f);
            }
            {
                let (dg, db) = two_mut(grads, &lo.ln2_g, &lo.ln2_b);
                layernorm_backward(&mut dres, dg, db, &dln, &a.res2, self.p(&lo.ln2_g), &a.ln2_mean, &a.ln2_rstd, c);
            }
            // Attention branch.
            datty.fill(T::zero());
            {
                let (dw, db) = two_mut(grads, &lo.proj_w, &lo.proj_b);
                linear_backward(Some(&mut datty), dw, Some(db), &dres, &a.atty, self.p(&lo.proj_w), n, c, c);
            }
            dqkv.fill(T::zero());
            attention_backward(&mut dqkv, &datty, &a.qkv, &a.att, batch, seq, c, nh);
            dln.fill(T::zero());
            {
                let (dw, db) = two_mut(grads, &lo.qkv_w, &lo.qkv_b);
                linear_backward(Some(&mut dln), dw, Some(db), &dqkv, &a.ln1, self.p(&lo.qkv_w), n, c, 3 * c);
            }
            {
                let (dg, db) = two_mut(grads, &lo.ln1_g, &lo.ln1_b);
                layernorm_backward(&mut dres, dg, db, &dln, &trace.xs[l], self.p(&lo.ln1_g), &a.ln1_mean, &a.ln1_rstd, c);
            }
        }
        let (dwte, dwpe) = two_mut(grads, &lay.tok, &lay.pos);
        for (i, d) in dres.chunks_exact(c).enumerate() {
            let tok = trace.tokens[i] as usize;
            let pos = i % seq;
            for (g, &x) in dwte[tok * c..(tok + 1) * c].iter_mut().zip(d) {
                *g += x;
            }
            for (g, &x) in dwpe[pos * c..(pos + 1) * c].iter_mut().zip(d) {
                *g += x;
            }
        }
    }

    /// Convenience: forward, loss and backward in one call. Returns the loss
    /// statistics and fresh gradients.
    pub fn loss_and_grad(&self, tokens: &[u32], targets: &[u32], mask: &[bool], batch: usize, seq: usize) -> Result<(LossStats, Vec<T>)> {
        let trace = self.forward(tokens, batch, seq)?;
        let (stats, dlogits) = self.lm_loss(&trace, targets, mask)?;
        let mut grads = vec![T::zero(); self.layout.total];
        self.backward(&trace, &dlogits, &mut grads);
        Ok((stats, grads))
    }

    pub fn to_f64(&self) -> Model<f64> {
        Model {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.iter().map(|x| x.to_f64().unwrap()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }
}
