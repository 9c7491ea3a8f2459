//! Confidence and attention analyses at the last token of a probe, and
//! Zipf-rank-binned summaries.

use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;

use crate::biogen::{AttributeKind, World};
use crate::error::{Error, Result};
use crate::eval::{probe_tokens, EvalItem};
use crate::metrics::MetricRecord;
use crate::model::kernels::softmax;
use crate::model::{Model, Real};
use crate::tokenizer::{SpanLabel, Vocab, EOD};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceRecord {
    pub entity_id: u32,
    pub subset: String,
    /// Probability of the first target token, averaged over the four probes.
    pub target_prob: f64,
    /// Entropy (nats) of the next-token distribution, averaged over probes.
    pub entropy: f64,
    /// Teacher-forced log-probability of the full target, averaged over probes.
    pub seq_logprob: f64,
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Probe-only confidence statistics for each entity.
pub fn confidence<T: Real>(
    model: &Model<T>,
    world: &World,
    vocab: &Vocab,
    entities: &[u32],
    subset: &str,
) -> Result<Vec<ConfidenceRecord>> {
    entities
        .par_iter()
        .map(|&e| {
            let (mut tp, mut h, mut lp) = (0.0, 0.0, 0.0);
            for kind in AttributeKind::ALL {
                let (probe, target) = probe_tokens(world, vocab, e, kind)?;
                let target = vocab.encode(&target)?.ids;
                let mut prompt = vec![EOD];
                prompt.extend_from_slice(&probe.ids);
                let mut cache = model.new_cache();
                let mut step = model.extend(&mut cache, &prompt, false)?;
                let p = softmax(&step.logits);
                tp += p[target[0] as usize];
                h += entropy(&p);
                let mut logp = p[target[0] as usize].ln();
                for w in target.windows(2) {
                    step = model.extend(&mut cache, &w[..1], false)?;
                    logp += softmax(&step.logits)[w[1] as usize].ln();
                }
                lp += logp;
            }
            let n = AttributeKind::ALL.len() as f64;
            Ok(ConfidenceRecord {
                entity_id: e,
                subset: subset.to_string(),
                target_prob: tp / n,
                entropy: h / n,
                seq_logprob: lp / n,
            })
        })
        .collect()
}

pub fn confidence_records(records: &[ConfidenceRecord], step: u64, seed: u64) -> Vec<MetricRecord> {
    let mut subsets: Vec<&str> = records.iter().map(|r| r.subset.as_str()).collect();
    subsets.dedup();
    let mut out = Vec::new();
    for s in subsets {
        let rs: Vec<&ConfidenceRecord> = records.iter().filter(|r| r.subset == s).collect();
        let n = rs.len() as f64;
        out.push(MetricRecord::new(step, "probe", "target_prob", rs.iter().map(|r| r.target_prob).sum::<f64>() / n, s, seed));
        out.push(MetricRecord::new(step, "probe", "entropy", rs.iter().map(|r| r.entropy).sum::<f64>() / n, s, seed));
        out.push(MetricRecord::new(step, "probe", "seq_logprob", rs.iter().map(|r| r.seq_logprob).sum::<f64>() / n, s, seed));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    ProbeName,
    ContextTarget,
}

impl SpanKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SpanKind::ProbeName => "probe_name",
            SpanKind::ContextTarget => "context_target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionMassRecord {
    pub step: u64,
    pub span_kind: SpanKind,
    /// Per layer, mean over heads of the attention mass on the span.
    pub per_layer: Vec<f64>,
    /// Per layer, sum over heads.
    pub per_layer_raw: Vec<f64>,
    /// Mean of `per_layer`.
    pub total: f64,
}

/// Span mass from last-position attention `[layer][head][key]`. Returns the
/// head-mean and head-sum per layer.
pub fn span_mass<T: Real>(attention: &[Vec<Vec<T>>], spans: &[Range<usize>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if spans.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptySpan);
    }
    let mut mean = Vec::with_capacity(attention.len());
    let mut raw = Vec::with_capacity(attention.len());
    for layer in attention {
        let mut sum = 0.0;
        for head in layer {
            for s in spans {
                if s.end > head.len() {
                    return Err(Error::InvalidArgument(format!(
                        "span {s:?} beyond sequence of {}",
                        head.len()
                    )));
                }
                sum += head[s.clone()].iter().map(|x| x.to_f64().unwrap()).sum::<f64>();
            }
        }
        raw.push(sum);
        mean.push(sum / layer.len() as f64);
    }
    Ok((mean, raw))
}

/// Attention mass from the final position of `prompt` into `spans`.
pub fn attention_mass<T: Real>(model: &Model<T>, prompt: &[u32], spans: &[Range<usize>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut cache = model.new_cache();
    let step = model.extend(&mut cache, prompt, true)?;
    span_mass(step.attention.as_deref().expect("attention requested"), spans)
}

/// Mean name-span and target-span masses over every probe of the given
/// in-context items.
pub fn icku_attention<T: Real>(model: &Model<T>, items: &[EvalItem], step: u64) -> Result<Vec<AttentionMassRecord>> {
    let per_sample: Vec<Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>> = items
        .par_iter()
        .map(|it| {
            let context = it
                .context
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("attention probe needs contexts".into()))?;
            let prefix = it.prefix();
            let shift = |r: &Range<usize>, by: usize| r.start + by..r.end + by;
            it.samples
                .iter()
                .map(|s| {
                    let mut prompt = prefix.clone();
                    prompt.extend_from_slice(&s.prompt.ids);
                    let names: Vec<_> = s
                        .prompt
                        .spans_with(SpanLabel::Name, s.entity_id)
                        .map(|sp| shift(&sp.tokens, prefix.len()))
                        .collect();
                    let targets: Vec<_> = context
                        .spans_with(SpanLabel::Value(s.kind), s.entity_id)
                        .map(|sp| shift(&sp.tokens, 1))
                        .collect();
                    let mut cache = model.new_cache();
                    let st = model.extend(&mut cache, &prompt, true)?;
                    let att = st.attention.as_deref().expect("attention requested");
                    let (nm, nr) = span_mass(att, &names)?;
                    let (tm, tr) = span_mass(att, &targets)?;
                    Ok((nm, nr, tm, tr))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let all: Vec<_> = per_sample.into_iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument("no samples for attention probe".into()));
    }
    let layers = all[0].0.len();
    let n = all.len() as f64;
    let avg = |f: &dyn Fn(&(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
        (0..layers).map(|l| all.iter().map(|x| f(x)[l]).sum::<f64>() / n).collect()
    };
    let rec = |kind, mean: Vec<f64>, raw: Vec<f64>| AttentionMassRecord {
        step,
        span_kind: kind,
        total: mean.iter().sum::<f64>() / layers as f64,
        per_layer: mean,
        per_layer_raw: raw,
    };
    Ok(vec![
        rec(SpanKind::ProbeName, avg(&|x| &x.0), avg(&|x| &x.1)),
        rec(SpanKind::ContextTarget, avg(&|x| &x.2), avg(&|x| &x.3)),
    ])
}

pub fn attention_records(records: &[AttentionMassRecord], seed: u64) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    for r in records {
        let m = format!("attn_{}", r.span_kind.as_str());
        let raw = format!("{m}_raw");
        out.push(MetricRecord::new(r.step, "probe", &m, r.total, "all", seed));
        for (l, (&a, &b)) in r.per_layer.iter().zip(&r.per_layer_raw).enumerate() {
            out.push(MetricRecord::new(r.step, "probe", &m, a, &format!("layer:{l}"), seed));
            out.push(MetricRecord::new(r.step, "probe", &raw, b, &format!("layer:{l}"), seed));
        }
    }
    out
}

/// CSV rows `step,layer,span_kind,mass` (head-mean mass).
pub fn attention_csv_rows(records: &[AttentionMassRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for r in records {
        for (l, m) in r.per_layer.iter().enumerate() {
            out.push(format!("{},{},{},{}", r.step, l, r.span_kind.as_str(), m));
        }
    }
    out
}

/// Per-entity inputs to a rank-binned report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntity {
    /// 1 = most frequent.
    pub rank: u32,
    pub pref_pk: Option<f64>,
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankBin {
    pub index: usize,
    /// Inclusive rank range covered by the bin.
    pub rank_lo: u32,
    pub rank_hi: u32,
    pub count: usize,
    /// `None` when the bin holds no entity with that metric.
    pub mean_pref_pk: Option<f64>,
    pub mean_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankBinReport {
    pub n_ranks: usize,
    /// Ordered from most frequent to least frequent.
    pub bins: Vec<RankBin>,
}

/// Splits ranks `1..=n_ranks` into `n_bins` equal-width bins and averages
/// each metric inside every bin.
pub fn rank_binned_report(entities: &[RankedEntity], n_ranks: usize, n_bins: usize) -> Result<RankBinReport> {
    if n_bins == 0 || n_ranks == 0 {
        return Err(Error::InvalidArgument("rank bins need n_bins >= 1 and n_ranks >= 1".into()));
    }
    let bin_of = |rank: u32| ((rank as usize - 1) * n_bins / n_ranks).min(n_bins - 1);
    let mut acc = vec![(0usize, 0.0, 0usize, 0.0, 0usize); n_bins];
    for e in entities {
        if e.rank == 0 || e.rank as usize > n_ranks {
            return Err(Error::InvalidArgument(format!("rank {} outside 1..={n_ranks}", e.rank)));
        }
        let a = &mut acc[bin_of(e.rank)];
        a.0 += 1;
        if let Some(p) = e.pref_pk {
            a.1 += p;
            a.2 += 1;
        }
        if let Some(h) = e.entropy {
            a.3 += h;
            a.4 += 1;
        }
    }
    let bins = acc
        .into_iter()
        .enumerate()
        .map(|(i, (count, ps, pn, hs, hn))| {
            // Smallest and largest rank mapping to bin i.
            let lo = (i * n_ranks).div_ceil(n_bins) + 1;
            let hi = ((i + 1) * n_ranks).div_ceil(n_bins);
            RankBin {
                index: i,
                rank_lo: lo as u32,
                rank_hi: hi as u32,
                count,
                mean_pref_pk: (pn > 0).then(|| ps / pn as f64),
                mean_entropy: (hn > 0).then(|| hs / hn as f64),
            }
        })
        .collect();
    Ok(RankBinReport { n_ranks, bins })
}

impl RankBinReport {
    pub fn records(&self, step: u64, seed: u64) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for b in &self.bins {
            let subset = format!("bin:{}", b.index);
            if let Some(p) = b.mean_pref_pk {
                out.push(MetricRecord::new(step, "probe", "rank_pref_pk", p, &subset, seed));
            }
            if let Some(h) = b.mean_entropy {
                out.push(MetricRecord::new(step, "probe", "rank_entropy", h, &subset, seed));
            }
        }
        out
    }
}
