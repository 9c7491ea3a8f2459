//! Evaluation scenarios scored by greedy decoding and exact match:
//! parametric recall (PKU), in-context recall on unseen entities (ICKU), and
//! preference under a conflicting context.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::biogen::{AttributeKind, ParagraphRole, ValueId, World};
use crate::corpus::{fresh_value, paragraphs_to_tokens, SkewConfig, SkewMode, PERTURBED_KINDS};
use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::model::{Model, Real};
use crate::rng;
use crate::tokenizer::{SpanLabel, TokenId, TokenSeq, Vocab, EOD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Pku,
    Icku,
    Conflict,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Pku => "pku",
            Scenario::Icku => "icku",
            Scenario::Conflict => "conflict",
        }
    }
}

/// One probe to decode.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub entity_id: u32,
    pub kind: AttributeKind,
    /// Probe tokens, with a name span.
    pub prompt: TokenSeq,
    pub target: String,
    /// Token length of `target`.
    pub target_len: usize,
    /// Perturbed value shown in a conflicting context, with its token length.
    pub conflict_target: Option<(String, usize)>,
    /// Number of tokens to decode: the longest candidate answer.
    pub budget: usize,
}

impl EvalSample {
    /// Scores a generation: `(matches target, matches conflict target)`.
    /// Each candidate is compared with the generation prefix of its own
    /// length; if both match (one is a prefix of the other) the longer wins.
    pub fn score(&self, generated: &[TokenId], vocab: &Vocab) -> (bool, bool) {
        let hit = |len: usize, text: &str| generated.len() >= len && exact_match(&generated[..len], text, vocab);
        let t = hit(self.target_len, &self.target);
        let c = self
            .conflict_target
            .as_ref()
            .is_some_and(|(text, len)| hit(*len, text));
        match (t, c) {
            (true, true) => {
                let clen = self.conflict_target.as_ref().unwrap().1;
                (self.target_len > clen, clen > self.target_len)
            }
            other => other,
        }
    }
}

/// All probes of one entity sharing one context.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub entity_id: u32,
    pub context: Option<TokenSeq>,
    pub samples: Vec<EvalSample>,
}

impl EvalItem {
    /// Tokens fed before the probe: the separator and the context, if any.
    pub fn prefix(&self) -> Vec<TokenId> {
        let mut p = vec![EOD];
        if let Some(c) = &self.context {
            p.extend_from_slice(&c.ids);
        }
        p
    }

    /// Longest prefix + probe + answer over the samples.
    pub fn max_len(&self) -> usize {
        let base = 1 + self.context.as_ref().map_or(0, |c| c.len());
        base + self
            .samples
            .iter()
            .map(|s| s.prompt.len() + s.budget)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub entity_id: u32,
    pub kind: AttributeKind,
    pub generated: String,
    pub target: String,
    pub conflict_target: Option<String>,
    /// Generated text equals `target`.
    pub matched: bool,
    /// Generated text equals `conflict_target`.
    pub matched_conflict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityScore {
    pub entity_id: u32,
    /// Fraction of probes reproducing the true value.
    pub score: f64,
    /// Fraction reproducing the contextual value (conflict only).
    pub context_score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub k: usize,
    /// Acc for PKU / ICKU, Pref_PK for conflict.
    pub score: f64,
    /// Pref_ICK for conflict, zero otherwise.
    pub context_score: f64,
    pub per_entity: Vec<EntityScore>,
    pub outcomes: Vec<Outcome>,
}

impl ScenarioResult {
    pub fn accuracy(&self) -> f64 {
        self.score
    }

    pub fn pref_pk(&self) -> f64 {
        self.score
    }

    pub fn pref_ick(&self) -> f64 {
        self.context_score
    }

    /// Mean accuracy restricted to one attribute kind.
    pub fn kind_accuracy(&self, kind: AttributeKind) -> Option<f64> {
        let hits: Vec<bool> = self.outcomes.iter().filter(|o| o.kind == kind).map(|o| o.matched).collect();
        if hits.is_empty() {
            return None;
        }
        Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    }

    /// Metric records for this result under `subset`.
    pub fn records(&self, step: u64, subset: &str, seed: u64) -> Vec<MetricRecord> {
        let sc = self.scenario.as_str();
        match self.scenario {
            Scenario::Pku | Scenario::Icku => {
                let mut out = vec![MetricRecord::new(step, sc, "acc", self.score, subset, seed)];
                if subset == "all" {
                    for kind in AttributeKind::ALL {
                        if let Some(a) = self.kind_accuracy(kind) {
                            out.push(MetricRecord::new(step, sc, "acc", a, &format!("kind:{}", kind.as_str()), seed));
                        }
                    }
                }
                out
            }
            Scenario::Conflict => vec![
                MetricRecord::new(step, sc, "pref_pk", self.score, subset, seed),
                MetricRecord::new(step, sc, "pref_ick", self.context_score, subset, seed),
            ],
        }
    }
}

/// True iff the decoded generation equals `target` exactly (case-sensitive).
pub fn exact_match(generated: &[TokenId], target: &str, vocab: &Vocab) -> bool {
    vocab.decode(generated).map(|s| s == target).unwrap_or(false)
}

/// The held-out probe of `kind` for an entity, tokenized with its name span.
pub fn probe_tokens(world: &World, vocab: &Vocab, entity_id: u32, kind: AttributeKind) -> Result<(TokenSeq, String)> {
    let probe = world.probe(entity_id, kind);
    let seq = vocab.encode_spans(&probe.prompt_text, &[(SpanLabel::Name, entity_id, probe.name_span.clone())])?;
    Ok((seq, probe.target_value))
}

fn sample(world: &World, vocab: &Vocab, entity_id: u32, kind: AttributeKind) -> Result<EvalSample> {
    let (prompt, target) = probe_tokens(world, vocab, entity_id, kind)?;
    let target_len = vocab.encode(&target)?.len();
    Ok(EvalSample {
        entity_id,
        kind,
        prompt,
        target,
        target_len,
        conflict_target: None,
        budget: target_len,
    })
}

/// Target's evaluation paragraph plus those of two other unseen entities,
/// in shuffled order.
pub fn build_icku_context<R: Rng + ?Sized>(world: &World, vocab: &Vocab, target: u32, rng: &mut R) -> Result<TokenSeq> {
    if world.is_train(target) {
        return Err(Error::InvalidArgument(format!("entity {target} is a training entity")));
    }
    if world.unknown.len() < 3 {
        return Err(Error::InvalidArgument(
            "in-context evaluation needs at least 3 unseen entities".into(),
        ));
    }
    let base = world.train.len() as u32;
    let n = world.unknown.len() as u32;
    let mut ids = vec![target];
    while ids.len() < 3 {
        let e = base + rng.random_range(0..n);
        if !ids.contains(&e) {
            ids.push(e);
        }
    }
    ids.shuffle(rng);
    let paragraphs: Vec<_> = ids.iter().map(|&e| world.paragraph(e, ParagraphRole::EvalContext)).collect();
    paragraphs_to_tokens(vocab, &paragraphs)
}

/// A perturbed value for one kind of a conflict context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perturbation {
    pub kind: AttributeKind,
    pub original: String,
    pub replacement: String,
}

/// A value of `kind` other than `original` with the same token length, so a
/// single decoding budget fits both. Falls back to any other value when no
/// same-length value turns up.
pub fn length_matched_value<R: Rng + ?Sized>(
    world: &World,
    vocab: &Vocab,
    kind: AttributeKind,
    original: ValueId,
    rng: &mut R,
) -> Result<ValueId> {
    let len = vocab.encode(world.pools.value(kind, original))?.len();
    let mut v = fresh_value(world, kind, original, rng);
    for _ in 0..1000 {
        if vocab.encode(world.pools.value(kind, v))?.len() == len {
            return Ok(v);
        }
        v = fresh_value(world, kind, original, rng);
    }
    Ok(v)
}

/// The entity's evaluation paragraph with birth date and major replaced by
/// fresh values of the same token length.
pub fn build_conflict_context<R: Rng + ?Sized>(
    world: &World,
    vocab: &Vocab,
    entity_id: u32,
    rng: &mut R,
) -> Result<(TokenSeq, Vec<Perturbation>)> {
    let profile = world.profile(entity_id);
    let mut values = profile.values;
    let mut perturbed = Vec::new();
    for kind in PERTURBED_KINDS {
        let v = length_matched_value(world, vocab, kind, profile.value(kind), rng)?;
        values[kind.index()] = v;
        perturbed.push(Perturbation {
            kind,
            original: world.pools.value(kind, profile.value(kind)).to_string(),
            replacement: world.pools.value(kind, v).to_string(),
        });
    }
    let p = world.paragraph_with_values(entity_id, ParagraphRole::EvalContext, values);
    Ok((paragraphs_to_tokens(vocab, &[p])?, perturbed))
}

pub fn pku_item(world: &World, vocab: &Vocab, entity_id: u32) -> Result<EvalItem> {
    let samples = AttributeKind::ALL
        .iter()
        .map(|&k| sample(world, vocab, entity_id, k))
        .collect::<Result<_>>()?;
    Ok(EvalItem {
        entity_id,
        context: None,
        samples,
    })
}

pub fn icku_item<R: Rng + ?Sized>(world: &World, vocab: &Vocab, entity_id: u32, rng: &mut R) -> Result<EvalItem> {
    let mut item = pku_item(world, vocab, entity_id)?;
    item.context = Some(build_icku_context(world, vocab, entity_id, rng)?);
    Ok(item)
}

pub fn conflict_item<R: Rng + ?Sized>(world: &World, vocab: &Vocab, entity_id: u32, rng: &mut R) -> Result<EvalItem> {
    let (context, perturbed) = build_conflict_context(world, vocab, entity_id, rng)?;
    let samples = perturbed
        .into_iter()
        .map(|p| {
            let mut s = sample(world, vocab, entity_id, p.kind)?;
            let len = vocab.encode(&p.replacement)?.len();
            s.budget = s.budget.max(len);
            s.conflict_target = Some((p.replacement, len));
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(EvalItem {
        entity_id,
        context: Some(context),
        samples,
    })
}

/// Greedy continuation source. Implemented by [`Model`]; tests plug in
/// scripted decoders.
pub trait Generator: Sync {
    /// Greedy tokens continuing `prefix ++ prompt`, exactly `budget` of them.
    fn continue_greedy(&self, prefix: &[TokenId], prompts: &[&[TokenId]], budget: &[usize]) -> Result<Vec<Vec<TokenId>>>;
}

impl<T: Real> Generator for Model<T> {
    fn continue_greedy(&self, prefix: &[TokenId], prompts: &[&[TokenId]], budget: &[usize]) -> Result<Vec<Vec<TokenId>>> {
        let mut base = self.new_cache();
        self.extend(&mut base, prefix, false)?;
        prompts
            .iter()
            .zip(budget)
            .map(|(p, &n)| {
                let mut cache = base.clone();
                let out = self.generate_from(&mut cache, p, n)?;
                Ok(out[p.len()..].to_vec())
            })
            .collect()
    }
}

/// Decodes every sample of an item, sharing the prefix.
pub fn run_item<G: Generator + ?Sized>(gen: &G, vocab: &Vocab, item: &EvalItem) -> Result<Vec<Outcome>> {
    let prompts: Vec<&[TokenId]> = item.samples.iter().map(|s| s.prompt.ids.as_slice()).collect();
    let budgets: Vec<usize> = item.samples.iter().map(|s| s.budget).collect();
    let outs = gen.continue_greedy(&item.prefix(), &prompts, &budgets)?;
    Ok(item
        .samples
        .iter()
        .zip(outs)
        .map(|(s, ids)| {
            let (matched, matched_conflict) = s.score(&ids, vocab);
            Outcome {
                entity_id: s.entity_id,
                kind: s.kind,
                matched,
                matched_conflict,
                generated: vocab.decode(&ids).unwrap_or_default(),
                target: s.target.clone(),
                conflict_target: s.conflict_target.as_ref().map(|c| c.0.clone()),
            }
        })
        .collect())
}

/// Scores a list of items. Per-entity score is the fraction of matching
/// probes; the scenario score is the mean over entities.
pub fn run_scenario<G: Generator + ?Sized>(model: &G, vocab: &Vocab, scenario: Scenario, items: &[EvalItem]) -> Result<ScenarioResult> {
    let per_item: Vec<Vec<Outcome>> = items
        .par_iter()
        .map(|it| run_item(model, vocab, it))
        .collect::<Result<_>>()?;
    let mut per_entity = Vec::with_capacity(items.len());
    for (it, outs) in items.iter().zip(&per_item) {
        let n = outs.len().max(1) as f64;
        per_entity.push(EntityScore {
            entity_id: it.entity_id,
            score: outs.iter().filter(|o| o.matched).count() as f64 / n,
            context_score: outs.iter().filter(|o| o.matched_conflict).count() as f64 / n,
        });
    }
    let k = per_entity.len();
    let mean = |f: fn(&EntityScore) -> f64| {
        if k == 0 {
            0.0
        } else {
            per_entity.iter().map(f).sum::<f64>() / k as f64
        }
    };
    Ok(ScenarioResult {
        scenario,
        k,
        score: mean(|e| e.score),
        context_score: mean(|e| e.context_score),
        outcomes: per_item.into_iter().flatten().collect(),
        per_entity,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    /// Draw a new entity sample at every evaluation instead of a frozen one.
    pub resample: bool,
    pub seed: u64,
    /// Fraction of entities in the frequency slices (Zipf skew only).
    pub slice_frac: f64,
}

/// The entity samples and contexts used at one evaluation.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub pku: Vec<EvalItem>,
    pub icku: Vec<EvalItem>,
    pub conflict: Vec<EvalItem>,
    /// `(subset name, pku items, conflict items)` for frequency slices.
    pub slices: Vec<(String, Vec<EvalItem>, Vec<EvalItem>)>,
}

fn choose(n: usize, k: usize, rng: &mut impl Rng) -> Vec<u32> {
    let mut v: Vec<u32> = rand::seq::index::sample(rng, n, k.min(n)).into_iter().map(|i| i as u32).collect();
    v.sort_unstable();
    v
}

impl EvalSet {
    pub fn build(world: &World, vocab: &Vocab, cfg: &EvalConfig, skew: &SkewConfig, id: u64) -> Result<Self> {
        let n_train = world.train.len();
        let base = n_train as u32;
        let mut r = rng::stream(cfg.seed, id, "eval-pku");
        let pku = choose(n_train, cfg.k, &mut r)
            .into_iter()
            .map(|e| pku_item(world, vocab, e))
            .collect::<Result<_>>()?;
        let mut r = rng::stream(cfg.seed, id, "eval-icku");
        let icku_ids = choose(world.unknown.len(), cfg.k, &mut r);
        let icku = icku_ids
            .into_iter()
            .map(|e| icku_item(world, vocab, base + e, &mut r))
            .collect::<Result<_>>()?;
        let mut r = rng::stream(cfg.seed, id, "eval-conflict");
        let conflict_ids = choose(n_train, cfg.k, &mut r);
        let conflict = conflict_ids
            .into_iter()
            .map(|e| conflict_item(world, vocab, e, &mut r))
            .collect::<Result<_>>()?;
        let mut slices = Vec::new();
        if skew.mode == SkewMode::Zipf {
            let pct = (cfg.slice_frac * 100.0).round() as u32;
            for (name, top) in [(format!("top{pct}"), true), (format!("bottom{pct}"), false)] {
                let members = skew.rank_slice(cfg.slice_frac, top);
                let mut r = rng::stream(cfg.seed, id, &format!("eval-{name}"));
                let picks: Vec<u32> = choose(members.len(), cfg.k, &mut r)
                    .into_iter()
                    .map(|i| members[i as usize])
                    .collect();
                let p = picks.iter().map(|&e| pku_item(world, vocab, e)).collect::<Result<_>>()?;
                let c = picks
                    .iter()
                    .map(|&e| conflict_item(world, vocab, e, &mut r))
                    .collect::<Result<_>>()?;
                slices.push((name, p, c));
            }
        }
        Ok(Self {
            pku,
            icku,
            conflict,
            slices,
        })
    }

    /// Longest prompt plus answer across all items.
    pub fn max_len(&self) -> usize {
        let all = self.pku.iter().chain(&self.icku).chain(&self.conflict);
        let sl = self.slices.iter().flat_map(|(_, a, b)| a.iter().chain(b));
        all.chain(sl).map(|i| i.max_len()).max().unwrap_or(0)
    }
}

/// Results of one full evaluation.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub pku: ScenarioResult,
    pub icku: ScenarioResult,
    pub conflict: ScenarioResult,
    pub slices: Vec<(String, ScenarioResult, ScenarioResult)>,
}

impl EvalReport {
    pub fn records(&self, step: u64, seed: u64) -> Vec<MetricRecord> {
        let mut out = self.pku.records(step, "all", seed);
        out.extend(self.icku.records(step, "all", seed));
        out.extend(self.conflict.records(step, "all", seed));
        for (name, p, c) in &self.slices {
            out.extend(p.records(step, name, seed));
            out.extend(c.records(step, name, seed));
        }
        out
    }

    /// Per-item audit lines `{entity_id, kind, scenario, prompt, generated, target, match}`.
    pub fn audit_lines(&self, set: &EvalSet, vocab: &Vocab) -> Result<Vec<String>> {
        #[derive(Serialize)]
        struct Line<'a> {
            scenario: &'a str,
            entity_id: u32,
            kind: &'a str,
            prompt: String,
            generated: &'a str,
            target: &'a str,
            conflict_target: Option<&'a str>,
            #[serde(rename = "match")]
            matched: bool,
        }
        let mut out = Vec::new();
        let pairs = [
            (&self.pku, &set.pku),
            (&self.icku, &set.icku),
            (&self.conflict, &set.conflict),
        ];
        for (res, items) in pairs {
            let samples = items.iter().flat_map(|it| it.samples.iter().map(move |s| (it, s)));
            for ((it, s), o) in samples.zip(&res.outcomes) {
                let mut ids = it.context.as_ref().map(|c| c.ids.clone()).unwrap_or_default();
                ids.extend_from_slice(&s.prompt.ids);
                let line = Line {
                    scenario: res.scenario.as_str(),
                    entity_id: o.entity_id,
                    kind: o.kind.as_str(),
                    prompt: vocab.decode(&ids)?,
                    generated: &o.generated,
                    target: &o.target,
                    conflict_target: o.conflict_target.as_deref(),
                    matched: o.matched,
                };
                out.push(serde_json::to_string(&line)?);
            }
        }
        Ok(out)
    }
}

/// Holds the evaluation samples for a run (frozen by default).
#[derive(Debug, Clone)]
pub struct Evaluator<'a> {
    world: &'a World,
    vocab: &'a Vocab,
    cfg: EvalConfig,
    skew: SkewConfig,
    frozen: Option<EvalSet>,
}

impl<'a> Evaluator<'a> {
    pub fn new(world: &'a World, vocab: &'a Vocab, cfg: EvalConfig, skew: SkewConfig) -> Result<Self> {
        if cfg.k == 0 || cfg.k > world.train.len() || cfg.k > world.unknown.len() {
            return Err(Error::InvalidArgument(format!(
                "eval k = {} must be in 1..=min(|train|, |unknown|)",
                cfg.k
            )));
        }
        let frozen = if cfg.resample {
            None
        } else {
            Some(EvalSet::build(world, vocab, &cfg, &skew, 0)?)
        };
        Ok(Self {
            world,
            vocab,
            cfg,
            skew,
            frozen,
        })
    }

    /// Samples used at `step`.
    pub fn set_for(&self, step: u64) -> Result<std::borrow::Cow<'_, EvalSet>> {
        match &self.frozen {
            Some(s) => Ok(std::borrow::Cow::Borrowed(s)),
            None => Ok(std::borrow::Cow::Owned(EvalSet::build(
                self.world,
                self.vocab,
                &self.cfg,
                &self.skew,
                step + 1,
            )?)),
        }
    }

    /// Checks that every prompt fits the model context.
    pub fn check_context(&self, context_len: usize) -> Result<()> {
        let set = self.set_for(0)?;
        let need = set.max_len();
        if need > context_len {
            return Err(Error::Config(format!(
                "evaluation prompts need {need} positions but context_len is {context_len}"
            )));
        }
        Ok(())
    }

    pub fn evaluate<G: Generator + ?Sized>(&self, model: &G, step: u64) -> Result<(EvalReport, std::borrow::Cow<'_, EvalSet>)> {
        let set = self.set_for(step)?;
        let slices = set
            .slices
            .iter()
            .map(|(name, p, c)| {
                Ok((
                    name.clone(),
                    run_scenario(model, self.vocab, Scenario::Pku, p)?,
                    run_scenario(model, self.vocab, Scenario::Conflict, c)?,
                ))
            })
            .collect::<Result<_>>()?;
        let report = EvalReport {
            pku: run_scenario(model, self.vocab, Scenario::Pku, &set.pku)?,
            icku: run_scenario(model, self.vocab, Scenario::Icku, &set.icku)?,
            conflict: run_scenario(model, self.vocab, Scenario::Conflict, &set.conflict)?,
            slices,
        };
        Ok((report, set))
    }
}
