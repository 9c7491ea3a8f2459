//! Training documents: corpus variants, inconsistency noise, entity sampling
//! and token packing.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::biogen::{AttributeKind, Paragraph, ParagraphRole, ValueId, World, TRAIN_PARAGRAPHS};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::{SpanLabel, TokenId, TokenSeq, Vocab, EOD, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Single,
    Repeated,
    RepeatedMix,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Single => "single",
            Variant::Repeated => "repeated",
            Variant::RepeatedMix => "repeated_mix",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Variant::Single),
            "repeated" => Ok(Variant::Repeated),
            "repeated_mix" => Ok(Variant::RepeatedMix),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected single, repeated or repeated_mix)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantConfig {
    pub variant: Variant,
    pub entities_per_doc: usize,
    pub paragraphs_per_entity: usize,
    pub shuffle_paragraphs: bool,
}

impl VariantConfig {
    pub fn new(variant: Variant) -> Self {
        let (entities_per_doc, paragraphs_per_entity, shuffle_paragraphs) = match variant {
            Variant::Single => (1, 1, false),
            Variant::Repeated => (1, 2, false),
            Variant::RepeatedMix => (3, 2, true),
        };
        Self {
            variant,
            entities_per_doc,
            paragraphs_per_entity,
            shuffle_paragraphs,
        }
    }

    pub fn paragraphs_per_doc(&self) -> usize {
        self.entities_per_doc * self.paragraphs_per_entity
    }
}

/// Kinds whose leading mention may be perturbed.
pub const PERTURBED_KINDS: [AttributeKind; 2] = [AttributeKind::BirthDate, AttributeKind::Major];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Fresh Bernoulli draw and fresh replacement values every time an entity
    /// appears in a document.
    PerOccurrence,
    /// One draw per entity for the whole run; noisy entities always carry the
    /// same replacement values in their leading paragraph.
    PerEntity,
}

impl FromStr for NoiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_occurrence" => Ok(NoiseMode::PerOccurrence),
            "per_entity" => Ok(NoiseMode::PerEntity),
            _ => Err(Error::Config(format!(
                "unknown noise mode {s:?} (expected per_occurrence or per_entity)"
            ))),
        }
    }
}

impl NoiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::PerOccurrence => "per_occurrence",
            NoiseMode::PerEntity => "per_entity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub p: f64,
    pub mode: NoiseMode,
    /// Draw a separate Bernoulli for each perturbed kind instead of one joint draw.
    pub per_kind: bool,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self::new(0.0)
    }

    pub fn new(p: f64) -> Self {
        Self {
            p,
            mode: NoiseMode::PerOccurrence,
            per_kind: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("noise_p {} outside [0, 1]", self.p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewMode {
    Uniform,
    Zipf,
}

impl FromStr for SkewMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SkewMode::Uniform),
            "zipf" => Ok(SkewMode::Zipf),
            _ => Err(Error::Config(format!("unknown skew mode {s:?} (expected uniform or zipf)"))),
        }
    }
}

impl SkewMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SkewMode::Uniform => "uniform",
            SkewMode::Zipf => "zipf",
        }
    }
}

/// Entity sampling distribution over the training set. `ranks[i]` is the
/// frequency rank (1 = most frequent) of training entity `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewConfig {
    pub mode: SkewMode,
    pub alpha: f64,
    pub ranks: Vec<u32>,
}

impl SkewConfig {
    pub fn uniform(n: usize) -> Self {
        Self {
            mode: SkewMode::Uniform,
            alpha: 0.0,
            ranks: (1..=n as u32).collect(),
        }
    }

    /// Zipfian skew with ranks assigned by a seeded shuffle.
    pub fn zipf(n: usize, alpha: f64, seed: u64) -> Self {
        let mut ranks: Vec<u32> = (1..=n as u32).collect();
        ranks.shuffle(&mut rng::stream(seed, 0, "ranks"));
        Self {
            mode: SkewMode::Zipf,
            alpha,
            ranks,
        }
    }

    pub fn n(&self) -> usize {
        self.ranks.len()
    }

    /// Sampling weight of each entity (indexed by entity id), summing to 1.
    pub fn entity_weights(&self) -> Result<Vec<f64>> {
        let n = self.n();
        match self.mode {
            SkewMode::Uniform => {
                if n == 0 {
                    return Err(Error::InvalidArgument("no entities to sample".into()));
                }
                Ok(vec![1.0 / n as f64; n])
            }
            SkewMode::Zipf => {
                let w = zipf_weights(n, self.alpha)?;
                Ok(self.ranks.iter().map(|&r| w[r as usize - 1]).collect())
            }
        }
    }

    /// Entity ids whose rank falls in the top `frac` (most frequent) or bottom `frac`.
    pub fn rank_slice(&self, frac: f64, top: bool) -> Vec<u32> {
        let n = self.n();
        let k = ((n as f64 * frac).round() as usize).clamp(1, n);
        (0..n as u32)
            .filter(|&e| {
                let r = self.ranks[e as usize] as usize;
                if top {
                    r <= k
                } else {
                    r > n - k
                }
            })
            .collect()
    }
}

/// `P(r) = r^-alpha / sum_k k^-alpha` for ranks `1..=n`.
pub fn zipf_weights(n: usize, alpha: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("zipf_weights needs n >= 1".into()));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("zipf alpha must be >= 0, got {alpha}")));
    }
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-alpha)).collect();
    // Sum smallest-first for accuracy.
    let z: f64 = raw.iter().rev().sum();
    Ok(raw.into_iter().map(|w| w / z).collect())
}

/// Weighted entity sampler (without replacement inside a group).
#[derive(Debug, Clone)]
pub struct EntitySampler {
    weights: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl EntitySampler {
    pub fn new(skew: &SkewConfig) -> Result<Self> {
        let weights = skew.entity_weights()?;
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(format!("entity weights: {e}")))?;
        Ok(Self { weights, dist })
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    /// Draws `group_size` distinct entities by successive weighted sampling.
    pub fn sample_group<R: Rng + ?Sized>(&self, group_size: usize, rng: &mut R) -> Result<Vec<u32>> {
        let n = self.n();
        if group_size > n {
            return Err(Error::InvalidArgument(format!(
                "group of {group_size} requested from {n} entities"
            )));
        }
        if group_size * 2 <= n {
            let mut out = Vec::with_capacity(group_size);
            let mut rejected = 0usize;
            while out.len() < group_size && rejected < 64 * group_size + 64 {
                let e = self.dist.sample(rng) as u32;
                if out.contains(&e) {
                    rejected += 1;
                } else {
                    out.push(e);
                }
            }
            if out.len() == group_size {
                return Ok(out);
            }
        }
        // Efraimidis-Spirakis: the top keys u^(1/w) give the same law as
        // successive weighted draws without replacement.
        let mut keyed: Vec<(f64, u32)> = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                (u.ln() / w, i as u32)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(keyed.into_iter().take(group_size).map(|(_, i)| i).collect())
    }
}

/// Leading-paragraph perturbation applied to one entity in one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseFlag {
    pub entity_id: u32,
    pub kind: AttributeKind,
    pub original: ValueId,
    pub replacement: ValueId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub paragraphs: Vec<Paragraph>,
    pub noise_flags: Vec<NoiseFlag>,
}

impl Document {
    pub fn text(&self) -> String {
        let parts: Vec<&str> = self.paragraphs.iter().map(|p| p.text.as_str()).collect();
        parts.join(" ")
    }

    pub fn entity_ids(&self) -> Vec<u32> {
        self.paragraphs.iter().map(|p| p.entity_id).collect()
    }

    /// Index of the first paragraph of `entity_id`.
    pub fn leading_index(&self, entity_id: u32) -> Option<usize> {
        self.paragraphs.iter().position(|p| p.entity_id == entity_id)
    }

    pub fn tokens(&self, vocab: &Vocab) -> Result<TokenSeq> {
        paragraphs_to_tokens(vocab, &self.paragraphs)
    }
}

/// Tokenizes paragraphs joined by single spaces, with name and value spans.
pub fn paragraphs_to_tokens(vocab: &Vocab, paragraphs: &[Paragraph]) -> Result<TokenSeq> {
    let mut seq = TokenSeq::default();
    for p in paragraphs {
        let mut spans = Vec::with_capacity(8);
        for r in &p.name_spans {
            spans.push((SpanLabel::Name, p.entity_id, r.clone()));
        }
        for kind in AttributeKind::ALL {
            spans.push((SpanLabel::Value(kind), p.entity_id, p.value_spans[kind.index()].clone()));
        }
        seq.extend(&vocab.encode_spans(&p.text, &spans)?);
    }
    Ok(seq)
}

/// Builds one document for a group of entities. Each entity contributes
/// `paragraphs_per_entity` distinct training paragraphs.
pub fn assemble_document<R: Rng + ?Sized>(
    world: &World,
    variant: &VariantConfig,
    entities: &[u32],
    rng: &mut R,
) -> Result<Document> {
    if entities.len() != variant.entities_per_doc {
        return Err(Error::InvalidArgument(format!(
            "{} expects {} entities per document, got {}",
            variant.variant,
            variant.entities_per_doc,
            entities.len()
        )));
    }
    let mut seen = HashSet::new();
    for &e in entities {
        if !seen.insert(e) {
            return Err(Error::DuplicateEntity(e));
        }
        if !world.is_train(e) {
            return Err(Error::InvalidArgument(format!("entity {e} is not a training entity")));
        }
    }
    let mut paragraphs = Vec::with_capacity(variant.paragraphs_per_doc());
    for &e in entities {
        let picks = rand::seq::index::sample(rng, TRAIN_PARAGRAPHS, variant.paragraphs_per_entity);
        for slot in picks {
            paragraphs.push(world.paragraph(e, ParagraphRole::TRAIN[slot]));
        }
    }
    if variant.shuffle_paragraphs {
        paragraphs.shuffle(rng);
    }
    Ok(Document {
        paragraphs,
        noise_flags: Vec::new(),
    })
}

/// A uniformly drawn value of `kind` different from `original`.
pub fn fresh_value<R: Rng + ?Sized>(world: &World, kind: AttributeKind, original: ValueId, rng: &mut R) -> ValueId {
    let n = world.pools.value_pool(kind).len() as ValueId;
    debug_assert!(n >= 2);
    let v = rng.random_range(0..n - 1);
    if v >= original {
        v + 1
    } else {
        v
    }
}

/// Perturbs birth date and major in each entity's leading paragraph with
/// probability `noise.p`. Entities with a single paragraph are left alone.
pub fn inject_noise<R: Rng + ?Sized>(world: &World, mut doc: Document, noise: &NoiseConfig, rng: &mut R) -> Document {
    if noise.p <= 0.0 {
        return doc;
    }
    let mut order: Vec<u32> = Vec::new();
    for p in &doc.paragraphs {
        if !order.contains(&p.entity_id) {
            order.push(p.entity_id);
        }
    }
    for e in order {
        let count = doc.paragraphs.iter().filter(|p| p.entity_id == e).count();
        if count < 2 {
            continue;
        }
        let profile = world.profile(e);
        let replacements: Vec<(AttributeKind, ValueId)> = match noise.mode {
            NoiseMode::PerOccurrence => {
                let joint = rng.random_bool(noise.p);
                let mut out = Vec::new();
                for kind in PERTURBED_KINDS {
                    let fire = if noise.per_kind { rng.random_bool(noise.p) } else { joint };
                    if fire {
                        out.push((kind, fresh_value(world, kind, profile.value(kind), rng)));
                    }
                }
                out
            }
            NoiseMode::PerEntity => {
                let mut erng = rng::stream(world.seed, e as u64, "noise-entity");
                let joint = erng.random_bool(noise.p);
                let mut out = Vec::new();
                for kind in PERTURBED_KINDS {
                    let fire = if noise.per_kind { erng.random_bool(noise.p) } else { joint };
                    let value = fresh_value(world, kind, profile.value(kind), &mut erng);
                    if fire {
                        out.push((kind, value));
                    }
                }
                out
            }
        };
        if replacements.is_empty() {
            continue;
        }
        let idx = doc.leading_index(e).expect("entity present");
        let lead = &doc.paragraphs[idx];
        let mut values = lead.values;
        for &(kind, v) in &replacements {
            values[kind.index()] = v;
            doc.noise_flags.push(NoiseFlag {
                entity_id: e,
                kind,
                original: profile.value(kind),
                replacement: v,
            });
        }
        doc.paragraphs[idx] = world.paragraph_with_values(e, lead.role, values);
    }
    doc
}

/// Position of a document in the training stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocCursor {
    pub epoch: u64,
    pub doc: u64,
}

/// Lazily produces training documents epoch by epoch. Each epoch regroups
/// entities, re-picks paragraphs and re-draws noise, all keyed by
/// `(seed, epoch, document index)`.
#[derive(Debug, Clone)]
pub struct CorpusStream<'a> {
    world: &'a World,
    variant: VariantConfig,
    noise: NoiseConfig,
    skew: SkewConfig,
    sampler: EntitySampler,
    seed: u64,
    cursor: DocCursor,
    plan: Vec<Vec<u32>>,
}

impl<'a> CorpusStream<'a> {
    pub fn new(world: &'a World, variant: VariantConfig, noise: NoiseConfig, skew: SkewConfig, seed: u64) -> Result<Self> {
        noise.validate()?;
        if skew.n() != world.train.len() {
            return Err(Error::Config(format!(
                "skew covers {} entities but there are {} training entities",
                skew.n(),
                world.train.len()
            )));
        }
        if world.train.len() < variant.entities_per_doc {
            return Err(Error::Config(format!(
                "{} needs at least {} training entities",
                variant.variant, variant.entities_per_doc
            )));
        }
        let sampler = EntitySampler::new(&skew)?;
        let mut s = Self {
            world,
            variant,
            noise,
            skew,
            sampler,
            seed,
            cursor: DocCursor { epoch: 0, doc: 0 },
            plan: Vec::new(),
        };
        s.plan = s.epoch_plan(0)?;
        Ok(s)
    }

    pub fn skew(&self) -> &SkewConfig {
        &self.skew
    }

    /// Entity groups of one epoch. Uniform skew covers every entity once
    /// (a short final group is topped up with other entities); Zipf skew
    /// draws `ceil(N / group)` groups by weight.
    pub fn epoch_plan(&self, epoch: u64) -> Result<Vec<Vec<u32>>> {
        let g = self.variant.entities_per_doc;
        let n = self.world.train.len();
        let mut rng = rng::stream(self.seed, epoch, "epoch-plan");
        let groups = match self.skew.mode {
            SkewMode::Uniform => {
                let mut ids: Vec<u32> = (0..n as u32).collect();
                ids.shuffle(&mut rng);
                let mut groups: Vec<Vec<u32>> = ids.chunks(g).map(|c| c.to_vec()).collect();
                if let Some(last) = groups.last_mut() {
                    while last.len() < g {
                        let e = rng.random_range(0..n as u32);
                        if !last.contains(&e) {
                            last.push(e);
                        }
                    }
                }
                groups
            }
            SkewMode::Zipf => {
                let count = n.div_ceil(g);
                (0..count)
                    .map(|_| self.sampler.sample_group(g, &mut rng))
                    .collect::<Result<_>>()?
            }
        };
        Ok(groups)
    }

    pub fn cursor(&self) -> DocCursor {
        self.cursor
    }

    pub fn seek(&mut self, cursor: DocCursor) -> Result<()> {
        if cursor.epoch != self.cursor.epoch || self.plan.is_empty() {
            self.plan = self.epoch_plan(cursor.epoch)?;
        }
        self.cursor = cursor;
        Ok(())
    }

    /// Document `doc` of `epoch`, independent of the stream position.
    pub fn document(&self, epoch: u64, doc: u64, group: &[u32]) -> Result<Document> {
        let mut rng = rng::stream(self.seed, (epoch << 32) | doc, "document");
        let d = assemble_document(self.world, &self.variant, group, &mut rng)?;
        Ok(inject_noise(self.world, d, &self.noise, &mut rng))
    }

    pub fn next_document(&mut self) -> Result<(DocCursor, Document)> {
        if self.cursor.doc as usize >= self.plan.len() {
            self.cursor = DocCursor {
                epoch: self.cursor.epoch + 1,
                doc: 0,
            };
            self.plan = self.epoch_plan(self.cursor.epoch)?;
        }
        let at = self.cursor;
        let doc = self.document(at.epoch, at.doc, &self.plan[at.doc as usize])?;
        self.cursor.doc += 1;
        Ok((at, doc))
    }
}

/// Packs tokenized documents into fixed-length rows: each document is
/// preceded by the separator, documents flow across row boundaries, and only
/// a final ragged row is padded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packer {
    pub seq_len: usize,
    pending: Vec<TokenId>,
}

impl Packer {
    pub fn new(seq_len: usize) -> Self {
        Self {
            seq_len,
            pending: Vec::new(),
        }
    }

    pub fn pending(&self) -> &[TokenId] {
        &self.pending
    }

    pub fn push_document(&mut self, doc_index: u64, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() + 1 > self.seq_len {
            return Err(Error::DocumentTooLong {
                doc_index,
                len: tokens.len() + 1,
                seq_len: self.seq_len,
            });
        }
        self.pending.push(EOD);
        self.pending.extend_from_slice(tokens);
        Ok(())
    }

    /// A full row, if enough tokens are pending.
    pub fn pop_row(&mut self) -> Option<Vec<TokenId>> {
        if self.pending.len() < self.seq_len {
            return None;
        }
        let rest = self.pending.split_off(self.seq_len);
        Some(std::mem::replace(&mut self.pending, rest))
    }

    /// Pads and returns the remaining tokens, if any.
    pub fn flush(&mut self) -> Option<Vec<TokenId>> {
        if self.pending.is_empty() {
            return None;
        }
        let mut row = std::mem::take(&mut self.pending);
        row.resize(self.seq_len, PAD);
        Some(row)
    }
}

/// Loss mask for a packed row: padding is excluded.
pub fn row_mask(row: &[TokenId]) -> Vec<bool> {
    row.iter().map(|&t| t != PAD).collect()
}

/// Packs a finite list of tokenized documents; returns rows with their masks.
pub fn pack_tokens(docs: &[Vec<TokenId>], seq_len: usize) -> Result<Vec<(Vec<TokenId>, Vec<bool>)>> {
    let mut packer = Packer::new(seq_len);
    let mut rows = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        packer.push_document(i as u64, d)?;
        while let Some(r) = packer.pop_row() {
            rows.push(r);
        }
    }
    rows.extend(packer.flush());
    Ok(rows
        .into_iter()
        .map(|r| {
            let m = row_mask(&r);
            (r, m)
        })
        .collect())
}

/// Inverse of packing: splits the concatenated rows on separators.
pub fn unpack(rows: &[Vec<TokenId>]) -> Vec<Vec<TokenId>> {
    let mut docs: Vec<Vec<TokenId>> = Vec::new();
    for &t in rows.iter().flatten() {
        match t {
            PAD => {}
            EOD => docs.push(Vec::new()),
            _ => match docs.last_mut() {
                Some(d) => d.push(t),
                None => docs.push(vec![t]),
            },
        }
    }
    docs
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    doc_index: u64,
    epoch: u64,
    entity_ids: Vec<u32>,
    roles: Vec<String>,
    noise_flags: &'a [NoiseFlag],
    text: String,
}

/// Writes the first `count` documents of a stream as JSON lines for audit.
pub fn dump_corpus(stream: &mut CorpusStream<'_>, count: usize, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for _ in 0..count {
        let (at, doc) = stream.next_document()?;
        let rec = DumpRecord {
            doc_index: at.doc,
            epoch: at.epoch,
            entity_ids: doc.entity_ids(),
            roles: doc.paragraphs.iter().map(|p| p.role.label()).collect(),
            noise_flags: &doc.noise_flags,
            text: doc.text(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
