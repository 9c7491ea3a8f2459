//! Synthetic biographies: profiles, template assignment, paragraph and probe rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, KeyedPermutation};

/// Number of templates sampled per attribute for every entity.
pub const TEMPLATES_PER_ENTITY: usize = 7;
/// Training paragraphs per entity.
pub const TRAIN_PARAGRAPHS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    BirthDate,
    BirthCity,
    University,
    Major,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 4] = [
        AttributeKind::BirthDate,
        AttributeKind::BirthCity,
        AttributeKind::University,
        AttributeKind::Major,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeKind::BirthDate => "birth_date",
            AttributeKind::BirthCity => "birth_city",
            AttributeKind::University => "university",
            AttributeKind::Major => "major",
        }
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AttributeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attribute kind {s:?}")))
    }
}

pub type ValueId = u32;

pub const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];

fn is_leap(year: u32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

fn days_in_month(year: u32, month: u32) -> u32 {
    match month {
        2 if is_leap(year) => 29,
        2 => 28,
        4 | 6 | 9 | 11 => 30,
        _ => 31,
    }
}

/// "MonthName D, YYYY".
pub fn format_date(year: u32, month: u32, day: u32) -> String {
    format!("{} {}, {}", MONTHS[(month - 1) as usize], day, year)
}

/// Every calendar date from 1900-01-01 to 2099-12-31, in order.
pub fn all_dates() -> Vec<String> {
    let mut out = Vec::with_capacity(73_049);
    for year in 1900..=2099 {
        for month in 1..=12 {
            for day in 1..=days_in_month(year, month) {
                out.push(format_date(year, month, day));
            }
        }
    }
    out
}

/// Ordered list of distinct values for one attribute.
#[derive(Debug, Clone)]
pub struct ValuePool {
    kind: AttributeKind,
    values: Vec<String>,
    index: HashMap<String, ValueId>,
}

impl ValuePool {
    pub fn new(kind: AttributeKind, values: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(values.len());
        for (i, v) in values.iter().enumerate() {
            if v.trim().is_empty() {
                return Err(Error::InvalidArgument(format!("{kind} pool has an empty value")));
            }
            if index.insert(v.clone(), i as ValueId).is_some() {
                return Err(Error::InvalidArgument(format!("{kind} pool repeats value {v:?}")));
            }
        }
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!("{kind} pool is empty")));
        }
        Ok(Self { kind, values, index })
    }

    pub fn kind(&self) -> AttributeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ValueId) -> &str {
        &self.values[id as usize]
    }

    pub fn id_of(&self, value: &str) -> Option<ValueId> {
        self.index.get(value).copied()
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }
}

/// A sentence template with one `{person}` and one trailing `{value}` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    text: String,
}

const PERSON: &str = "{person}";
const VALUE: &str = "{value}";

impl Template {
    pub fn parse(kind: AttributeKind, line: usize, text: &str) -> Result<Self> {
        let bad = |reason: &str| Error::InvalidTemplate {
            kind: kind.to_string(),
            line,
            reason: reason.to_string(),
        };
        let text = text.trim();
        if text.matches(PERSON).count() != 1 {
            return Err(bad("expected exactly one {person} placeholder"));
        }
        if text.matches(VALUE).count() != 1 {
            return Err(bad("expected exactly one {value} placeholder"));
        }
        let p = text.find(PERSON).unwrap();
        let v = text.find(VALUE).unwrap();
        if p > v {
            return Err(bad("{person} must precede {value}"));
        }
        let tail = &text[v + VALUE.len()..];
        if !(tail.is_empty() || tail == ".") {
            return Err(bad("value slot is not final"));
        }
        Ok(Self {
            text: text.to_string(),
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Renders a sentence, returning it with the byte ranges of the person
    /// name and the value inside it.
    pub fn render(&self, person: &str, value: &str) -> (String, Range<usize>, Range<usize>) {
        let p = self.text.find(PERSON).unwrap();
        let v = self.text.find(VALUE).unwrap();
        let mut out = String::with_capacity(self.text.len() + person.len() + value.len());
        out.push_str(&self.text[..p]);
        let ps = out.len();
        out.push_str(person);
        let pe = out.len();
        out.push_str(&self.text[p + PERSON.len()..v]);
        let vs = out.len();
        out.push_str(value);
        let ve = out.len();
        out.push_str(&self.text[v + VALUE.len()..]);
        (out, ps..pe, vs..ve)
    }

    /// Cloze prefix: everything before the value slot, without trailing space.
    pub fn cloze(&self, person: &str) -> (String, Range<usize>) {
        let p = self.text.find(PERSON).unwrap();
        let v = self.text.find(VALUE).unwrap();
        let mut out = String::new();
        out.push_str(&self.text[..p]);
        let ps = out.len();
        out.push_str(person);
        let pe = out.len();
        out.push_str(&self.text[p + PERSON.len()..v]);
        let trimmed = out.trim_end().len();
        out.truncate(trimmed);
        (out, ps..pe)
    }
}

#[derive(Debug, Clone)]
pub struct TemplatePool {
    pub kind: AttributeKind,
    pub templates: Vec<Template>,
}

impl TemplatePool {
    pub fn parse(kind: AttributeKind, text: &str) -> Result<Self> {
        let templates = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| Template::parse(kind, i + 1, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kind, templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct NameLists {
    pub first: Vec<String>,
    pub middle: Vec<String>,
    pub last: Vec<String>,
}

impl NameLists {
    pub fn capacity(&self) -> u64 {
        self.first.len() as u64 * self.middle.len() as u64 * self.last.len() as u64
    }

    /// Keeps only the first `limit` entries of each list.
    pub fn truncated(&self, limit: usize) -> Self {
        let cut = |v: &Vec<String>| v.iter().take(limit).cloned().collect();
        Self {
            first: cut(&self.first),
            middle: cut(&self.middle),
            last: cut(&self.last),
        }
    }
}

/// Everything needed to render biographies: names, value pools, template pools.
#[derive(Debug, Clone)]
pub struct Pools {
    pub names: NameLists,
    values: Vec<ValuePool>,
    templates: Vec<TemplatePool>,
}

const BUNDLED_FIRST: &str = include_str!("../data/first_names.txt");
const BUNDLED_MIDDLE: &str = include_str!("../data/middle_names.txt");
const BUNDLED_LAST: &str = include_str!("../data/last_names.txt");
const BUNDLED_CITIES: &str = include_str!("../data/cities.txt");
const BUNDLED_UNIVERSITIES: &str = include_str!("../data/universities.txt");
const BUNDLED_MAJORS: &str = include_str!("../data/majors.txt");
const BUNDLED_TEMPLATES: [&str; 4] = [
    include_str!("../data/templates/birth_date.txt"),
    include_str!("../data/templates/birth_city.txt"),
    include_str!("../data/templates/university.txt"),
    include_str!("../data/templates/major.txt"),
];

fn lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Pools {
    pub fn from_parts(
        names: NameLists,
        cities: Vec<String>,
        universities: Vec<String>,
        majors: Vec<String>,
        templates: [TemplatePool; 4],
    ) -> Result<Self> {
        for (label, list) in [("first", &names.first), ("middle", &names.middle), ("last", &names.last)] {
            if list.is_empty() {
                return Err(Error::InvalidArgument(format!("{label} name list is empty")));
            }
            if let Some(bad) = list.iter().find(|n| n.split_whitespace().count() != 1) {
                return Err(Error::InvalidArgument(format!("name part {bad:?} must be a single word")));
            }
        }
        let values = vec![
            ValuePool::new(AttributeKind::BirthDate, all_dates())?,
            ValuePool::new(AttributeKind::BirthCity, cities)?,
            ValuePool::new(AttributeKind::University, universities)?,
            ValuePool::new(AttributeKind::Major, majors)?,
        ];
        for (i, t) in templates.iter().enumerate() {
            debug_assert_eq!(t.kind.index(), i);
        }
        Ok(Self {
            names,
            values,
            templates: templates.into(),
        })
    }

    /// The pools shipped with the crate.
    pub fn bundled() -> Result<Self> {
        let templates = [0, 1, 2, 3].map(|i| TemplatePool::parse(AttributeKind::ALL[i], BUNDLED_TEMPLATES[i]));
        let [a, b, c, d] = templates;
        Self::from_parts(
            NameLists {
                first: lines(BUNDLED_FIRST),
                middle: lines(BUNDLED_MIDDLE),
                last: lines(BUNDLED_LAST),
            },
            lines(BUNDLED_CITIES),
            lines(BUNDLED_UNIVERSITIES),
            lines(BUNDLED_MAJORS),
            [a?, b?, c?, d?],
        )
    }

    /// Loads pools from a directory with the same layout as the bundled data:
    /// `first_names.txt`, `middle_names.txt`, `last_names.txt`, `cities.txt`,
    /// `universities.txt`, `majors.txt` and `templates/<kind>.txt`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let list = |name: &str| read_file(&dir.join(name)).map(|t| lines(&t));
        let mut templates = Vec::with_capacity(4);
        for kind in AttributeKind::ALL {
            let path = dir.join("templates").join(format!("{kind}.txt"));
            templates.push(TemplatePool::parse(kind, &read_file(&path)?)?);
        }
        let [a, b, c, d]: [TemplatePool; 4] = templates.try_into().unwrap();
        Self::from_parts(
            NameLists {
                first: list("first_names.txt")?,
                middle: list("middle_names.txt")?,
                last: list("last_names.txt")?,
            },
            list("cities.txt")?,
            list("universities.txt")?,
            list("majors.txt")?,
            [a, b, c, d],
        )
    }

    /// Restricts each name list to its first `limit` entries (0 keeps all).
    pub fn with_name_limit(mut self, limit: usize) -> Self {
        if limit > 0 {
            self.names = self.names.truncated(limit);
        }
        self
    }

    pub fn value_pool(&self, kind: AttributeKind) -> &ValuePool {
        &self.values[kind.index()]
    }

    pub fn template_pool(&self, kind: AttributeKind) -> &TemplatePool {
        &self.templates[kind.index()]
    }

    pub fn template_pool_sizes(&self) -> [usize; 4] {
        AttributeKind::ALL.map(|k| self.template_pool(k).len())
    }

    pub fn value(&self, kind: AttributeKind, id: ValueId) -> &str {
        self.value_pool(kind).get(id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PersonName {
    pub first: String,
    pub middle: String,
    pub last: String,
}

impl PersonName {
    pub fn full(&self) -> String {
        format!("{} {} {}", self.first, self.middle, self.last)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Profile {
    pub entity_id: u32,
    pub name: PersonName,
    /// Value ids indexed by [`AttributeKind::index`].
    pub values: [ValueId; 4],
}

impl Profile {
    pub fn value(&self, kind: AttributeKind) -> ValueId {
        self.values[kind.index()]
    }
}

fn name_for(pools: &Pools, perm: &KeyedPermutation, entity_id: u32) -> PersonName {
    let n = &pools.names;
    let idx = perm.permute(entity_id as u64);
    let (f, m) = (n.first.len() as u64, n.middle.len() as u64);
    PersonName {
        first: n.first[(idx % f) as usize].clone(),
        middle: n.middle[((idx / f) % m) as usize].clone(),
        last: n.last[(idx / (f * m)) as usize].clone(),
    }
}

fn profile_for(pools: &Pools, perm: &KeyedPermutation, seed: u64, entity_id: u32) -> Profile {
    let mut rng = rng::stream(seed, entity_id as u64, "values");
    let values = AttributeKind::ALL.map(|k| rng.random_range(0..pools.value_pool(k).len()) as ValueId);
    Profile {
        entity_id,
        name: name_for(pools, perm, entity_id),
        values,
    }
}

/// Builds the training and unknown entity sets. Train entities get ids
/// `0..num_train`, unknown ones `num_train..num_train + num_unknown`. Names
/// are distinct across both sets.
pub fn generate_entity_sets(
    pools: &Pools,
    num_train: usize,
    num_unknown: usize,
    seed: u64,
) -> Result<(Vec<Profile>, Vec<Profile>)> {
    if num_train == 0 || num_unknown == 0 {
        return Err(Error::InvalidArgument("entity counts must be at least 1".into()));
    }
    let total = (num_train + num_unknown) as u64;
    let capacity = pools.names.capacity();
    if total > capacity || total > u32::MAX as u64 {
        return Err(Error::PoolExhausted {
            pool: "names".into(),
            requested: total,
            capacity,
        });
    }
    let perm = KeyedPermutation::new(capacity, rng::derive_seed(seed, 0, "names"));
    let train = (0..num_train as u32).map(|i| profile_for(pools, &perm, seed, i)).collect();
    let unknown = (num_train as u32..total as u32)
        .map(|i| profile_for(pools, &perm, seed, i))
        .collect();
    Ok((train, unknown))
}

/// Per-kind template ids: slots 0..5 are the training paragraphs, slot 5 the
/// evaluation-context paragraph and slot 6 the held-out probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateAssignment {
    ids: [[u16; TEMPLATES_PER_ENTITY]; 4],
}

impl TemplateAssignment {
    pub fn render_id(&self, kind: AttributeKind, role: ParagraphRole) -> usize {
        self.ids[kind.index()][role.slot()] as usize
    }

    pub fn probe_id(&self, kind: AttributeKind) -> usize {
        self.ids[kind.index()][TEMPLATES_PER_ENTITY - 1] as usize
    }

    pub fn ids(&self, kind: AttributeKind) -> &[u16; TEMPLATES_PER_ENTITY] {
        &self.ids[kind.index()]
    }
}

pub fn assign_templates(profile: &Profile, pool_sizes: [usize; 4], seed: u64) -> Result<TemplateAssignment> {
    let mut rng = rng::stream(seed, profile.entity_id as u64, "templates");
    let mut ids = [[0u16; TEMPLATES_PER_ENTITY]; 4];
    for kind in AttributeKind::ALL {
        let size = pool_sizes[kind.index()];
        if size < TEMPLATES_PER_ENTITY {
            return Err(Error::TemplatePoolTooSmall {
                kind: kind.to_string(),
                size,
                needed: TEMPLATES_PER_ENTITY,
            });
        }
        let chosen = rand::seq::index::sample(&mut rng, size, TEMPLATES_PER_ENTITY);
        for (slot, id) in chosen.into_iter().enumerate() {
            ids[kind.index()][slot] = id as u16;
        }
    }
    Ok(TemplateAssignment { ids })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParagraphRole {
    /// Training paragraph 0..5.
    Train(u8),
    EvalContext,
}

impl ParagraphRole {
    pub const TRAIN: [ParagraphRole; TRAIN_PARAGRAPHS] = [
        ParagraphRole::Train(0),
        ParagraphRole::Train(1),
        ParagraphRole::Train(2),
        ParagraphRole::Train(3),
        ParagraphRole::Train(4),
    ];

    pub fn slot(self) -> usize {
        match self {
            ParagraphRole::Train(i) => {
                assert!((i as usize) < TRAIN_PARAGRAPHS, "train paragraph index out of range");
                i as usize
            }
            ParagraphRole::EvalContext => TRAIN_PARAGRAPHS,
        }
    }

    pub fn label(self) -> String {
        match self {
            ParagraphRole::Train(i) => format!("train_{}", i + 1),
            ParagraphRole::EvalContext => "eval_context".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paragraph {
    pub entity_id: u32,
    pub role: ParagraphRole,
    pub text: String,
    pub attribute_order: [AttributeKind; 4],
    /// Rendered value ids, indexed by kind.
    pub values: [ValueId; 4],
    /// Byte ranges of each rendered value, indexed by kind.
    pub value_spans: [Range<usize>; 4],
    /// Byte ranges of every mention of the person's name.
    pub name_spans: Vec<Range<usize>>,
}

impl Paragraph {
    pub fn value_text(&self, kind: AttributeKind) -> &str {
        &self.text[self.value_spans[kind.index()].clone()]
    }
}

fn attribute_order(order_seed: u64) -> [AttributeKind; 4] {
    let mut order = AttributeKind::ALL;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
    order
}

/// Seed for the attribute order of one paragraph of one entity.
pub fn order_seed(seed: u64, entity_id: u32, role: ParagraphRole) -> u64 {
    rng::derive_seed(seed, ((entity_id as u64) << 8) | role.slot() as u64, "order")
}

/// Renders one sentence per attribute, joined by single spaces, in a seeded order.
pub fn render_paragraph(
    pools: &Pools,
    profile: &Profile,
    assignment: &TemplateAssignment,
    role: ParagraphRole,
    order_seed: u64,
) -> Paragraph {
    render_paragraph_with_values(pools, profile, assignment, role, attribute_order(order_seed), profile.values)
}

/// Same templates and order as [`render_paragraph`], but with arbitrary values.
pub fn render_paragraph_with_values(
    pools: &Pools,
    profile: &Profile,
    assignment: &TemplateAssignment,
    role: ParagraphRole,
    attribute_order: [AttributeKind; 4],
    values: [ValueId; 4],
) -> Paragraph {
    let person = profile.name.full();
    let mut text = String::new();
    let mut value_spans: [Range<usize>; 4] = Default::default();
    let mut name_spans = Vec::with_capacity(4);
    for kind in attribute_order {
        if !text.is_empty() {
            text.push(' ');
        }
        let base = text.len();
        let template = &pools.template_pool(kind).templates[assignment.render_id(kind, role)];
        let (sentence, ps, vs) = template.render(&person, pools.value(kind, values[kind.index()]));
        text.push_str(&sentence);
        name_spans.push(base + ps.start..base + ps.end);
        value_spans[kind.index()] = base + vs.start..base + vs.end;
    }
    Paragraph {
        entity_id: profile.entity_id,
        role,
        text,
        attribute_order,
        values,
        value_spans,
        name_spans,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Probe {
    pub entity_id: u32,
    pub kind: AttributeKind,
    pub prompt_text: String,
    pub target_value: String,
    /// Byte range of the name inside `prompt_text`.
    pub name_span: Range<usize>,
}

pub fn render_probe(pools: &Pools, profile: &Profile, assignment: &TemplateAssignment, kind: AttributeKind) -> Probe {
    let template = &pools.template_pool(kind).templates[assignment.probe_id(kind)];
    let (prompt_text, name_span) = template.cloze(&profile.name.full());
    Probe {
        entity_id: profile.entity_id,
        kind,
        prompt_text,
        target_value: pools.value(kind, profile.value(kind)).to_string(),
        name_span,
    }
}

/// Pools plus the generated entity sets; renders paragraphs and probes on demand.
#[derive(Debug, Clone)]
pub struct World {
    pub pools: Pools,
    pub seed: u64,
    pub train: Vec<Profile>,
    pub unknown: Vec<Profile>,
}

impl World {
    pub fn generate(pools: Pools, num_train: usize, num_unknown: usize, seed: u64) -> Result<Self> {
        let (train, unknown) = generate_entity_sets(&pools, num_train, num_unknown, seed)?;
        // Validate the template pools up front so rendering never fails later.
        assign_templates(&train[0], pools.template_pool_sizes(), seed)?;
        Ok(Self {
            pools,
            seed,
            train,
            unknown,
        })
    }

    pub fn profile(&self, entity_id: u32) -> &Profile {
        let id = entity_id as usize;
        if id < self.train.len() {
            &self.train[id]
        } else {
            &self.unknown[id - self.train.len()]
        }
    }

    pub fn is_train(&self, entity_id: u32) -> bool {
        (entity_id as usize) < self.train.len()
    }

    pub fn assignment(&self, entity_id: u32) -> TemplateAssignment {
        assign_templates(self.profile(entity_id), self.pools.template_pool_sizes(), self.seed)
            .expect("template pools validated at construction")
    }

    pub fn paragraph(&self, entity_id: u32, role: ParagraphRole) -> Paragraph {
        let profile = self.profile(entity_id);
        render_paragraph(
            &self.pools,
            profile,
            &self.assignment(entity_id),
            role,
            order_seed(self.seed, entity_id, role),
        )
    }

    pub fn paragraph_with_values(&self, entity_id: u32, role: ParagraphRole, values: [ValueId; 4]) -> Paragraph {
        let profile = self.profile(entity_id);
        render_paragraph_with_values(
            &self.pools,
            profile,
            &self.assignment(entity_id),
            role,
            attribute_order(order_seed(self.seed, entity_id, role)),
            values,
        )
    }

    pub fn probe(&self, entity_id: u32, kind: AttributeKind) -> Probe {
        render_probe(&self.pools, self.profile(entity_id), &self.assignment(entity_id), kind)
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    entity_id: u32,
    name: PersonName,
    values: BTreeMap<AttributeKind, String>,
}

/// Writes profiles as one JSON object per line.
pub fn write_profiles(path: &Path, pools: &Pools, profiles: &[Profile]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in profiles {
        let rec = ProfileRecord {
            entity_id: p.entity_id,
            name: p.name.clone(),
            values: AttributeKind::ALL
                .into_iter()
                .map(|k| (k, pools.value(k, p.value(k)).to_string()))
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_profiles(path: &Path, pools: &Pools) -> Result<Vec<Profile>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProfileRecord = serde_json::from_str(&line)?;
        let mut values = [0; 4];
        for kind in AttributeKind::ALL {
            let text = rec.values.get(&kind).ok_or_else(|| Error::InvalidPool {
                path: path.into(),
                reason: format!("entity {} lacks {kind}", rec.entity_id),
            })?;
            values[kind.index()] = pools.value_pool(kind).id_of(text).ok_or_else(|| Error::InvalidPool {
                path: path.into(),
                reason: format!("value {text:?} is not in the {kind} pool"),
            })?;
        }
        out.push(Profile {
            entity_id: rec.entity_id,
            name: rec.name,
            values,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn pools() -> Pools {
        Pools::bundled().unwrap()
    }

    #[test]
    fn bundled_pool_sizes() {
        let p = pools();
        assert_eq!(p.value_pool(AttributeKind::BirthDate).len(), 73_049);
        assert_eq!(p.value_pool(AttributeKind::BirthCity).len(), 200);
        assert_eq!(p.value_pool(AttributeKind::University).len(), 200);
        assert_eq!(p.value_pool(AttributeKind::Major).len(), 100);
        assert_eq!(p.template_pool_sizes(), [20; 4]);
        let n = &p.names;
        assert!(n.first.len() + n.middle.len() + n.last.len() >= 1000);
    }

    #[test]
    fn date_format_and_range() {
        let dates = all_dates();
        assert_eq!(dates.first().unwrap(), "January 1, 1900");
        assert_eq!(dates.last().unwrap(), "December 31, 2099");
        assert!(dates.contains(&"November 10, 2079".to_string()));
        assert!(dates.contains(&"February 29, 2000".to_string()));
        assert!(!dates.contains(&"February 29, 1900".to_string()));
    }

    #[test]
    fn minimal_entity_sets() {
        let p = pools();
        let (a, b) = generate_entity_sets(&p, 1, 1, 3).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 1);
        assert_ne!(a[0].entity_id, b[0].entity_id);
        assert_ne!(a[0].name, b[0].name);
    }

    #[test]
    fn entity_sets_are_deterministic_and_disjoint() {
        let p = pools();
        let x = generate_entity_sets(&p, 300, 200, 11).unwrap();
        let y = generate_entity_sets(&p, 300, 200, 11).unwrap();
        assert_eq!(x, y);
        let names: HashSet<_> = x.0.iter().chain(&x.1).map(|p| p.name.clone()).collect();
        assert_eq!(names.len(), 500);
    }

    #[test]
    fn name_pool_exhaustion_is_reported() {
        let p = pools().with_name_limit(2);
        let err = generate_entity_sets(&p, 5, 4, 0).unwrap_err();
        match err {
            Error::PoolExhausted { pool, capacity, requested } => {
                assert_eq!(pool, "names");
                assert_eq!(capacity, 8);
                assert_eq!(requested, 9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn template_assignment_partitions_seven_ids() {
        let p = pools();
        let (train, _) = generate_entity_sets(&p, 50, 1, 5).unwrap();
        for prof in &train {
            let a = assign_templates(prof, [20; 4], 5).unwrap();
            for kind in AttributeKind::ALL {
                let ids: HashSet<u16> = a.ids(kind).iter().copied().collect();
                assert_eq!(ids.len(), 7);
                let render: HashSet<usize> = ParagraphRole::TRAIN
                    .iter()
                    .chain([&ParagraphRole::EvalContext])
                    .map(|r| a.render_id(kind, *r))
                    .collect();
                assert_eq!(render.len(), 6);
                assert!(!render.contains(&a.probe_id(kind)));
            }
            assert_eq!(a, assign_templates(prof, [20; 4], 5).unwrap());
        }
    }

    #[test]
    fn exhaustive_pool_of_seven() {
        let p = pools();
        let (train, _) = generate_entity_sets(&p, 1, 1, 5).unwrap();
        let a = assign_templates(&train[0], [7; 4], 1).unwrap();
        for kind in AttributeKind::ALL {
            let mut ids = a.ids(kind).to_vec();
            ids.sort();
            assert_eq!(ids, (0..7).collect::<Vec<u16>>());
        }
        let err = assign_templates(&train[0], [7, 7, 6, 7], 1).unwrap_err();
        assert!(matches!(err, Error::TemplatePoolTooSmall { size: 6, .. }));
    }

    #[test]
    fn paragraphs_contain_every_value_once_with_exact_spans() {
        let world = World::generate(pools(), 40, 10, 9).unwrap();
        for e in 0..50u32 {
            for role in ParagraphRole::TRAIN.into_iter().chain([ParagraphRole::EvalContext]) {
                let par = world.paragraph(e, role);
                let prof = world.profile(e);
                for kind in AttributeKind::ALL {
                    assert_eq!(par.value_text(kind), world.pools.value(kind, prof.value(kind)));
                }
                let mut order = par.attribute_order.to_vec();
                order.sort();
                assert_eq!(order, AttributeKind::ALL.to_vec());
                assert_eq!(par.text.matches(". ").count(), 3);
                for span in &par.name_spans {
                    assert_eq!(&par.text[span.clone()], prof.name.full());
                }
                assert_eq!(par, world.paragraph(e, role));
            }
        }
    }

    #[test]
    fn train_roles_use_different_templates() {
        let world = World::generate(pools(), 20, 1, 2).unwrap();
        for e in 0..20u32 {
            let a = world.paragraph(e, ParagraphRole::Train(0));
            let b = world.paragraph(e, ParagraphRole::Train(1));
            assert_ne!(a.text, b.text);
        }
    }

    #[test]
    fn probes_are_held_out_and_value_terminal() {
        let world = World::generate(pools(), 60, 5, 4).unwrap();
        for e in 0..65u32 {
            let mut prompts = HashSet::new();
            let paragraphs: Vec<_> = ParagraphRole::TRAIN
                .into_iter()
                .chain([ParagraphRole::EvalContext])
                .map(|r| world.paragraph(e, r).text)
                .collect();
            for kind in AttributeKind::ALL {
                let probe = world.probe(e, kind);
                assert!(!probe.prompt_text.contains(&probe.target_value));
                assert!(!probe.prompt_text.ends_with(' '));
                let words = format!("{} ", probe.prompt_text);
                for text in &paragraphs {
                    assert!(!text.contains(&words), "probe prompt leaked into a paragraph");
                }
                prompts.insert(probe.prompt_text);
            }
            assert_eq!(prompts.len(), 4);
        }
        let probe = world.probe(0, AttributeKind::BirthDate);
        let month = probe.target_value.split(' ').next().unwrap();
        assert!(MONTHS.contains(&month));
    }

    #[test]
    fn templates_must_be_value_terminal() {
        let err = Template::parse(AttributeKind::Major, 3, "{person} studied {value} for years.").unwrap_err();
        assert!(matches!(err, Error::InvalidTemplate { line: 3, .. }));
        assert!(Template::parse(AttributeKind::Major, 1, "{value} was studied by {person}.").is_err());
        assert!(Template::parse(AttributeKind::Major, 1, "{person} studied {value}.").is_ok());
    }

    // With 200 cells, an individual 3-sigma excursion happens in about 42% of
    // perfectly uniform samples, so the per-cell check bounds the number of
    // excursions (P[>3] = 0.0023 under uniformity) next to a chi-square test.
    #[test]
    fn birth_city_marginals_are_uniform() {
        let p = pools();
        for seed in [77u64, 78, 79] {
            let (train, _) = generate_entity_sets(&p, 20_000, 1, seed).unwrap();
            let mut counts = [0u32; 200];
            for prof in &train {
                counts[prof.value(AttributeKind::BirthCity) as usize] += 1;
            }
            let n = train.len() as f64;
            let mean = n / 200.0;
            let sigma = (n * (1.0 / 200.0) * (1.0 - 1.0 / 200.0)).sqrt();
            let outside = counts.iter().filter(|&&c| (c as f64 - mean).abs() > 3.0 * sigma).count();
            assert!(outside <= 3, "seed {seed}: {outside} cells outside 3 sigma");
            let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
            // 0.999 quantile of chi-square with 199 degrees of freedom.
            assert!(chi2 < 266.39, "seed {seed}: chi2 {chi2}");
        }
    }

    #[test]
    fn profile_records_round_trip() {
        let p = pools();
        let (train, _) = generate_entity_sets(&p, 25, 1, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profiles.jsonl");
        write_profiles(&path, &p, &train).unwrap();
        assert_eq!(read_profiles(&path, &p).unwrap(), train);
    }

    #[test]
    fn missing_template_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["first_names.txt", "middle_names.txt", "last_names.txt"] {
            std::fs::write(dir.path().join(f), "Ann\nBo\n").unwrap();
        }
        std::fs::write(dir.path().join("cities.txt"), "Paris\n").unwrap();
        std::fs::write(dir.path().join("universities.txt"), "Yale University\n").unwrap();
        std::fs::write(dir.path().join("majors.txt"), "Physics\n").unwrap();
        let err = Pools::load_dir(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("birth_date.txt"), "{msg}");
    }
}
