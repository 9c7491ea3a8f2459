//! AdamW with a cosine schedule over packed batches, periodic evaluation,
//! checkpointing and resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::biogen::{write_profiles, Pools, World};
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{row_mask, CorpusStream, DocCursor, Packer, SkewConfig, SkewMode};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Evaluator};
use crate::metrics::{truncate_after, MetricRecord, MetricsWriter};
use crate::model::{InitOptions, Layout, Model, Real};
use crate::probes;
use crate::rng;
use crate::tokenizer::{build_vocab, TokenId, Vocab};

/// `base · ½(1 + cos(π · step / total))`.
pub fn cosine_lr(step: u64, total: u64, base: f64) -> f64 {
    let x = step.min(total) as f64 / total.max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Linear warmup over `warmup` steps, then cosine decay over the rest.
pub fn scheduled_lr(step: u64, total: u64, base: f64, warmup: u64) -> f64 {
    if warmup == 0 {
        return cosine_lr(step, total, base);
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    cosine_lr(step - warmup, total.saturating_sub(warmup), base)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments mirroring the parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates applied.
    pub t: u64,
}

impl<T: Real> OptState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update on a slice, with decoupled decay
/// `θ ← θ − lr·wd·θ` applied first. `t` is the 1-based update index.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], t: u64, lr: f64, wd: f64, cfg: &AdamConfig) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let step = T::lit(lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(cfg.eps);
    let decay = T::lit(1.0 - lr * wd);
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1t * m[i] + ob1 * g;
        v[i] = b2t * v[i] + ob2 * g * g;
        let denom = (v[i] * inv_bc2).sqrt() + eps;
        params[i] = params[i] * decay - step * m[i] / denom;
    }
}

/// Applies AdamW to every tensor; only tensors flagged for decay receive
/// weight decay. Fails, leaving everything untouched, if a gradient is not
/// finite.
pub fn adamw_step<T: Real>(
    layout: &Layout,
    params: &mut [T],
    grads: &[T],
    state: &mut OptState<T>,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != layout.total {
        return Err(Error::InvalidArgument("parameter, gradient and state sizes differ".into()));
    }
    for spec in &layout.specs {
        if grads[spec.range.clone()].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(spec.name.clone()));
        }
    }
    state.t += 1;
    for spec in &layout.specs {
        let r = spec.range.clone();
        let wd = if spec.decay { weight_decay } else { 0.0 };
        adamw_update(
            &mut params[r.clone()],
            &grads[r.clone()],
            &mut state.m[r.clone()],
            &mut state.v[r],
            state.t,
            lr,
            wd,
            cfg,
        );
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / (norm + 1e-6));
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Data-pipeline position, stored with each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub cursor: DocCursor,
    pub packer: Packer,
}

/// Draws packed rows in stream order.
pub struct Batcher<'a> {
    stream: CorpusStream<'a>,
    packer: Packer,
    vocab: &'a Vocab,
    docs_seen: u64,
}

impl<'a> Batcher<'a> {
    pub fn new(stream: CorpusStream<'a>, vocab: &'a Vocab, seq_len: usize) -> Self {
        Self {
            stream,
            packer: Packer::new(seq_len),
            vocab,
            docs_seen: 0,
        }
    }

    pub fn restore(&mut self, cursor: DocCursor, packer: Packer) -> Result<()> {
        self.stream.seek(cursor)?;
        self.packer = packer;
        Ok(())
    }

    pub fn state(&self, step: u64) -> TrainState {
        TrainState {
            step,
            cursor: self.stream.cursor(),
            packer: self.packer.clone(),
        }
    }

    pub fn next_row(&mut self) -> Result<Vec<TokenId>> {
        loop {
            if let Some(r) = self.packer.pop_row() {
                return Ok(r);
            }
            let (at, doc) = self.stream.next_document()?;
            let toks = doc.tokens(self.vocab)?;
            self.packer.push_document(at.doc, &toks.ids)?;
            self.docs_seen += 1;
        }
    }

    /// `batch` rows flattened, row-major.
    pub fn next_batch(&mut self, batch: usize) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(batch * self.packer.seq_len);
        for _ in 0..batch {
            out.extend(self.next_row()?);
        }
        Ok(out)
    }
}

/// Splits packed rows into inputs `row[..L-1]`, targets `row[1..]` and the
/// loss mask (targets that are not padding).
pub fn shift_rows(rows: &[TokenId], seq_len: usize) -> (Vec<TokenId>, Vec<TokenId>, Vec<bool>) {
    let n = rows.len() / seq_len;
    let t = seq_len - 1;
    let mut inp = Vec::with_capacity(n * t);
    let mut tgt = Vec::with_capacity(n * t);
    for r in rows.chunks_exact(seq_len) {
        inp.extend_from_slice(&r[..t]);
        tgt.extend_from_slice(&r[1..]);
    }
    let mask = row_mask(&tgt);
    (inp, tgt, mask)
}

/// Everything derived deterministically from a config.
pub struct Setup {
    pub world: World,
    pub vocab: Vocab,
    pub skew: SkewConfig,
}

impl Setup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let pools = match &cfg.data_dir {
            Some(d) => Pools::load_dir(d)?,
            None => Pools::bundled()?,
        };
        let pools = if cfg.name_pool_limit > 0 {
            pools.with_name_limit(cfg.name_pool_limit)
        } else {
            pools
        };
        let vocab = build_vocab(&pools);
        let world = World::generate(pools, cfg.num_train, cfg.num_unknown, cfg.seed)?;
        let skew = match cfg.skew_mode {
            SkewMode::Uniform => SkewConfig::uniform(cfg.num_train),
            SkewMode::Zipf => SkewConfig::zipf(cfg.num_train, cfg.zipf_alpha, cfg.seed),
        };
        Ok(Self { world, vocab, skew })
    }

    pub fn stream(&self, cfg: &RunConfig) -> Result<CorpusStream<'_>> {
        CorpusStream::new(
            &self.world,
            cfg.variant_config(),
            cfg.noise_config(),
            self.skew.clone(),
            rng::derive_seed(cfg.seed, 0, "corpus"),
        )
    }

    pub fn evaluator(&self, cfg: &RunConfig) -> Result<Evaluator<'_>> {
        Evaluator::new(
            &self.world,
            &self.vocab,
            EvalConfig {
                k: cfg.eval_k,
                resample: cfg.eval_resample,
                seed: rng::derive_seed(cfg.seed, 0, "eval"),
                slice_frac: cfg.slice_frac,
            },
            self.skew.clone(),
        )
    }

    /// Writes config snapshot, vocabulary, profiles and manifest.
    pub fn write_artifacts(&self, cfg: &RunConfig, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(CONFIG_FILE);
        std::fs::write(&p, cfg.render()).map_err(|e| Error::io(&p, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        write_profiles(&dir.join("profiles_train.jsonl"), &self.world.pools, &self.world.train)?;
        write_profiles(&dir.join("profiles_unknown.jsonl"), &self.world.pools, &self.world.unknown)?;
        let manifest = serde_json::json!({
            "run_name": cfg.run_name,
            "seed": cfg.seed,
            "num_train": self.world.train.len(),
            "num_unknown": self.world.unknown.len(),
            "vocab_size": self.vocab.len(),
            "param_count": cfg.model_config(self.vocab.len()).param_count(),
            "variant": cfg.variant.as_str(),
            "skew": cfg.skew_mode.as_str(),
        });
        let p = dir.join(MANIFEST_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))
    }
}

pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const ATTENTION_CSV: &str = "attention.csv";

/// Files and directories a run may create; `--force` removes only these.
pub const RUN_ARTIFACTS: &[&str] = &[
    CONFIG_FILE,
    VOCAB_FILE,
    MANIFEST_FILE,
    METRICS_FILE,
    FINAL_CKPT,
    ATTENTION_CSV,
    "profiles_train.jsonl",
    "profiles_unknown.jsonl",
    "corpus_sample.jsonl",
    "eval_audit.jsonl",
    "probe.json",
    "report.md",
    "curves",
    "checkpoints",
];

/// Checks the output directory; with `force`, clears previous run artifacts.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::OutputNotEmpty(dir.to_path_buf()));
            }
            for name in RUN_ARTIFACTS {
                let p = dir.join(name);
                if p.is_dir() {
                    std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
                } else if p.exists() {
                    std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step-{step}.ckpt"))
}

/// Newest `checkpoints/step-N.ckpt`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let cdir = dir.join("checkpoints");
    if !cdir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in std::fs::read_dir(&cdir).map_err(|e| Error::io(&cdir, e))? {
        let entry = entry.map_err(|e| Error::io(&cdir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(n) = name.strip_prefix("step-").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(n) = n.parse::<u64>() {
                if best.as_ref().is_none_or(|(b, _)| n > *b) {
                    best = Some((n, entry.path()));
                }
            }
        }
    }
    Ok(best)
}

fn save_training_checkpoint(path: &Path, model: &Model<f32>, opt: &OptState<f32>, state: &TrainState) -> Result<()> {
    let mut ck = checkpoint::model_checkpoint(model);
    checkpoint::push_params(&mut ck, model, "adam.m.", &opt.m);
    checkpoint::push_params(&mut ck, model, "adam.v.", &opt.v);
    ck.meta.insert("adam.t".into(), opt.t.to_string());
    ck.meta.insert("train_state".into(), serde_json::to_string(state)?);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    ck.save(path)
}

fn load_training_checkpoint(path: &Path) -> Result<(Model<f32>, OptState<f32>, TrainState)> {
    let ck = Checkpoint::load(path)?;
    let model = checkpoint::model_from_checkpoint(&ck, path)?;
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let m = checkpoint::read_params(&ck, &model, "adam.m.", path)?;
    let v = checkpoint::read_params(&ck, &model, "adam.v.", path)?;
    let t = ck
        .meta
        .get("adam.t")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing optimizer step".into()))?;
    let state: TrainState = serde_json::from_str(
        ck.meta
            .get("train_state")
            .ok_or_else(|| bad("missing train_state".into()))?,
    )
    .map_err(|e| bad(format!("train_state: {e}")))?;
    if !model.all_finite() {
        return Err(bad("non-finite parameters".into()));
    }
    Ok((model, OptState { m, v, t }, state))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: bool,
    pub force: bool,
    /// Stop right after the checkpoint at this step (simulates an interrupted run).
    pub stop_after: Option<u64>,
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub steps: u64,
    pub final_loss: f64,
    pub eval_snapshots: usize,
    pub completed: bool,
}

fn dir_config_matches(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let p = dir.join(CONFIG_FILE);
    let stored = RunConfig::load(&p)?;
    if &stored != cfg {
        let diff: Vec<String> = stored
            .to_pairs()
            .into_iter()
            .zip(cfg.to_pairs())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: {} (stored) vs {} (given)", a.0, a.1, b.1))
            .collect();
        return Err(Error::Config(format!(
            "config differs from the run directory snapshot: {}",
            diff.join("; ")
        )));
    }
    Ok(())
}

/// Evaluation (and probes, when scheduled) at `step`.
fn evaluate_at(
    cfg: &RunConfig,
    setup: &Setup,
    evaluator: &Evaluator<'_>,
    model: &Model<f32>,
    step: u64,
    final_step: bool,
    out_dir: &Path,
) -> Result<Vec<MetricRecord>> {
    let (report, set) = evaluator.evaluate(model, step)?;
    let mut recs = report.records(step, cfg.seed);
    let probe_now = final_step || (cfg.probe_every > 0 && step % cfg.probe_every == 0);
    if probe_now {
        recs.extend(run_probes(cfg, setup, model, &set, step, final_step, out_dir)?);
    }
    if final_step {
        let lines = report.audit_lines(&set, &setup.vocab)?;
        let p = out_dir.join("eval_audit.jsonl");
        std::fs::write(&p, lines.join("\n") + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(recs)
}

/// Confidence, attention mass and (for skewed corpora at the final step)
/// rank-binned metrics.
pub fn run_probes(
    cfg: &RunConfig,
    setup: &Setup,
    model: &Model<f32>,
    set: &crate::eval::EvalSet,
    step: u64,
    rank_bins: bool,
    out_dir: &Path,
) -> Result<Vec<MetricRecord>> {
    let world = &setup.world;
    let k = cfg.probe_k.min(world.train.len()).min(world.unknown.len());
    let base = world.train.len() as u32;
    let mut r = rng::stream(cfg.seed, 0, "probe-entities");
    let train_ids: Vec<u32> = rand::seq::index::sample(&mut r, world.train.len(), k).into_iter().map(|i| i as u32).collect();
    let unknown_ids: Vec<u32> = rand::seq::index::sample(&mut r, world.unknown.len(), k)
        .into_iter()
        .map(|i| base + i as u32)
        .collect();
    let mut conf = probes::confidence(model, world, &setup.vocab, &train_ids, "train")?;
    conf.extend(probes::confidence(model, world, &setup.vocab, &unknown_ids, "unknown")?);
    let mut recs = probes::confidence_records(&conf, step, cfg.seed);

    let items = &set.icku[..k.min(set.icku.len())];
    let attn = probes::icku_attention(model, items, step)?;
    recs.extend(probes::attention_records(&attn, cfg.seed));
    let csv = out_dir.join(ATTENTION_CSV);
    let mut text = if csv.exists() {
        std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?
    } else {
        "step,layer,span_kind,mass\n".to_string()
    };
    for row in probes::attention_csv_rows(&attn) {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;

    if rank_bins && setup.skew.mode == SkewMode::Zipf {
        recs.extend(rank_bin_records(cfg, setup, model, step)?);
    }
    Ok(recs)
}

/// Conflict preference and probe entropy over a uniform sample of training
/// entities, binned by frequency rank.
pub fn rank_bin_records(cfg: &RunConfig, setup: &Setup, model: &Model<f32>, step: u64) -> Result<Vec<MetricRecord>> {
    let world = &setup.world;
    let n = cfg.rank_bin_entities.min(world.train.len());
    let mut r = rng::stream(cfg.seed, 0, "rank-bin-entities");
    let mut ids: Vec<u32> = rand::seq::index::sample(&mut r, world.train.len(), n).into_iter().map(|i| i as u32).collect();
    ids.sort_unstable();
    let items = ids
        .iter()
        .map(|&e| crate::eval::conflict_item(world, &setup.vocab, e, &mut r))
        .collect::<Result<Vec<_>>>()?;
    let res = crate::eval::run_scenario(model, &setup.vocab, crate::eval::Scenario::Conflict, &items)?;
    let conf = probes::confidence(model, world, &setup.vocab, &ids, "train")?;
    let ranked: Vec<probes::RankedEntity> = ids
        .iter()
        .zip(res.per_entity.iter().zip(&conf))
        .map(|(&e, (pe, c))| probes::RankedEntity {
            rank: setup.skew.ranks[e as usize],
            pref_pk: Some(pe.score),
            entropy: Some(c.entropy),
        })
        .collect();
    let report = probes::rank_binned_report(&ranked, setup.skew.n(), cfg.rank_bins)?;
    Ok(report.records(step, cfg.seed))
}

/// Trains (or resumes) a run into `out_dir`.
pub fn train(cfg: &RunConfig, out_dir: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let setup = Setup::new(cfg)?;
    let model_cfg = cfg.model_config(setup.vocab.len());
    let metrics_path = out_dir.join(METRICS_FILE);

    let resume_from = if opts.resume { latest_checkpoint(out_dir)? } else { None };
    if opts.resume && resume_from.is_none() && out_dir.join(CONFIG_FILE).exists() {
        // Nothing to resume yet: start over but keep the directory check.
        dir_config_matches(out_dir, cfg)?;
    }
    if let Some((_, _)) = &resume_from {
        dir_config_matches(out_dir, cfg)?;
        let stored = Vocab::load(&out_dir.join(VOCAB_FILE))?;
        if stored != setup.vocab {
            return Err(Error::Config("vocabulary in the run directory differs from the regenerated one".into()));
        }
    } else {
        prepare_out_dir(out_dir, opts.force || opts.resume)?;
        setup.write_artifacts(cfg, out_dir)?;
        if metrics_path.exists() {
            std::fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        }
    }

    let evaluator = setup.evaluator(cfg)?;
    evaluator.check_context(model_cfg.context_len)?;
    let mut batcher = Batcher::new(setup.stream(cfg)?, &setup.vocab, cfg.seq_len);
    let adam = AdamConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    };

    let (mut model, mut opt, start) = match &resume_from {
        Some((step, path)) => {
            let (model, opt, state) = load_training_checkpoint(path)?;
            if model.config != model_cfg {
                return Err(Error::Checkpoint {
                    path: path.clone(),
                    reason: "model shape differs from the config".into(),
                });
            }
            if state.step != *step {
                return Err(Error::Checkpoint {
                    path: path.clone(),
                    reason: format!("file name says step {step}, state says {}", state.step),
                });
            }
            batcher.restore(state.cursor, state.packer)?;
            truncate_after(&metrics_path, *step)?;
            let csv = out_dir.join(ATTENTION_CSV);
            if csv.exists() {
                let text = std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
                let kept: Vec<&str> = text
                    .lines()
                    .enumerate()
                    .filter(|(i, l)| *i == 0 || l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= *step))
                    .map(|(_, l)| l)
                    .collect();
                std::fs::write(&csv, kept.join("\n") + "\n").map_err(|e| Error::io(&csv, e))?;
            }
            (model, opt, *step)
        }
        None => {
            let model = Model::<f32>::init(model_cfg, cfg.seed, InitOptions { zero_head: cfg.zero_head })?;
            let n = model.params.len();
            (model, OptState::new(n), 0)
        }
    };

    let mut writer = MetricsWriter::append(&metrics_path)?;
    let eval_steps = cfg.eval_steps();
    let mut snapshots = if resume_from.is_some() {
        eval_steps.iter().filter(|&&s| s <= start).count()
    } else {
        0
    };
    let mut grads = vec![0.0f32; model.params.len()];
    let mut last_loss = f64::NAN;
    let t0 = Instant::now();
    let mut step = start;
    loop {
        let is_eval = step % cfg.eval_every == 0 || step == cfg.max_steps;
        // On resume the eval at `start` is already recorded.
        if is_eval && !(resume_from.is_some() && step == start) {
            let recs = evaluate_at(cfg, &setup, &evaluator, &model, step, step == cfg.max_steps, out_dir)?;
            writer.write(&recs)?;
            snapshots += 1;
            if opts.verbose {
                let get = |sc: &str, m: &str| {
                    recs.iter()
                        .find(|r| r.scenario == sc && r.metric == m && r.subset == "all")
                        .map_or(f64::NAN, |r| r.value)
                };
                let loss = if last_loss.is_nan() { "-".to_string() } else { format!("{last_loss:.4}") };
                eprintln!(
                    "step {step:>6}  loss {loss:>6}  pku {:.3}  icku {:.3}  pref_pk {:.3}  pref_ick {:.3}  [{:.0}s]",
                    get("pku", "acc"),
                    get("icku", "acc"),
                    get("conflict", "pref_pk"),
                    get("conflict", "pref_ick"),
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        if step > start && step % cfg.checkpoint_every == 0 && step < cfg.max_steps {
            save_training_checkpoint(&checkpoint_path(out_dir, step), &model, &opt, &batcher.state(step))?;
            if opts.stop_after == Some(step) {
                return Ok(TrainSummary {
                    out_dir: out_dir.to_path_buf(),
                    steps: step,
                    final_loss: last_loss,
                    eval_snapshots: snapshots,
                    completed: false,
                });
            }
        }
        if step == cfg.max_steps {
            break;
        }

        let rows = batcher.next_batch(cfg.batch_size)?;
        let (inp, tgt, mask) = shift_rows(&rows, cfg.seq_len);
        let seq = cfg.seq_len - 1;
        let trace = model.forward(&inp, cfg.batch_size, seq)?;
        let (stats, dlogits) = model.lm_loss(&trace, &tgt, &mask)?;
        grads.fill(0.0);
        model.backward(&trace, &dlogits, &mut grads);
        drop(trace);
        let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = scheduled_lr(step, cfg.max_steps, cfg.base_lr, cfg.warmup_steps);
        let layout = model.layout.clone();
        adamw_step(&layout, &mut model.params, &grads, &mut opt, lr, cfg.weight_decay, &adam)?;
        step += 1;
        last_loss = stats.loss;
        writer.write(&[
            MetricRecord::new(step, "train", "loss", stats.loss, "all", cfg.seed),
            MetricRecord::new(step, "train", "lr", lr, "all", cfg.seed),
            MetricRecord::new(step, "train", "grad_norm", norm, "all", cfg.seed),
        ])?;
    }

    checkpoint::save_model(&model, &out_dir.join(FINAL_CKPT))?;
    Ok(TrainSummary {
        out_dir: out_dir.to_path_buf(),
        steps: step,
        final_loss: last_loss,
        eval_snapshots: snapshots,
        completed: true,
    })
}

/// Loads the model and regenerated setup of a finished or partial run.
pub fn open_run(dir: &Path, checkpoint: Option<&Path>) -> Result<(RunConfig, Setup, Model<f32>)> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let setup = Setup::new(&cfg)?;
    let stored = Vocab::load(&dir.join(VOCAB_FILE))?;
    if stored != setup.vocab {
        return Err(Error::Config("vocabulary in the run directory differs from the regenerated one".into()));
    }
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => {
            let f = dir.join(FINAL_CKPT);
            if f.exists() {
                f
            } else {
                latest_checkpoint(dir)?
                    .map(|(_, p)| p)
                    .ok_or_else(|| Error::InvalidArgument(format!("no checkpoint in {}", dir.display())))?
            }
        }
    };
    let model = checkpoint::load_model(&path)?;
    if model.config.vocab_size != setup.vocab.len() {
        return Err(Error::Checkpoint {
            path,
            reason: "vocabulary size differs from the run".into(),
        });
    }
    Ok((cfg, setup, model))
}
