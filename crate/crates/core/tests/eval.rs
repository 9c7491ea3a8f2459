use std::collections::HashSet;

use kalab::biogen::{AttributeKind, Pools, World};
use kalab::config::RunConfig;
use kalab::corpus::SkewConfig;
use kalab::eval::{
    build_conflict_context, build_icku_context, exact_match, run_scenario, EvalConfig, EvalItem, EvalSet, Evaluator,
    Generator, Scenario,
};
use kalab::model::{InitOptions, Model};
use kalab::tokenizer::{SpanLabel, TokenId, Vocab};
use kalab::trainer::Setup;
use kalab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (RunConfig, Setup) {
    let cfg = RunConfig::parse(
        "seed = 11
num_train = 300
num_unknown = 300
name_pool_limit = 30
eval_k = 200
seq_len = 320
context_len = 320
d_model = 16
n_layers = 1
n_heads = 2
d_ffn = 32
",
    )
    .unwrap();
    let s = Setup::new(&cfg).unwrap();
    (cfg, s)
}

fn eval_set(cfg: &RunConfig, s: &Setup) -> EvalSet {
    let ec = EvalConfig {
        k: cfg.eval_k,
        resample: false,
        seed: 1,
        slice_frac: 0.1,
    };
    EvalSet::build(&s.world, &s.vocab, &ec, &s.skew, 0).unwrap()
}

/// Decoder scripted by a closure `(item prefix, prompt, budget) -> tokens`.
struct Scripted<F>(F);

impl<F> Generator for Scripted<F>
where
    F: Fn(&[TokenId], &[TokenId], usize) -> Vec<TokenId> + Sync,
{
    fn continue_greedy(&self, prefix: &[TokenId], prompts: &[&[TokenId]], budget: &[usize]) -> Result<Vec<Vec<TokenId>>> {
        Ok(prompts.iter().zip(budget).map(|(p, &n)| (self.0)(prefix, p, n)).collect())
    }
}

/// Maps `(prefix, prompt)` of every sample to a chosen answer.
fn table<'a>(items: &'a [EvalItem], answer: impl Fn(&EvalItem, usize) -> Vec<TokenId>) -> impl Fn(&[TokenId], &[TokenId], usize) -> Vec<TokenId> + Sync + 'a {
    let mut map = std::collections::HashMap::new();
    for it in items {
        for (j, s) in it.samples.iter().enumerate() {
            map.insert((it.prefix(), s.prompt.ids.clone()), answer(it, j));
        }
    }
    move |pre: &[TokenId], p: &[TokenId], n: usize| {
        let mut v = map.get(&(pre.to_vec(), p.to_vec())).cloned().unwrap_or_default();
        v.resize(n, 2);
        v
    }
}

fn span_tokens(it: &EvalItem, label: SpanLabel, entity: u32) -> Vec<TokenId> {
    let c = it.context.as_ref().unwrap();
    let sp = c.spans_with(label, entity).next().unwrap();
    c.ids[sp.tokens.clone()].to_vec()
}

#[test]
fn oracle_decoders_score_one() {
    let (cfg, s) = setup();
    let set = eval_set(&cfg, &s);
    let truth = |it: &EvalItem, j: usize| s.vocab.encode(&it.samples[j].target).unwrap().ids;

    let pku = run_scenario(&Scripted(table(&set.pku, truth)), &s.vocab, Scenario::Pku, &set.pku).unwrap();
    assert_eq!(pku.accuracy(), 1.0);
    assert_eq!(pku.k, 200);

    let copier = |it: &EvalItem, j: usize| span_tokens(it, SpanLabel::Value(it.samples[j].kind), it.entity_id);
    let icku = run_scenario(&Scripted(table(&set.icku, copier)), &s.vocab, Scenario::Icku, &set.icku).unwrap();
    assert_eq!(icku.accuracy(), 1.0);

    // The ICKU oracle ignoring the context scores zero on dates.
    let blind = run_scenario(&Scripted(|_: &[u32], _: &[u32], n| vec![2; n]), &s.vocab, Scenario::Icku, &set.icku).unwrap();
    assert_eq!(blind.kind_accuracy(AttributeKind::BirthDate), Some(0.0));
}

#[test]
fn random_context_copier_scores_one_third() {
    let (cfg, s) = setup();
    let set = eval_set(&cfg, &s);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut picks = Vec::new();
    for it in &set.icku {
        let c = it.context.as_ref().unwrap();
        let ents: Vec<u32> = {
            let mut e: Vec<u32> = c.spans.iter().map(|s| s.entity_id).collect();
            e.sort();
            e.dedup();
            e
        };
        assert_eq!(ents.len(), 3);
        picks.push((0..it.samples.len()).map(|_| ents[rng.random_range(0..3)]).collect::<Vec<_>>());
    }
    let idx: std::collections::HashMap<u32, usize> = set.icku.iter().enumerate().map(|(i, it)| (it.entity_id, i)).collect();
    let answer = |it: &EvalItem, j: usize| span_tokens(it, SpanLabel::Value(it.samples[j].kind), picks[idx[&it.entity_id]][j]);
    let r = run_scenario(&Scripted(table(&set.icku, answer)), &s.vocab, Scenario::Icku, &set.icku).unwrap();
    // 800 Bernoulli(1/3) draws: sd 0.0167; shared values across entities add a little.
    assert!((r.accuracy() - 1.0 / 3.0).abs() < 0.06, "{}", r.accuracy());
}

#[test]
fn conflict_preferences_follow_definitions() {
    let (cfg, s) = setup();
    let set = eval_set(&cfg, &s);
    let items = &set.conflict;
    assert!(items.iter().all(|it| it.samples.len() == 2));

    let ctx = |it: &EvalItem, j: usize| span_tokens(it, SpanLabel::Value(it.samples[j].kind), it.entity_id);
    let r = run_scenario(&Scripted(table(items, ctx)), &s.vocab, Scenario::Conflict, items).unwrap();
    assert_eq!((r.pref_pk(), r.pref_ick()), (0.0, 1.0));

    let recall = |it: &EvalItem, j: usize| s.vocab.encode(&it.samples[j].target).unwrap().ids;
    let r = run_scenario(&Scripted(table(items, recall)), &s.vocab, Scenario::Conflict, items).unwrap();
    assert_eq!((r.pref_pk(), r.pref_ick()), (1.0, 0.0));

    // A third value scores for neither. It must not start with either
    // candidate, since each is compared with its own-length prefix.
    let third = |it: &EvalItem, j: usize| {
        let smp = &it.samples[j];
        let (ctext, clen) = smp.conflict_target.clone().unwrap();
        let pool = s.world.pools.value_pool(smp.kind);
        pool.values()
            .iter()
            .map(|v| {
                let mut ids = s.vocab.encode(v).unwrap().ids;
                ids.resize(smp.budget, 2);
                ids
            })
            .find(|ids| {
                s.vocab.decode(&ids[..smp.target_len]).unwrap() != smp.target
                    && s.vocab.decode(&ids[..clen]).unwrap() != ctext
            })
            .unwrap()
    };
    let r = run_scenario(&Scripted(table(items, third)), &s.vocab, Scenario::Conflict, items).unwrap();
    assert_eq!((r.pref_pk(), r.pref_ick()), (0.0, 0.0));

    // Random mixtures never exceed one in total.
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let choice: Vec<u8> = (0..items.len() * 2).map(|_| rng.random_range(0..3)).collect();
        let pos: std::collections::HashMap<u32, usize> = items.iter().enumerate().map(|(i, it)| (it.entity_id, i)).collect();
        let mixed = |it: &EvalItem, j: usize| match choice[pos[&it.entity_id] * 2 + j] {
            0 => ctx(it, j),
            1 => recall(it, j),
            _ => third(it, j),
        };
        let r = run_scenario(&Scripted(table(items, mixed)), &s.vocab, Scenario::Conflict, items).unwrap();
        assert!(r.pref_pk() + r.pref_ick() <= 1.0 + 1e-12);
    }
}

#[test]
fn exact_match_is_case_sensitive_and_whole() {
    let (_, s) = setup();
    let v = &s.vocab;
    assert!(exact_match(&v.encode("Physics").unwrap().ids, "Physics", v));
    assert!(!exact_match(&v.encode("Physics").unwrap().ids, "physics", v));
    let date = s.world.pools.value(AttributeKind::BirthDate, 0).to_string();
    let ids = v.encode(&date).unwrap().ids;
    assert_eq!(ids.len(), 4, "{date}");
    assert!(exact_match(&ids, &date, v));
    for i in 0..4 {
        let mut bad = ids.clone();
        bad[i] = v.id("Physics").unwrap();
        assert!(!exact_match(&bad, &date, v));
    }
}

#[test]
fn icku_context_shape() {
    let (_, s) = setup();
    let w = &s.world;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for target in [300u32, 450, 599] {
        let ctx = build_icku_context(w, &s.vocab, target, &mut rng).unwrap();
        let text = s.vocab.decode(&ctx.ids).unwrap();
        for kind in AttributeKind::ALL {
            let value = w.pools.value(kind, w.profile(target).value(kind));
            assert!(text.contains(value), "{value} missing");
        }
        let names: HashSet<u32> = ctx.spans.iter().filter(|s| s.label == SpanLabel::Name).map(|s| s.entity_id).collect();
        assert_eq!(names.len(), 3);
        assert!(names.iter().all(|&e| !w.is_train(e)));
        let distinct: HashSet<String> = names.iter().map(|&e| w.profile(e).name.full()).collect();
        assert_eq!(distinct.len(), 3);
    }
    assert!(build_icku_context(w, &s.vocab, 3, &mut rng).is_err());

    let small = World::generate(Pools::bundled().unwrap(), 5, 2, 1).unwrap();
    let vocab = kalab::tokenizer::build_vocab(&small.pools);
    assert!(build_icku_context(&small, &vocab, 5, &mut rng).is_err());
}

#[test]
fn conflict_context_perturbs_exactly_two_kinds() {
    let (_, s) = setup();
    let w = &s.world;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for e in 0..100u32 {
        let (ctx, pert) = build_conflict_context(w, &s.vocab, e, &mut rng).unwrap();
        let span_text = |kind| {
            let sp = ctx.spans_with(SpanLabel::Value(kind), e).next().unwrap();
            s.vocab.decode(&ctx.ids[sp.tokens.clone()]).unwrap()
        };
        for kind in [AttributeKind::BirthCity, AttributeKind::University] {
            assert_eq!(span_text(kind), w.pools.value(kind, w.profile(e).value(kind)));
        }
        assert_eq!(pert.len(), 2);
        for p in pert {
            assert_ne!(p.original, p.replacement);
            assert_eq!(p.original, w.pools.value(p.kind, w.profile(e).value(p.kind)));
            assert_eq!(span_text(p.kind), p.replacement);
            let len = |t: &str| s.vocab.encode(t).unwrap().len();
            assert_eq!(len(&p.original), len(&p.replacement));
        }
    }
}

#[test]
fn frozen_samples_repeat_and_resampling_changes_them() {
    let (cfg, s) = setup();
    let mk = |resample| {
        Evaluator::new(
            &s.world,
            &s.vocab,
            EvalConfig {
                k: 50,
                resample,
                seed: 2,
                slice_frac: 0.1,
            },
            SkewConfig::uniform(cfg.num_train),
        )
        .unwrap()
    };
    let frozen = mk(false);
    let a = frozen.set_for(0).unwrap().into_owned();
    let b = frozen.set_for(500).unwrap().into_owned();
    assert_eq!(a.pku, b.pku);
    assert_eq!(a.icku, b.icku);
    assert_eq!(a.conflict, b.conflict);
    let re = mk(true);
    let c = re.set_for(0).unwrap().into_owned();
    let d = re.set_for(500).unwrap().into_owned();
    assert_ne!(c.pku, d.pku);
    assert_eq!(c.pku, re.set_for(0).unwrap().into_owned().pku);
}

#[test]
fn untrained_model_fails_dates_and_evaluation_is_read_only() {
    let (cfg, s) = setup();
    let model = Model::<f32>::init(cfg.model_config(s.vocab.len()), 1, InitOptions { zero_head: false }).unwrap();
    let before = model.params.clone();
    let ev = Evaluator::new(
        &s.world,
        &s.vocab,
        EvalConfig {
            k: 40,
            resample: false,
            seed: 0,
            slice_frac: 0.1,
        },
        SkewConfig::zipf(cfg.num_train, 1.0, 0),
    )
    .unwrap();
    let (rep, _) = ev.evaluate(&model, 0).unwrap();
    assert_eq!(rep.pku.kind_accuracy(AttributeKind::BirthDate), Some(0.0));
    assert!(rep.pku.accuracy() <= 0.05);
    assert_eq!(model.params, before);
    let recs = rep.records(0, 11);
    for sub in ["all", "top10", "bottom10"] {
        assert!(recs.iter().any(|r| r.scenario == "conflict" && r.metric == "pref_pk" && r.subset == sub), "{sub}");
    }
    assert!(ev.check_context(cfg.context_len).is_ok());
    assert!(ev.check_context(40).is_err());
    let _: &Vocab = &s.vocab;
}

#[test]
fn score_compares_each_candidate_with_its_own_prefix() {
    let (cfg, s) = setup();
    let set = eval_set(&cfg, &s);
    let mut smp = set.conflict[0].samples[0].clone();
    let w: Vec<String> = s.vocab.tokens()[20..23].iter().map(|t| t.to_string()).collect();
    let ids = s.vocab.encode(&w.join(" ")).unwrap().ids;
    let gen = |n: usize| ids[..n].to_vec();

    // Short target, long conflict value extending it.
    smp.target = w[0].clone();
    smp.target_len = 1;
    smp.conflict_target = Some((format!("{} {}", w[0], w[1]), 2));
    smp.budget = 2;
    assert_eq!(smp.score(&gen(2), &s.vocab), (false, true));
    let mut other = ids.clone();
    other[1] = ids[2];
    assert_eq!(smp.score(&other[..2], &s.vocab), (true, false));

    // Swapped roles: the longer match still wins.
    smp.target = format!("{} {}", w[0], w[1]);
    smp.target_len = 2;
    smp.conflict_target = Some((w[0].clone(), 1));
    assert_eq!(smp.score(&gen(2), &s.vocab), (true, false));
    // Too short a generation cannot match the longer candidate.
    assert_eq!(smp.score(&gen(1), &s.vocab), (false, true));
    // Trailing tokens past a candidate's length are ignored.
    smp.conflict_target = None;
    assert_eq!(smp.score(&gen(3), &s.vocab), (true, false));
}
