//! Acceptance suite: one PASS/FAIL/SKIP line per criterion. Criteria that
//! need the released dataset read it from `MEALREC_DATA_DIR` and are skipped
//! when it is unset.

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{batch, brute_force_core, history_of, random_instance, spread_params};
use mealrec::autograd::{attention, grad_check, Matrix};
use mealrec::builder::{
    build_dataset, check_meal, construct_meals_with_origin, construct_user_meal, read_meals, read_user_meal,
    unliked_pairs, BuilderConfig, Meal, MealId, UserMealMatrix,
};
use mealrec::ccmr::{predict_variant, recipe_repr, Catalog, HyperParams, ModelParams, ParamId, UserHistoryInput, Variant};
use mealrec::corpus::{
    corpus_stats, k_core_filter, parse_recipes, parse_reviews, parse_timestamp, threshold_positive, Category,
    InteractionCorpus, Positives, Recipe, UserId,
};
use mealrec::evaluator::{
    build_cases, evaluate, hit_at, leave_one_out_split, ndcg_at, outcome_from_scores, Metrics, ModelScorer,
    DEFAULT_KS, DEFAULT_NEGATIVES,
};
use mealrec::rng;
use mealrec::synthgen::{generate, SynthSpec};
use mealrec::trainer::{batch_loss_and_grad, fit};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
    Info(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let inst = random_instance(5, 5, 12, 5, 0.4);
    let b = batch(&inst, 6);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let p = spread_params(&inst.catalog, 4, 9);
        let (_, g) = batch_loss_and_grad(&p, &b, v, 1e-3).unwrap();
        let f = |x: &[f64]| {
            let mut q = p.clone();
            q.assign_flat(x).unwrap();
            batch_loss_and_grad(&q, &b, v, 1e-3).unwrap().0
        };
        let err = grad_check(f, &p.flatten(), &g.flatten(), 1e-3).unwrap();
        worst = worst.max(err);
        parts.push(format!("{v} {err:.2e}"));
    }
    let t = start.elapsed();
    verdict(
        worst < 1e-4 && within(t, 120),
        format!("max relative error {} (< 1e-4), {} triples, {t:.1?}", parts.join(", "), b.len()),
    )
}

fn random_edges(r: &mut rng::Rng) -> BTreeSet<(u64, u64)> {
    let users = r.gen_range(5..=50u64);
    let items = r.gen_range(5..=40u64);
    let p = r.gen_range(0.05..0.5);
    (0..users)
        .flat_map(|u| (0..items).map(move |i| (u, i)))
        .filter(|_| r.gen_bool(p))
        .collect()
}

fn construction_validity() -> Verdict {
    let start = Instant::now();
    let spec = SynthSpec { n_users: 1000, seed: 1, ..SynthSpec::default() };
    let (recipes, events) = generate(&spec).unwrap();
    let config = BuilderConfig::default();
    let built = build_dataset(recipes, &events, 4, &config).unwrap();
    let emitted = construct_meals_with_origin(&built.filtered, &config);
    let bad_meals = emitted
        .iter()
        .filter(|(m, u)| !check_meal(&built.filtered, m, Some(*u), config.time_window).is_empty())
        .count();
    let meals: Vec<Meal> = emitted.iter().map(|(m, _)| *m).collect();
    let raw_pairs = construct_user_meal(&built.filtered, &meals);
    let bad_pairs = unliked_pairs(&built.filtered, &meals, &raw_pairs).len()
        + unliked_pairs(&built.filtered, &built.meals, &built.interactions).len();

    let mut r = rng::stream(2024, &[1]);
    let mut core_mismatch = 0;
    let t0 = parse_timestamp("2020-01-01T00:00:00").unwrap();
    for _ in 0..10 {
        let edges = random_edges(&mut r);
        let k = r.gen_range(2..=5);
        let ids: BTreeSet<u64> = edges.iter().map(|e| e.1).collect();
        let recipes: Vec<Recipe> =
            ids.iter().map(|&i| Recipe::new(i, format!("r{i}"), Category::ALL[(i % 3) as usize], &["t"])).collect();
        let positives: Positives = edges.iter().map(|&e| (e, t0)).collect();
        let got: BTreeSet<(u64, u64)> =
            k_core_filter(&InteractionCorpus::new(recipes, positives), k).positives.keys().copied().collect();
        if got != brute_force_core(&edges, k) {
            core_mismatch += 1;
        }
    }
    let t = start.elapsed();
    verdict(
        !emitted.is_empty() && bad_meals == 0 && bad_pairs == 0 && core_mismatch == 0 && within(t, 60),
        format!(
            "{} meals emitted, {bad_meals} invalid; {} + {} user-meal pairs, {bad_pairs} with unliked recipes; \
             k-core mismatches {core_mismatch}/10; {t:.1?}",
            emitted.len(),
            raw_pairs.len(),
            built.interactions.len()
        ),
    )
}

fn metric_oracles() -> Verdict {
    // (rank, HR@5, NDCG@5, HR@10, NDCG@10); NDCG values are 1/log2(rank + 1),
    // which for rank 9 coincides with log10(2).
    #[allow(clippy::approx_constant)]
    let table: [(usize, f64, f64, f64, f64); 20] = [
        (1, 1.0, 1.0, 1.0, 1.0),
        (2, 1.0, 0.6309297535714575, 1.0, 0.6309297535714575),
        (3, 1.0, 0.5, 1.0, 0.5),
        (4, 1.0, 0.43067655807339306, 1.0, 0.43067655807339306),
        (5, 1.0, 0.38685280723454163, 1.0, 0.38685280723454163),
        (6, 0.0, 0.0, 1.0, 0.3562071871080222),
        (7, 0.0, 0.0, 1.0, 0.3333333333333333),
        (8, 0.0, 0.0, 1.0, 0.31546487678572877),
        (9, 0.0, 0.0, 1.0, 0.3010299956639812),
        (10, 0.0, 0.0, 1.0, 0.2890648263178879),
        (11, 0.0, 0.0, 0.0, 0.0),
        (12, 0.0, 0.0, 0.0, 0.0),
        (15, 0.0, 0.0, 0.0, 0.0),
        (20, 0.0, 0.0, 0.0, 0.0),
        (31, 0.0, 0.0, 0.0, 0.0),
        (50, 0.0, 0.0, 0.0, 0.0),
        (64, 0.0, 0.0, 0.0, 0.0),
        (77, 0.0, 0.0, 0.0, 0.0),
        (99, 0.0, 0.0, 0.0, 0.0),
        (100, 0.0, 0.0, 0.0, 0.0),
    ];
    let mut mismatches = 0;
    for (i, &(rank, h5, n5, h10, n10)) in table.iter().enumerate() {
        // rank - 1 negatives strictly above the test score, alternating with
        // ties so the pessimistic policy is exercised.
        let above = rank - 1;
        let negatives: Vec<f64> = (0..99)
            .map(|j| if j < above { if (i + j) % 2 == 0 { 1.0 } else { 2.0 + j as f64 } } else { -(j as f64) - 1.0 })
            .collect();
        let o = outcome_from_scores(i as u64, 1.0, &negatives, &DEFAULT_KS);
        let got = (o.rank, o.hr[&5], o.ndcg[&5], o.hr[&10], o.ndcg[&10]);
        if got != (rank, h5, n5, h10, n10) {
            mismatches += 1;
        }
    }
    let exact = hit_at(6, 5) == 0.0 && ndcg_at(3, 5) == 0.5 && hit_at(6, 10) == 1.0;

    let cases: Vec<mealrec::evaluator::EvalCase> = (0..4000u64)
        .map(|u| mealrec::evaluator::EvalCase { user_id: u, test_meal_id: 0, negative_ids: (1..100).collect() })
        .collect();
    let scorer = |u: UserId, m: MealId| {
        let bits = rng::sub_seed(77, &[u, m]);
        (bits >> 11) as f64
    };
    let m = evaluate(&scorer, &cases, &DEFAULT_KS).unwrap().metrics;
    let (h5, h10) = (m.hr_at(5), m.hr_at(10));
    verdict(
        mismatches == 0 && exact && (h5 - 0.05).abs() <= 0.02 && (h10 - 0.10).abs() <= 0.02,
        format!("{}/20 hand cases exact; random scorer over 4000 cases HR@5 {h5:.4} HR@10 {h10:.4}", 20 - mismatches),
    )
}

/// Synthetic corpus used for the learnability check, with its split and cases.
struct LearnSetup {
    meals: Vec<Meal>,
    interactions: UserMealMatrix,
}

fn learn_setup() -> LearnSetup {
    let spec = SynthSpec { seed: 7, ..SynthSpec::default() };
    let (recipes, events) = generate(&spec).unwrap();
    let built = build_dataset(recipes, &events, 4, &BuilderConfig::default()).unwrap();
    LearnSetup { meals: built.meals, interactions: built.interactions }
}

fn train_and_score(meals: &[Meal], interactions: &UserMealMatrix, hyper: &HyperParams, variant: Variant) -> Metrics {
    let split = leave_one_out_split(interactions, 1);
    let catalog = Catalog::new(meals, interactions.users());
    let ids: Vec<MealId> = catalog.meal_ids().collect();
    let cases = build_cases(&split, &ids, DEFAULT_NEGATIVES, 2).unwrap();
    let out = fit(&catalog, &split.train, hyper, variant).unwrap();
    let scorer = ModelScorer::new(&out.params, &catalog, &split.train, hyper.l, variant, hyper.seed).unwrap();
    evaluate(&scorer, &cases, &DEFAULT_KS).unwrap().metrics
}

fn learnability() -> Verdict {
    let start = Instant::now();
    let setup = learn_setup();
    let hyper = HyperParams { d: 10, epochs: 100, learning_rate: 1e-2, seed: 3, ..HyperParams::default() };
    let a = train_and_score(&setup.meals, &setup.interactions, &hyper, Variant::Ccmr);
    let b = train_and_score(&setup.meals, &setup.interactions, &hyper, Variant::Ccmr);
    let same = a.hr.values().chain(a.ndcg.values()).map(|v| v.to_bits()).eq(b
        .hr
        .values()
        .chain(b.ndcg.values())
        .map(|v| v.to_bits()));

    let split = leave_one_out_split(&setup.interactions, 1);
    let ids: Vec<MealId> = setup.meals.iter().map(|m| m.meal_id).collect();
    let cases = build_cases(&split, &ids, DEFAULT_NEGATIVES, 2).unwrap();
    let random = |u: UserId, m: MealId| (rng::sub_seed(31, &[u, m]) >> 11) as f64;
    let r = evaluate(&random, &cases, &DEFAULT_KS).unwrap().metrics;
    let t = start.elapsed();
    verdict(
        a.hr_at(5) >= 0.35 && r.hr_at(5) <= 0.10 && same && within(t, 600),
        format!(
            "{} users, {} meals; CCMR HR@5 {:.4} NDCG@5 {:.4} HR@10 {:.4} (>= 0.35 at HR@5), random HR@5 {:.4} (<= 0.10); \
             repeat run identical: {same}; {t:.1?} for two runs",
            setup.interactions.users().len(),
            setup.meals.len(),
            a.hr_at(5),
            a.ndcg_at(5),
            a.hr_at(10),
            r.hr_at(5)
        ),
    )
}

struct Released {
    corpus: InteractionCorpus,
    meals: Vec<Meal>,
    interactions: UserMealMatrix,
}

fn open(dir: &Path, name: &str) -> std::io::Result<std::fs::File> {
    std::fs::File::open(dir.join(name))
}

/// Expects `recipes.csv`, `user_recipe.csv` (review columns), `meals.csv` and
/// `user_meal.csv` under `dir`.
fn load_released(dir: &Path) -> Result<Released, String> {
    let e = |x: &dyn std::fmt::Display| x.to_string();
    let recipes = parse_recipes(open(dir, "recipes.csv").map_err(|x| e(&x))?).map_err(|x| e(&x))?;
    let events = parse_reviews(open(dir, "user_recipe.csv").map_err(|x| e(&x))?).map_err(|x| e(&x))?;
    let meals = read_meals(open(dir, "meals.csv").map_err(|x| e(&x))?).map_err(|x| e(&x))?;
    let interactions = read_user_meal(open(dir, "user_meal.csv").map_err(|x| e(&x))?).map_err(|x| e(&x))?;
    let corpus = InteractionCorpus::new(recipes, threshold_positive(&events, 0));
    Ok(Released { corpus, meals, interactions })
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os("MEALREC_DATA_DIR").map(PathBuf::from)
}

fn released_statistics() -> Verdict {
    let Some(dir) = data_dir() else {
        return Verdict::Skip("MEALREC_DATA_DIR not set; released files unavailable".into());
    };
    let data = match load_released(&dir) {
        Ok(d) => d,
        Err(err) => return Verdict::Fail(format!("cannot load {}: {err}", dir.display())),
    };
    let s = corpus_stats(&data.corpus, &data.meals, &data.interactions);
    let round2 = |x: f64| (x * 100.0).round() / 100.0;
    let ok = s.users == 1575
        && s.bundles == 3817
        && s.items == 7280
        && s.user_bundle == 46767
        && s.user_item == 151148
        && (s.avg_bundle_size - 3.0).abs() < 1e-9
        && round2(s.user_item_density) == 1.30
        && round2(s.user_bundle_density) == 0.77
        && (s.appetizers, s.main_dishes, s.desserts) == (2737, 2552, 1991);
    verdict(ok, s.to_report().replace('\n', "; "))
}

fn released_training() -> Verdict {
    let Some(dir) = data_dir() else {
        return Verdict::Skip("MEALREC_DATA_DIR not set; informational run not attempted".into());
    };
    let data = match load_released(&dir) {
        Ok(d) => d,
        Err(err) => return Verdict::Info(format!("cannot load {}: {err}", dir.display())),
    };
    let hyper = HyperParams { d: 10, l: 64, batch_size: 1024, ..HyperParams::default() };
    let m = train_and_score(&data.meals, &data.interactions, &hyper, Variant::Ccmr);
    let mut line = format!(
        "CCMR d=10 HR@5 {:.4} NDCG@5 {:.4} HR@10 {:.4} NDCG@10 {:.4} (reference 0.5524 / 0.4138 / 0.6927 / 0.4593)",
        m.hr_at(5),
        m.ndcg_at(5),
        m.hr_at(10),
        m.ndcg_at(10)
    );
    let ablation = HyperParams { d: 5, ..hyper };
    for v in Variant::ALL {
        let m = train_and_score(&data.meals, &data.interactions, &ablation, v);
        line.push_str(&format!("; {v} d=5 HR@5 {:.4}", m.hr_at(5)));
    }
    Verdict::Info(line)
}

fn model_invariants() -> Verdict {
    let config = Config { cases: 100, failure_persistence: None, ..Config::default() };
    let runner = || TestRunner::new_with_rng(config.clone(), TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let variants = proptest::sample::select(Variant::ALL.to_vec());
    let mut failures = Vec::new();

    let perm = runner().run(&(0u64..100_000, variants.clone(), 1usize..7), |(seed, v, shift)| {
        let inst = random_instance(seed, 3, 12, 4, 0.5);
        let p = spread_params(&inst.catalog, 4, seed);
        let (u, m) = inst.interactions.iter().next().unwrap();
        let h = history_of(&inst, u, 12);
        let n = h.real_meals();
        let mut cols = h.columns[..n].to_vec();
        cols.rotate_left(shift % n);
        cols.reverse();
        let ui = inst.catalog.user(u).unwrap();
        let meal = inst.catalog.meal(m).unwrap();
        let a = predict_variant(&p, ui, &meal, &h, v).unwrap();
        let b = predict_variant(&p, ui, &meal, &UserHistoryInput::from_meals(&cols, 12), v).unwrap();
        proptest::prop_assert!((a - b).abs() <= 1e-12);
        Ok(())
    });
    if let Err(e) = perm {
        failures.push(format!("permutation: {e}"));
    }

    let pad = runner().run(&(0u64..100_000, variants, 1usize..20, -5.0f64..5.0), |(seed, v, extra, junk)| {
        let inst = random_instance(seed, 3, 10, 4, 0.4);
        let mut p = spread_params(&inst.catalog, 3, seed);
        let (u, m) = inst.interactions.iter().next().unwrap();
        let ui = inst.catalog.user(u).unwrap();
        let meal = inst.catalog.meal(m).unwrap();
        let a = predict_variant(&p, ui, &meal, &history_of(&inst, u, 10), v).unwrap();
        p.get_mut(ParamId::Recipe).row_mut(0).fill(junk);
        let b = predict_variant(&p, ui, &meal, &history_of(&inst, u, 10 + extra), v).unwrap();
        proptest::prop_assert!((a - b).abs() <= 1e-12);
        Ok(())
    });
    if let Err(e) = pad {
        failures.push(format!("padding: {e}"));
    }

    let hull = runner().run(&(1usize..9, 1usize..6, 0u64..100_000), |(n, d, seed)| {
        let mut r = rng::stream(seed, &[3]);
        let mut draw = |len: usize| (0..len).map(|_| r.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
        let q = Matrix::row_vector(draw(d));
        let k = Matrix::from_vec(n, d, draw(n * d)).unwrap();
        let v = Matrix::from_vec(n, d, draw(n * d)).unwrap();
        let mask: Vec<bool> = (0..n).map(|i| i == 0 || (seed >> i) & 1 == 1).collect();
        let out = attention(&q, &k, &v, &mask).unwrap();
        proptest::prop_assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for j in 0..d {
            let col: Vec<f64> = (0..n).filter(|&i| mask[i]).map(|i| v.get(i, j)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = out.output.get(0, j);
            proptest::prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
        for (w, &m) in out.weights.iter().zip(&mask) {
            proptest::prop_assert!(*w >= 0.0 && (m || *w == 0.0));
        }
        Ok(())
    });
    if let Err(e) = hull {
        failures.push(format!("convex hull: {e}"));
    }

    let additive = runner().run(&(0u64..100_000, 1usize..6, 0usize..3), |(seed, r, c)| {
        let p = ModelParams::init(5, 2, 6, 0.01, seed);
        let got = recipe_repr(&p, r, Category::ALL[c]).unwrap();
        let e = p.get(ParamId::Recipe).row(r);
        let o = p.get(ParamId::Category).row(c);
        proptest::prop_assert!((0..6).all(|i| got[i] == e[i] + o[i]));
        Ok(())
    });
    if let Err(e) = additive {
        failures.push(format!("additivity: {e}"));
    }

    if failures.is_empty() {
        Verdict::Pass("history permutation, padding neutrality, convex hull and additivity hold over 100 cases each".into())
    } else {
        Verdict::Fail(failures.join("; "))
    }
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 7] = [
        ("gradient fidelity", gradient_fidelity),
        ("construction validity", construction_validity),
        ("metric oracles", metric_oracles),
        ("learnability", learnability),
        ("released corpus statistics", released_statistics),
        ("released corpus training (informational)", released_training),
        ("model invariant suite", model_invariants),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (tag, detail) = match run() {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
            Verdict::Info(d) => ("INFO", d),
        };
        println!("{tag} [{}] {name}: {detail}", i + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
