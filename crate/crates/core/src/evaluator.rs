//! Leave-one-out evaluation against 99 sampled negatives.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::builder::{MealId, UserMealMatrix};
use crate::ccmr::{select_history, Catalog, ModelParams, Tape, UserHistoryInput, Variant};
use crate::corpus::UserId;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_NEGATIVES: usize = 99;
pub const DEFAULT_KS: [usize; 2] = [5, 10];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: UserMealMatrix,
    /// One held-out meal per eligible user.
    pub test: BTreeMap<UserId, MealId>,
}

/// Moves one seeded-random interaction per user to the test side. Users with
/// fewer than two interactions stay entirely in training.
pub fn leave_one_out_split(interactions: &UserMealMatrix, seed: u64) -> Split {
    let mut train = interactions.clone();
    let mut test = BTreeMap::new();
    for (user, meals) in interactions.by_user() {
        if meals.len() < 2 {
            log::warn!("user {user} has {} interaction(s); not evaluated", meals.len());
            continue;
        }
        let mut r = rng::stream(seed, &[user]);
        let held = *meals.iter().nth(r.gen_range(0..meals.len())).expect("index in range");
        train.remove(user, held);
        test.insert(user, held);
    }
    Split { train, test }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EvalCase {
    pub user_id: UserId,
    pub test_meal_id: MealId,
    pub negative_ids: Vec<MealId>,
}

impl EvalCase {
    /// Test meal first, then the negatives.
    pub fn candidates(&self) -> Vec<MealId> {
        std::iter::once(self.test_meal_id).chain(self.negative_ids.iter().copied()).collect()
    }
}

/// `k` distinct meals drawn uniformly from `all_meals` minus `exclude`.
pub fn sample_excluding(
    user: UserId,
    exclude: &BTreeSet<MealId>,
    all_meals: &[MealId],
    k: usize,
    r: &mut rng::Rng,
) -> Result<Vec<MealId>> {
    let candidates: Vec<MealId> = all_meals.iter().copied().filter(|m| !exclude.contains(m)).collect();
    if candidates.len() < k {
        return Err(Error::InsufficientCandidates { user_id: user, available: candidates.len(), needed: k });
    }
    Ok(rand::seq::index::sample(r, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect())
}

/// Builds one case per test pair with `n_negatives` negatives outside the
/// user's train and test interactions.
pub fn build_cases(
    split: &Split,
    all_meals: &[MealId],
    n_negatives: usize,
    seed: u64,
) -> Result<Vec<EvalCase>> {
    let mut all: Vec<MealId> = all_meals.to_vec();
    all.sort_unstable();
    all.dedup();
    split
        .test
        .iter()
        .map(|(&user, &test_meal)| {
            let mut seen: BTreeSet<MealId> = split.train.meals_of(user).collect();
            seen.insert(test_meal);
            let mut r = rng::stream(seed, &[user]);
            let negative_ids = sample_excluding(user, &seen, &all, n_negatives, &mut r)?;
            Ok(EvalCase { user_id: user, test_meal_id: test_meal, negative_ids })
        })
        .collect()
}

/// 1-based rank of `positive` among `positive` and `negatives`; ties rank the
/// positive below every tied negative.
pub fn pessimistic_rank(positive: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= positive).count()
}

pub fn hit_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Scores candidate meals for a user.
pub trait MealScorer: Sync {
    fn score(&self, user: UserId, meals: &[MealId]) -> Result<Vec<f64>>;
}

impl<F> MealScorer for F
where
    F: Fn(UserId, MealId) -> f64 + Sync,
{
    fn score(&self, user: UserId, meals: &[MealId]) -> Result<Vec<f64>> {
        Ok(meals.iter().map(|&m| self(user, m)).collect())
    }
}

/// Trained model with fixed per-user histories drawn from training data.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
    pub catalog: &'a Catalog,
    pub variant: Variant,
    histories: BTreeMap<UserId, UserHistoryInput>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(
        params: &'a ModelParams,
        catalog: &'a Catalog,
        train: &UserMealMatrix,
        l: usize,
        variant: Variant,
        seed: u64,
    ) -> Result<Self> {
        let mut histories = BTreeMap::new();
        for (user, meals) in train.by_user() {
            let meals: Vec<MealId> = meals.into_iter().collect();
            let chosen = select_history(&meals, l, None, rng::sub_seed(seed, &[user]));
            let triples = chosen.iter().map(|&m| catalog.meal(m)).collect::<Result<Vec<_>>>()?;
            histories.insert(user, UserHistoryInput::from_meals(&triples, l));
        }
        Ok(ModelScorer { params, catalog, variant, histories })
    }
}

impl MealScorer for ModelScorer<'_> {
    fn score(&self, user: UserId, meals: &[MealId]) -> Result<Vec<f64>> {
        let history = self.histories.get(&user).ok_or(Error::EmptyHistory { user_id: user })?;
        let u = self.catalog.user(user)?;
        meals
            .iter()
            .map(|&m| {
                let meal = self.catalog.meal(m)?;
                let mut tape = Tape::new(self.params);
                let vars = tape.score(u, &meal, history, self.variant)?;
                Ok(tape.graph.value(vars.score).value())
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankingOutcome {
    pub user_id: UserId,
    pub rank: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

pub fn rank_and_score<S: MealScorer + ?Sized>(scorer: &S, case: &EvalCase, ks: &[usize]) -> Result<RankingOutcome> {
    let scores = scorer.score(case.user_id, &case.candidates())?;
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad} for user {}", case.user_id)));
    }
    Ok(outcome_from_scores(case.user_id, scores[0], &scores[1..], ks))
}

pub fn outcome_from_scores(user_id: UserId, positive: f64, negatives: &[f64], ks: &[usize]) -> RankingOutcome {
    let rank = pessimistic_rank(positive, negatives);
    RankingOutcome {
        user_id,
        rank,
        hr: ks.iter().map(|&k| (k, hit_at(rank, k))).collect(),
        ndcg: ks.iter().map(|&k| (k, ndcg_at(rank, k))).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub cases: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl Metrics {
    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub outcomes: Vec<RankingOutcome>,
}

/// Mean of per-case outcomes; sums run in case order.
pub fn aggregate(outcomes: &[RankingOutcome], ks: &[usize]) -> Metrics {
    let n = outcomes.len().max(1) as f64;
    let mean = |pick: &dyn Fn(&RankingOutcome) -> f64| outcomes.iter().map(pick).sum::<f64>() / n;
    Metrics {
        cases: outcomes.len(),
        hr: ks.iter().map(|&k| (k, mean(&|o| o.hr[&k]))).collect(),
        ndcg: ks.iter().map(|&k| (k, mean(&|o| o.ndcg[&k]))).collect(),
    }
}

/// Scores cases in parallel and aggregates in case order.
pub fn evaluate<S: MealScorer + ?Sized>(scorer: &S, cases: &[EvalCase], ks: &[usize]) -> Result<Evaluation> {
    if cases.is_empty() {
        return Err(Error::Config("no evaluation cases".into()));
    }
    let outcomes = cases
        .par_iter()
        .map(|c| rank_and_score(scorer, c, ks))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { metrics: aggregate(&outcomes, ks), outcomes })
}

fn metric_header(ks: &[usize]) -> Vec<String> {
    let mut cols = vec!["user_id".to_string(), "rank".to_string()];
    for &k in ks {
        cols.push(format!("HR@{k}"));
        cols.push(format!("NDCG@{k}"));
    }
    cols
}

/// Per-user rows followed by a `mean` row.
pub fn write_report_csv<W: Write>(w: W, eval: &Evaluation, ks: &[usize]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(metric_header(ks))?;
    for o in &eval.outcomes {
        let mut row = vec![o.user_id.to_string(), o.rank.to_string()];
        for k in ks {
            row.push(format!("{}", o.hr[k]));
            row.push(format!("{:.6}", o.ndcg[k]));
        }
        out.write_record(row)?;
    }
    let mut row = vec!["mean".to_string(), String::new()];
    for &k in ks {
        row.push(format!("{:.6}", eval.metrics.hr_at(k)));
        row.push(format!("{:.6}", eval.metrics.ndcg_at(k)));
    }
    out.write_record(row)?;
    out.flush()?;
    Ok(())
}

fn metric_object(ks: &[usize], hr: &BTreeMap<usize, f64>, ndcg: &BTreeMap<usize, f64>) -> serde_json::Map<String, serde_json::Value> {
    let mut obj = serde_json::Map::new();
    for &k in ks {
        obj.insert(format!("HR@{k}"), hr[&k].into());
        obj.insert(format!("NDCG@{k}"), ndcg[&k].into());
    }
    obj
}

/// One JSON object per user, then one with `"aggregate": true`.
pub fn write_report_jsonl<W: Write>(mut w: W, eval: &Evaluation, ks: &[usize]) -> Result<()> {
    for o in &eval.outcomes {
        let mut obj = serde_json::Map::new();
        obj.insert("user_id".into(), o.user_id.into());
        obj.insert("rank".into(), o.rank.into());
        obj.extend(metric_object(ks, &o.hr, &o.ndcg));
        writeln!(w, "{}", serde_json::Value::Object(obj))?;
    }
    let mut obj = serde_json::Map::new();
    obj.insert("aggregate".into(), true.into());
    obj.insert("cases".into(), eval.metrics.cases.into());
    obj.extend(metric_object(ks, &eval.metrics.hr, &eval.metrics.ndcg));
    writeln!(w, "{}", serde_json::Value::Object(obj))?;
    Ok(())
}
