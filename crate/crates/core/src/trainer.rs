//! Pairwise ranking training with Adam.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::softplus;
use crate::builder::{MealId, UserMealMatrix};
use crate::ccmr::{
    select_history, Catalog, GradParts, HyperParams, ModelParams, ParamId, Tape, UserHistoryInput, Variant, COURSES,
};
use crate::corpus::UserId;
use crate::error::{Error, Result};
use crate::evaluator::{self, EvalCase, MealScorer, ModelScorer};
use crate::rng;

const STREAM_HOLDOUT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;
const STREAM_NEGATIVES: u64 = 13;
const STREAM_HISTORY: u64 = 14;
const STREAM_EVAL: u64 = 15;

/// Negatives per held-out pair during model selection (fewer if the meal
/// universe is small).
const HOLDOUT_NEGATIVES: usize = 99;
const HOLDOUT_K: usize = 5;

/// Sum of `-ln sigmoid(pos - neg)` plus `l2_coeff * ||params||²`.
pub fn bpr_loss(pos: &[f64], neg: &[f64], params: &ModelParams, l2_coeff: f64) -> Result<f64> {
    if pos.is_empty() || pos.len() != neg.len() {
        return Err(Error::Shape(format!("{} positive and {} negative scores", pos.len(), neg.len())));
    }
    if pos.iter().chain(neg).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("ranking score".into()));
    }
    let data: f64 = pos.iter().zip(neg).map(|(p, n)| softplus(n - p)).sum();
    Ok(data + l2_coeff * params.squared_norm())
}

/// `k` distinct meals drawn uniformly from `all_meals` outside `history`.
pub fn sample_negatives(
    user: UserId,
    history: &BTreeSet<MealId>,
    all_meals: &[MealId],
    k: usize,
    seed: u64,
) -> Result<Vec<MealId>> {
    let mut r = rng::stream(seed, &[user]);
    draw_negatives(user, history, all_meals, k, &mut r)
}

/// Rejection sampling when most meals are eligible, enumeration otherwise.
fn draw_negatives(
    user: UserId,
    history: &BTreeSet<MealId>,
    all_meals: &[MealId],
    k: usize,
    r: &mut rng::Rng,
) -> Result<Vec<MealId>> {
    let blocked = all_meals.iter().filter(|m| history.contains(m)).count();
    let available = all_meals.len() - blocked;
    if available < k {
        return Err(Error::InsufficientCandidates { user_id: user, available, needed: k });
    }
    if 2 * available < all_meals.len() || 4 * k > available {
        return evaluator::sample_excluding(user, history, all_meals, k, r);
    }
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let m = all_meals[r.gen_range(0..all_meals.len())];
        if !history.contains(&m) && !picked.contains(&m) {
            picked.push(m);
        }
    }
    Ok(picked)
}

/// A training triple resolved to dense indices with its user history.
#[derive(Clone, Debug)]
pub struct PreparedTriple {
    pub user: usize,
    pub positive: [usize; COURSES],
    pub negative: [usize; COURSES],
    pub history: UserHistoryInput,
}

fn triple_grad(params: &ModelParams, t: &PreparedTriple, variant: Variant) -> Result<(f64, GradParts)> {
    let mut tape = Tape::new(params);
    let pos = tape.score(t.user, &t.positive, &t.history, variant)?.score;
    let neg = tape.score(t.user, &t.negative, &t.history, variant)?.score;
    let margin = tape.graph.sub(neg, pos)?;
    let loss = tape.graph.softplus(margin);
    tape.graph.backward(loss)?;
    Ok((tape.graph.value(loss).value(), tape.gradient_parts()))
}

/// Batch loss and its gradient; the padding row's gradient is zeroed.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &[PreparedTriple],
    variant: Variant,
    l2_coeff: f64,
) -> Result<(f64, ModelParams)> {
    let parts = batch
        .par_iter()
        .map(|t| triple_grad(params, t, variant))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        g.add_to(&mut grads);
    }
    if l2_coeff != 0.0 {
        loss += l2_coeff * params.squared_norm();
        for ((_, g), (_, p)) in grads.iter_mut().zip(params.iter()) {
            for (gv, pv) in g.as_mut_slice().iter_mut().zip(p.as_slice()) {
                *gv += 2.0 * l2_coeff * pv;
            }
        }
    }
    grads.get_mut(ParamId::Recipe).row_mut(0).fill(0.0);
    Ok((loss, grads))
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    first: ModelParams,
    second: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, learning_rate: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let moments = self.first.iter_mut().zip(self.second.iter_mut());
        for (((id, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
            let skip = if id == ParamId::Recipe { p.cols() } else { 0 };
            let p = &mut p.as_mut_slice()[skip..];
            let g = &g.as_slice()[skip..];
            let m = &mut m.as_mut_slice()[skip..];
            let v = &mut v.as_mut_slice()[skip..];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub holdout_hr5: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters of the best holdout epoch, or of the last epoch without a
    /// holdout.
    pub params: ModelParams,
    pub last_params: ModelParams,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
    /// Training pairs skipped each epoch because the user had no other meal.
    pub skipped_pairs: usize,
    pub holdout_pairs: usize,
}

/// Splits off roughly `fraction` of the pairs for model selection, never
/// leaving a user with fewer than two training meals.
fn split_holdout(train: &UserMealMatrix, fraction: f64, seed: u64) -> (UserMealMatrix, Vec<(UserId, MealId)>) {
    let target = (fraction * train.len() as f64).ceil() as usize;
    if fraction <= 0.0 || target == 0 {
        return (train.clone(), Vec::new());
    }
    let mut pairs: Vec<(UserId, MealId)> = train.iter().collect();
    pairs.shuffle(&mut rng::stream(seed, &[STREAM_HOLDOUT]));
    let mut counts: BTreeMap<UserId, usize> = BTreeMap::new();
    for (u, _) in train.iter() {
        *counts.entry(u).or_default() += 1;
    }
    let mut remaining = train.clone();
    let mut held = Vec::new();
    for (u, m) in pairs {
        if held.len() == target {
            break;
        }
        let c = counts.get_mut(&u).expect("counted");
        if *c > 2 {
            *c -= 1;
            remaining.remove(u, m);
            held.push((u, m));
        }
    }
    held.sort_unstable();
    (remaining, held)
}

fn holdout_cases(
    fit_train: &UserMealMatrix,
    held: &[(UserId, MealId)],
    all_meals: &[MealId],
    seed: u64,
) -> Result<Vec<EvalCase>> {
    held.iter()
        .map(|&(user, meal)| {
            let mut seen: BTreeSet<MealId> = fit_train.meals_of(user).collect();
            seen.insert(meal);
            let n = HOLDOUT_NEGATIVES.min(all_meals.len() - seen.len());
            let mut r = rng::stream(seed, &[STREAM_EVAL, user, meal]);
            let negative_ids = evaluator::sample_excluding(user, &seen, all_meals, n, &mut r)?;
            Ok(EvalCase { user_id: user, test_meal_id: meal, negative_ids })
        })
        .collect()
}

/// Resolves one epoch's triples. Each positive is excluded from its own
/// history; pairs whose user then has no history are skipped.
#[allow(clippy::too_many_arguments)]
fn epoch_triples(
    catalog: &Catalog,
    pairs: &[(UserId, MealId)],
    by_user: &BTreeMap<UserId, Vec<MealId>>,
    known: &BTreeMap<UserId, BTreeSet<MealId>>,
    all_meals: &[MealId],
    hyper: &HyperParams,
    epoch: usize,
) -> Result<(Vec<PreparedTriple>, usize)> {
    let mut out = Vec::with_capacity(pairs.len() * hyper.negatives_per_positive);
    let mut skipped = 0;
    for &(user, pos) in pairs {
        let meals = &by_user[&user];
        let e = epoch as u64;
        let chosen = select_history(meals, hyper.l, Some(pos), rng::sub_seed(hyper.seed, &[STREAM_HISTORY, e, user, pos]));
        if chosen.is_empty() {
            skipped += 1;
            continue;
        }
        let triples = chosen.iter().map(|&m| catalog.meal(m)).collect::<Result<Vec<_>>>()?;
        let history = UserHistoryInput::from_meals(&triples, hyper.l);
        let mut r = rng::stream(hyper.seed, &[STREAM_NEGATIVES, e, user, pos]);
        let negatives = draw_negatives(user, &known[&user], all_meals, hyper.negatives_per_positive, &mut r)?;
        let u = catalog.user(user)?;
        let positive = catalog.meal(pos)?;
        for neg in negatives {
            out.push(PreparedTriple { user: u, positive, negative: catalog.meal(neg)?, history: history.clone() });
        }
    }
    Ok((out, skipped))
}

pub fn fit(catalog: &Catalog, train: &UserMealMatrix, hyper: &HyperParams, variant: Variant) -> Result<FitOutcome> {
    fit_from(catalog, train, hyper, variant, catalog.init_params(hyper))
}

/// Trains starting from `init`.
pub fn fit_from(
    catalog: &Catalog,
    train: &UserMealMatrix,
    hyper: &HyperParams,
    variant: Variant,
    init: ModelParams,
) -> Result<FitOutcome> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training interactions".into()));
    }
    let all_meals: Vec<MealId> = catalog.meal_ids().collect();
    let known: BTreeMap<UserId, BTreeSet<MealId>> = train.by_user();
    let (fit_train, held) = split_holdout(train, hyper.holdout_fraction, hyper.seed);
    let cases = holdout_cases(&fit_train, &held, &all_meals, hyper.seed)?;
    let by_user: BTreeMap<UserId, Vec<MealId>> = fit_train
        .by_user()
        .into_iter()
        .map(|(u, ms)| (u, ms.into_iter().collect()))
        .collect();
    let mut pairs: Vec<(UserId, MealId)> = fit_train.iter().collect();

    let mut params = init;
    params.zero_padding();
    let mut adam = Adam::new(&params);
    let mut trace = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut skipped_pairs = 0;

    for epoch in 1..=hyper.epochs {
        pairs.sort_unstable();
        pairs.shuffle(&mut rng::stream(hyper.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let (triples, skipped) = epoch_triples(catalog, &pairs, &by_user, &known, &all_meals, hyper, epoch)?;
        skipped_pairs = skipped;
        let mut total = 0.0;
        for batch in triples.chunks(hyper.batch_size) {
            let (loss, grads) = batch_loss_and_grad(&params, batch, variant, hyper.l2_coeff)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("batch loss {loss}") });
            }
            total += loss;
            adam.step(&mut params, &grads, hyper.learning_rate);
            if !params.is_finite() {
                return Err(Error::Diverged { epoch, detail: "non-finite parameters after update".into() });
            }
        }
        let mean_loss = total / triples.len().max(1) as f64;
        let holdout_hr5 = if cases.is_empty() {
            None
        } else {
            let scorer = ModelScorer::new(&params, catalog, &fit_train, hyper.l, variant, hyper.seed)?;
            Some(holdout_hit_rate(&scorer, &cases)?)
        };
        log::info!("epoch {epoch}: mean loss {mean_loss:.6}, holdout HR@5 {holdout_hr5:?}");
        trace.push(EpochRecord { epoch, mean_loss, holdout_hr5 });
        if let Some(hr) = holdout_hr5 {
            if best.as_ref().is_none_or(|(b, _, _)| hr > *b) {
                best = Some((hr, epoch, params.clone()));
            }
        }
    }

    let (selected, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params.clone(), hyper.epochs),
    };
    Ok(FitOutcome {
        params: selected,
        last_params: params,
        best_epoch,
        trace,
        skipped_pairs,
        holdout_pairs: held.len(),
    })
}

fn holdout_hit_rate(scorer: &dyn MealScorer, cases: &[EvalCase]) -> Result<f64> {
    let eval = evaluator::evaluate(scorer, cases, &[HOLDOUT_K])?;
    Ok(eval.metrics.hr_at(HOLDOUT_K))
}

pub fn write_trace_csv<W: Write>(w: W, trace: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "mean_loss", "holdout_HR@5"])?;
    for r in trace {
        let hr = r.holdout_hr5.map(|h| format!("{h:.6}")).unwrap_or_default();
        out.write_record([r.epoch.to_string(), format!("{:.8}", r.mean_loss), hr])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::init(4, 1, 2, 0.01, 0)
    }

    #[test]
    fn bpr_reference_values() {
        let zero = ModelParams::zeros(1, 1, 2, 0.01);
        assert!((bpr_loss(&[0.3], &[0.3], &zero, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let oracle = -(1.0 / (1.0 + (-1.0f64).exp())).ln();
        assert!((bpr_loss(&[2.0], &[1.0], &zero, 0.0).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 0.313262).abs() < 1e-6);
        let p = params();
        let reg = 1e-3 * p.squared_norm();
        assert!((bpr_loss(&[1e6], &[0.0], &p, 1e-3).unwrap() - reg).abs() < 1e-12);
        assert!(bpr_loss(&[f64::NAN], &[0.0], &p, 0.0).is_err());
        assert!(bpr_loss(&[1.0, 2.0], &[0.0], &p, 0.0).is_err());
    }

    #[test]
    fn negatives_avoid_history() {
        let all: Vec<MealId> = (0..10).collect();
        let forced: BTreeSet<MealId> = (0..10).filter(|&m| m != 6).collect();
        assert_eq!(sample_negatives(1, &forced, &all, 1, 0).unwrap(), vec![6]);
        let h: BTreeSet<MealId> = [1, 3, 5].into();
        for seed in 0..10_000 {
            let s = sample_negatives(2, &h, &all, 2, seed).unwrap();
            assert!(s.iter().all(|m| !h.contains(m)) && s[0] != s[1]);
        }
        assert_eq!(sample_negatives(2, &h, &all, 3, 4).unwrap(), sample_negatives(2, &h, &all, 3, 4).unwrap());
        assert!(matches!(
            sample_negatives(1, &forced, &all, 2, 0),
            Err(Error::InsufficientCandidates { available: 1, .. })
        ));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.get_mut(ParamId::User).as_mut_slice()[0] = 3.0;
        g.get_mut(ParamId::Recipe).row_mut(0)[0] = 5.0;
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1);
        let moved = before.get(ParamId::User).as_slice()[0] - p.get(ParamId::User).as_slice()[0];
        assert!((moved - 0.1).abs() < 1e-6);
        assert_eq!(p.recipe_padding(), before.recipe_padding());
        assert_eq!(p.get(ParamId::W1), before.get(ParamId::W1));
    }
}
