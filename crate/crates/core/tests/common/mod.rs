#![allow(dead_code)]

use std::collections::BTreeSet;

use mealrec::builder::{Meal, MealId, UserMealMatrix};
use mealrec::ccmr::{Catalog, ModelParams, ParamId, UserHistoryInput, Variant};
use mealrec::corpus::UserId;
use mealrec::rng;
use mealrec::trainer::PreparedTriple;
use rand::Rng;

pub struct Instance {
    pub meals: Vec<Meal>,
    pub interactions: UserMealMatrix,
    pub catalog: Catalog,
}

/// Random meals over three disjoint recipe pools and random user-meal pairs;
/// every user gets at least two meals.
pub fn random_instance(seed: u64, n_users: u64, n_meals: u64, per_course: u64, density: f64) -> Instance {
    let mut r = rng::stream(seed, &[77]);
    let meals: Vec<Meal> = (0..n_meals)
        .map(|i| Meal {
            meal_id: i,
            appetizer_id: 100 + r.gen_range(0..per_course),
            main_dish_id: 200 + r.gen_range(0..per_course),
            dessert_id: 300 + r.gen_range(0..per_course),
        })
        .collect();
    let mut pairs = Vec::new();
    for u in 0..n_users {
        let mut mine: Vec<MealId> = (0..n_meals).filter(|_| r.gen_bool(density)).collect();
        while mine.len() < 2 {
            mine.push(r.gen_range(0..n_meals));
            mine.sort_unstable();
            mine.dedup();
        }
        pairs.extend(mine.into_iter().map(|m| (u + 1, m)));
    }
    let interactions = UserMealMatrix::new(pairs);
    let catalog = Catalog::new(&meals, interactions.users());
    Instance { meals, interactions, catalog }
}

/// Initial parameters with biases spread over `[-1, 1)` so pre-activations
/// sit away from the LeakyReLU kink at finite-difference scale.
pub fn spread_params(catalog: &Catalog, d: usize, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(catalog.n_recipes(), catalog.n_users(), d, 0.01, seed);
    let mut r = rng::stream(seed, &[78]);
    for id in [ParamId::B1, ParamId::B2, ParamId::B3] {
        for v in p.get_mut(id).as_mut_slice() {
            *v = r.gen_range(-1.0..1.0);
        }
    }
    p
}

/// One triple per interaction: the positive is left out of the history and
/// the negative is the lowest-id meal the user has not chosen.
pub fn batch(inst: &Instance, l: usize) -> Vec<PreparedTriple> {
    let n_meals = inst.meals.len() as u64;
    let mut out = Vec::new();
    for (u, m) in inst.interactions.iter() {
        let hist: Vec<[usize; 3]> = inst
            .interactions
            .meals_of(u)
            .filter(|&x| x != m)
            .map(|x| inst.catalog.meal(x).unwrap())
            .collect();
        let Some(neg) = (0..n_meals).find(|&x| !inst.interactions.contains(u, x)) else { continue };
        if hist.is_empty() {
            continue;
        }
        out.push(PreparedTriple {
            user: inst.catalog.user(u).unwrap(),
            positive: inst.catalog.meal(m).unwrap(),
            negative: inst.catalog.meal(neg).unwrap(),
            history: UserHistoryInput::from_meals(&hist, l),
        });
    }
    out
}

pub fn history_of(inst: &Instance, user: UserId, l: usize) -> UserHistoryInput {
    let hist: Vec<[usize; 3]> = inst.interactions.meals_of(user).map(|x| inst.catalog.meal(x).unwrap()).collect();
    UserHistoryInput::from_meals(&hist, l)
}

/// Round-based k-core: drop every node below degree `k` at once, repeat.
pub fn brute_force_core(edges: &BTreeSet<(u64, u64)>, k: usize) -> BTreeSet<(u64, u64)> {
    let mut cur = edges.clone();
    loop {
        let left_ok: BTreeSet<u64> = cur
            .iter()
            .map(|e| e.0)
            .filter(|&l| cur.iter().filter(|e| e.0 == l).count() >= k)
            .collect();
        let right_ok: BTreeSet<u64> = cur
            .iter()
            .map(|e| e.1)
            .filter(|&r| cur.iter().filter(|e| e.1 == r).count() >= k)
            .collect();
        let next: BTreeSet<(u64, u64)> =
            cur.iter().copied().filter(|e| left_ok.contains(&e.0) && right_ok.contains(&e.1)).collect();
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

// Straight-line reference model over plain vectors.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn attend(q: &[f64], rows: &[Vec<f64>], mask: &[bool]) -> Vec<f64> {
    let scale = (q.len() as f64).sqrt();
    let logits: Vec<f64> = rows.iter().map(|k| dot(q, k) / scale).collect();
    let top = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().zip(mask).map(|(l, &m)| if m { (l - top).exp() } else { 0.0 }).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; q.len()];
    for (row, wi) in rows.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += wi / z * v;
        }
    }
    out
}

fn dense(x: &[f64], w: &ModelParams, wid: ParamId, bid: ParamId) -> Vec<f64> {
    let (wm, bm) = (w.get(wid), w.get(bid));
    (0..wm.rows())
        .map(|j| {
            let pre = dot(wm.row(j), x) + bm.as_slice()[j];
            if pre > 0.0 {
                pre
            } else {
                w.leaky_slope * pre
            }
        })
        .collect()
}

fn recipe(p: &ModelParams, id: usize, course: usize) -> Vec<f64> {
    let e = p.get(ParamId::Recipe).row(id);
    let o = p.get(ParamId::Category).row(course);
    e.iter().zip(o).map(|(a, b)| a + b).collect()
}

pub fn oracle_score(p: &ModelParams, user: usize, meal: &[usize; 3], h: &UserHistoryInput, variant: Variant) -> f64 {
    let user_emb = p.get(ParamId::User).row(user).to_vec();
    let meal_rows: Vec<Vec<f64>> = (0..3).map(|t| recipe(p, meal[t], t)).collect();
    let meal_vec = attend(&user_emb, &meal_rows, &[true; 3]);
    let user_vec = match variant {
        Variant::Ccmr | Variant::Cw => {
            let course_vecs: Vec<Vec<f64>> = (0..3)
                .map(|t| {
                    let rows: Vec<Vec<f64>> = h.columns.iter().map(|c| recipe(p, c[t], t)).collect();
                    let q = if variant == Variant::Ccmr { &meal_rows[t] } else { &user_emb };
                    attend(q, &rows, &h.mask)
                })
                .collect();
            attend(&user_emb, &course_vecs, &[true; 3])
        }
        Variant::Mw | Variant::MwF => {
            let q = if variant == Variant::Mw { &user_emb } else { &meal_vec };
            let reps: Vec<Vec<f64>> = h
                .columns
                .iter()
                .zip(&h.mask)
                .map(|(c, &real)| {
                    if real {
                        let past_meal: Vec<Vec<f64>> = (0..3).map(|t| recipe(p, c[t], t)).collect();
                        attend(q, &past_meal, &[true; 3])
                    } else {
                        vec![0.0; user_emb.len()]
                    }
                })
                .collect();
            attend(&user_emb, &reps, &h.mask)
        }
    };
    let mut h0 = user_vec.clone();
    h0.extend_from_slice(&meal_vec);
    h0.extend(user_vec.iter().zip(&meal_vec).map(|(a, b)| a * b));
    let h1 = dense(&h0, p, ParamId::W1, ParamId::B1);
    let h2 = dense(&h1, p, ParamId::W2, ParamId::B2);
    dense(&h2, p, ParamId::W3, ParamId::B3)[0]
}
