//! Category-constrained meal recommender.
//!
//! A recipe is represented as its recipe embedding plus the embedding of its
//! course. The target meal is the user-queried attention summary of its
//! three recipes. The user side aggregates history recipes per course with
//! the target meal's recipe of that course as query, then aggregates the
//! three course summaries with the user embedding as query. Both sides feed
//! a three-layer LeakyReLU network over the user vector, the meal vector and
//! their elementwise product.
//!
//! Ablations share the prediction head:
//! * `CW`   - per-course aggregation queried by the user embedding.
//! * `MW`   - per-meal aggregation of recipes, then of meals, both queried by
//!   the user embedding.
//! * `MW-F` - `MW` with the recipe-level query replaced by the target meal
//!   representation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Var};
use crate::builder::{Meal, MealId, UserMealMatrix};
use crate::corpus::{Category, RecipeId, UserId};
use crate::error::{Error, Result};
use crate::rng;

/// Number of courses in a meal.
pub const COURSES: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "CCMR", alias = "ccmr")]
    Ccmr,
    #[serde(rename = "MW", alias = "mw")]
    Mw,
    #[serde(rename = "CW", alias = "cw")]
    Cw,
    #[serde(rename = "MW-F", alias = "mw-f")]
    MwF,
}

impl Variant {
    /// Ablation table order.
    pub const ALL: [Variant; 4] = [Variant::Mw, Variant::Cw, Variant::MwF, Variant::Ccmr];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ccmr => "CCMR",
            Variant::Mw => "MW",
            Variant::Cw => "CW",
            Variant::MwF => "MW-F",
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
        match s.trim().to_ascii_uppercase().replace('_', "-").as_str() {
            "CCMR" => Ok(Variant::Ccmr),
            "MW" => Ok(Variant::Mw),
            "CW" => Ok(Variant::Cw),
            "MW-F" | "MWF" => Ok(Variant::MwF),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Embedding size.
    pub d: usize,
    /// Maximum number of history meals per user.
    pub l: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2_coeff: f64,
    pub leaky_slope: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    /// Share of training pairs held out for best-epoch selection; 0 disables it.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            d: 10,
            l: 64,
            learning_rate: 1e-3,
            batch_size: 1024,
            l2_coeff: 1e-5,
            leaky_slope: 0.01,
            epochs: 100,
            negatives_per_positive: 1,
            holdout_fraction: 0.05,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 || self.l == 0 || self.batch_size == 0 {
            return bad("d, l and batch_size must be at least 1");
        }
        if self.negatives_per_positive == 0 {
            return bad("negatives_per_positive must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return bad("l2_coeff must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Identifies one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Recipe,
    Category,
    User,
    W1,
    B1,
    W2,
    B2,
    W3,
    B3,
}

impl ParamId {
    /// Declaration order, also the checkpoint order.
    pub const ALL: [ParamId; 9] = [
        ParamId::Recipe,
        ParamId::Category,
        ParamId::User,
        ParamId::W1,
        ParamId::B1,
        ParamId::W2,
        ParamId::B2,
        ParamId::W3,
        ParamId::B3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Recipe => "recipe",
            ParamId::Category => "category",
            ParamId::User => "user",
            ParamId::W1 => "w1",
            ParamId::B1 => "b1",
            ParamId::W2 => "w2",
            ParamId::B2 => "b2",
            ParamId::W3 => "w3",
            ParamId::B3 => "b3",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Trainable tensors. Row 0 of the recipe table is the padding recipe and
/// stays zero; dense recipe indices start at 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: [Matrix; 9],
    pub leaky_slope: f64,
}

impl ModelParams {
    /// Zero tensors for `n_recipes` real recipes and `n_users` users with the
    /// `3d -> d -> d -> 1` head.
    pub fn zeros(n_recipes: usize, n_users: usize, d: usize, leaky_slope: f64) -> Self {
        let (h1, h2) = (d, d);
        ModelParams {
            tensors: [
                Matrix::zeros(n_recipes + 1, d),
                Matrix::zeros(COURSES, d),
                Matrix::zeros(n_users, d),
                Matrix::zeros(h1, 3 * d),
                Matrix::zeros(1, h1),
                Matrix::zeros(h2, h1),
                Matrix::zeros(1, h2),
                Matrix::zeros(1, h2),
                Matrix::zeros(1, 1),
            ],
            leaky_slope,
        }
    }

    /// Embeddings uniform in `±1/sqrt(d)`, weights uniform in
    /// `±1/sqrt(fan_in)`, biases zero.
    pub fn init(n_recipes: usize, n_users: usize, d: usize, leaky_slope: f64, seed: u64) -> Self {
        let mut p = ModelParams::zeros(n_recipes, n_users, d, leaky_slope);
        let mut r = rng::stream(seed, &[0x1417]);
        for id in ParamId::ALL {
            let bound = match id {
                ParamId::Recipe | ParamId::Category | ParamId::User => 1.0 / (d as f64).sqrt(),
                ParamId::W1 | ParamId::W2 | ParamId::W3 => 1.0 / (p.get(id).cols() as f64).sqrt(),
                _ => continue,
            };
            for v in p.get_mut(id).as_mut_slice() {
                *v = r.gen_range(-bound..bound);
            }
        }
        p.recipe_padding_mut().fill(0.0);
        p
    }

    pub fn zeros_like(&self) -> Self {
        let tensors = self.tensors.clone().map(|m| Matrix::zeros(m.rows(), m.cols()));
        ModelParams { tensors, leaky_slope: self.leaky_slope }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.index()]
    }

    pub fn d(&self) -> usize {
        self.get(ParamId::Category).cols()
    }

    pub fn n_recipes(&self) -> usize {
        self.get(ParamId::Recipe).rows() - 1
    }

    pub fn n_users(&self) -> usize {
        self.get(ParamId::User).rows()
    }

    fn recipe_padding_mut(&mut self) -> &mut [f64] {
        self.get_mut(ParamId::Recipe).row_mut(0)
    }

    pub fn recipe_padding(&self) -> &[f64] {
        self.get(ParamId::Recipe).row(0)
    }

    pub fn zero_padding(&mut self) {
        self.recipe_padding_mut().fill(0.0);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|m| m.as_slice().len()).sum()
    }

    /// All values in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::Shape(format!("{} values for {} parameters", values.len(), self.num_values())));
        }
        let mut offset = 0;
        for m in &mut self.tensors {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `||Θ||²` over every trainable value (the padding row is zero).
    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().map(Matrix::squared_norm).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        ParamId::ALL.into_iter().zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Matrix)> {
        ParamId::ALL.into_iter().zip(self.tensors.iter_mut())
    }
}

/// Dense indexing of users, recipes and meals for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    recipe_index: BTreeMap<RecipeId, usize>,
    user_index: BTreeMap<UserId, usize>,
    meals: BTreeMap<MealId, [usize; COURSES]>,
}

impl Catalog {
    /// Users are indexed in ascending id order from 0, recipes appearing in
    /// `meals` in ascending id order from 1.
    pub fn new(meals: &[Meal], users: impl IntoIterator<Item = UserId>) -> Self {
        let recipes: BTreeSet<RecipeId> = meals.iter().flat_map(|m| m.recipes()).collect();
        let recipe_index: BTreeMap<RecipeId, usize> = recipes.into_iter().zip(1..).collect();
        let users: BTreeSet<UserId> = users.into_iter().collect();
        let user_index = users.into_iter().zip(0..).collect();
        let meals = meals
            .iter()
            .map(|m| (m.meal_id, m.recipes().map(|r| recipe_index[&r])))
            .collect();
        Catalog { recipe_index, user_index, meals }
    }

    pub fn from_interactions(meals: &[Meal], interactions: &UserMealMatrix) -> Self {
        Catalog::new(meals, interactions.users())
    }

    pub fn n_recipes(&self) -> usize {
        self.recipe_index.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_index.len()
    }

    pub fn n_meals(&self) -> usize {
        self.meals.len()
    }

    pub fn meal_ids(&self) -> impl Iterator<Item = MealId> + '_ {
        self.meals.keys().copied()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = UserId> + '_ {
        self.user_index.keys().copied()
    }

    pub fn user(&self, id: UserId) -> Result<usize> {
        self.user_index.get(&id).copied().ok_or(Error::UnknownId { kind: "user", id })
    }

    pub fn recipe(&self, id: RecipeId) -> Result<usize> {
        self.recipe_index.get(&id).copied().ok_or(Error::UnknownId { kind: "recipe", id })
    }

    /// Dense recipe indices of a meal in course order.
    pub fn meal(&self, id: MealId) -> Result<[usize; COURSES]> {
        self.meals.get(&id).copied().ok_or(Error::UnknownId { kind: "meal", id })
    }

    pub fn init_params(&self, hyper: &HyperParams) -> ModelParams {
        ModelParams::init(self.n_recipes(), self.n_users(), hyper.d, hyper.leaky_slope, hyper.seed)
    }
}

/// History matrix of dense recipe indices, one column per meal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserHistoryInput {
    /// `l` columns; padding columns are `[0, 0, 0]`.
    pub columns: Vec<[usize; COURSES]>,
    /// True for real meal columns.
    pub mask: Vec<bool>,
}

impl UserHistoryInput {
    pub fn from_meals(meals: &[[usize; COURSES]], l: usize) -> Self {
        let mut columns: Vec<[usize; COURSES]> = meals.iter().take(l).copied().collect();
        let mut mask = vec![true; columns.len()];
        columns.resize(l, [0; COURSES]);
        mask.resize(l, false);
        UserHistoryInput { columns, mask }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn real_meals(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Recipe indices for one course across all columns.
    pub fn course_ids(&self, course: usize) -> Vec<usize> {
        self.columns.iter().map(|c| c[course]).collect()
    }
}

/// Chooses up to `l` of `meals` (ascending ids), skipping `exclude`. When more
/// than `l` remain, a seeded uniform subset is kept in ascending order.
pub fn select_history(meals: &[MealId], l: usize, exclude: Option<MealId>, seed: u64) -> Vec<MealId> {
    let pool: Vec<MealId> = meals.iter().copied().filter(|&m| Some(m) != exclude).collect();
    if pool.len() <= l {
        return pool;
    }
    let mut r = rng::stream(seed, &[0x4157]);
    let mut picked = index::sample(&mut r, pool.len(), l).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i]).collect()
}

/// History input for `user` from its interactions in `interactions`.
pub fn build_history(
    user: UserId,
    interactions: &UserMealMatrix,
    catalog: &Catalog,
    l: usize,
    exclude: Option<MealId>,
    seed: u64,
) -> Result<UserHistoryInput> {
    let meals: Vec<MealId> = interactions.meals_of(user).collect();
    let chosen = select_history(&meals, l, exclude, rng::sub_seed(seed, &[user]));
    let triples = chosen.iter().map(|&m| catalog.meal(m)).collect::<Result<Vec<_>>>()?;
    Ok(UserHistoryInput::from_meals(&triples, l))
}

/// `E[recipe] + O[course]`.
pub fn recipe_repr(params: &ModelParams, recipe: usize, course: Category) -> Result<Vec<f64>> {
    let e = params.get(ParamId::Recipe);
    if recipe >= e.rows() {
        return Err(Error::UnknownId { kind: "recipe index", id: recipe as u64 });
    }
    let o = params.get(ParamId::Category).row(course.index());
    Ok(e.row(recipe).iter().zip(o).map(|(a, b)| a + b).collect())
}

/// Where a tape leaf's value came from, for scattering its gradient.
#[derive(Clone, Debug)]
pub enum Slot {
    Whole(ParamId),
    Rows(ParamId, Vec<usize>),
}

/// A computation graph bound to a parameter set. Parameter leaves are
/// recorded so gradients can be scattered back into a [`ModelParams`]-shaped
/// accumulator.
pub struct Tape<'p> {
    pub graph: Graph,
    params: &'p ModelParams,
    slots: Vec<(Var, Slot)>,
    whole: [Option<Var>; 9],
}

/// Intermediate representations of one scored pair.
#[derive(Clone, Copy, Debug)]
pub struct ScoreVars {
    pub meal_repr: Var,
    pub user_repr: Var,
    /// Per-course user summaries (`3 x d`); absent for the meal-wise variants.
    pub category_repr: Option<Var>,
    pub score: Var,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Tape { graph: Graph::new(), params, slots: Vec::new(), whole: [None; 9] }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    fn whole(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.whole[id.index()] {
            return v;
        }
        let v = self.graph.leaf(self.params.get(id).clone());
        self.slots.push((v, Slot::Whole(id)));
        self.whole[id.index()] = Some(v);
        v
    }

    fn gather(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = self.params.get(id);
        let mut data = Vec::with_capacity(rows.len() * table.cols());
        for &r in rows {
            if r >= table.rows() {
                return Err(Error::UnknownId { kind: id.name(), id: r as u64 });
            }
            data.extend_from_slice(table.row(r));
        }
        let v = self.graph.leaf(Matrix::from_vec(rows.len(), table.cols(), data)?);
        self.slots.push((v, Slot::Rows(id, rows.to_vec())));
        Ok(v)
    }

    /// `3 x d` representations of a meal's recipes.
    fn meal_recipes(&mut self, meal: &[usize; COURSES]) -> Result<Var> {
        let e = self.gather(ParamId::Recipe, meal)?;
        let o = self.whole(ParamId::Category);
        self.graph.add(e, o)
    }

    /// Builds the score of `meal` for `user` and returns its intermediates.
    pub fn score(
        &mut self,
        user: usize,
        meal: &[usize; COURSES],
        history: &UserHistoryInput,
        variant: Variant,
    ) -> Result<ScoreVars> {
        if history.real_meals() == 0 {
            return Err(Error::EmptyHistory { user_id: user as u64 });
        }
        let d = self.params.d();
        let meal_rows = self.meal_recipes(meal)?;
        let user_emb = self.gather(ParamId::User, &[user])?;
        let meal_vec = self.graph.attention(user_emb, meal_rows, meal_rows, &[true; COURSES])?;

        let (user_vec, course_vecs) = match variant {
            Variant::Ccmr | Variant::Cw => {
                let o = self.whole(ParamId::Category);
                let mut course_reps = Vec::with_capacity(COURSES);
                for t in 0..COURSES {
                    let e = self.gather(ParamId::Recipe, &history.course_ids(t))?;
                    let course_emb = self.graph.row(o, t)?;
                    let history_recipes = self.graph.add_row(e, course_emb)?;
                    let query = if variant == Variant::Ccmr { self.graph.row(meal_rows, t)? } else { user_emb };
                    course_reps.push(self.graph.attention(query, history_recipes, history_recipes, &history.mask)?);
                }
                let course_vecs = self.graph.stack_rows(&course_reps)?;
                (self.graph.attention(user_emb, course_vecs, course_vecs, &[true; COURSES])?, Some(course_vecs))
            }
            Variant::Mw | Variant::MwF => {
                let query = if variant == Variant::Mw { user_emb } else { meal_vec };
                let mut meal_reps = Vec::with_capacity(history.len());
                let mut padding = None;
                for (col, &real) in history.columns.iter().zip(&history.mask) {
                    if real {
                        let past_meal = self.meal_recipes(col)?;
                        meal_reps.push(self.graph.attention(query, past_meal, past_meal, &[true; COURSES])?);
                    } else {
                        let pad = *padding.get_or_insert_with(|| self.graph.leaf(Matrix::zeros(1, d)));
                        meal_reps.push(pad);
                    }
                }
                let stacked = self.graph.stack_rows(&meal_reps)?;
                (self.graph.attention(user_emb, stacked, stacked, &history.mask)?, None)
            }
        };

        let prod = self.graph.mul(user_vec, meal_vec)?;
        let h0 = self.graph.concat_cols(&[user_vec, meal_vec, prod])?;
        let slope = self.params.leaky_slope;
        let (w1, b1) = (self.whole(ParamId::W1), self.whole(ParamId::B1));
        let h1 = self.graph.leaky_affine(h0, w1, b1, slope)?;
        let (w2, b2) = (self.whole(ParamId::W2), self.whole(ParamId::B2));
        let h2 = self.graph.leaky_affine(h1, w2, b2, slope)?;
        let (w3, b3) = (self.whole(ParamId::W3), self.whole(ParamId::B3));
        let score = self.graph.leaky_affine(h2, w3, b3, slope)?;
        Ok(ScoreVars { meal_repr: meal_vec, user_repr: user_vec, category_repr: course_vecs, score })
    }

    /// Gradients of the last backward pass, one entry per parameter leaf.
    pub fn gradient_parts(&self) -> GradParts {
        GradParts(
            self.slots
                .iter()
                .filter_map(|(var, slot)| self.graph.grad(*var).map(|g| (slot.clone(), g.clone())))
                .collect(),
        )
    }

    /// Adds the gradients of the last backward pass into `grads`.
    pub fn accumulate_grads(&self, grads: &mut ModelParams) {
        self.gradient_parts().add_to(grads);
    }
}

/// Sparse gradient: dense blocks tagged with the parameter rows they cover.
#[derive(Clone, Debug, Default)]
pub struct GradParts(Vec<(Slot, Matrix)>);

impl GradParts {
    pub fn add_to(&self, grads: &mut ModelParams) {
        for (slot, g) in &self.0 {
            match slot {
                Slot::Whole(id) => {
                    for (a, b) in grads.get_mut(*id).as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *a += b;
                    }
                }
                Slot::Rows(id, rows) => {
                    let table = grads.get_mut(*id);
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, b) in table.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

/// The user-queried summary of the meal's recipes.
pub fn meal_repr(params: &ModelParams, user: usize, meal: &[usize; COURSES]) -> Result<Vec<f64>> {
    let mut tape = Tape::new(params);
    let meal_rows = tape.meal_recipes(meal)?;
    let user_emb = tape.gather(ParamId::User, &[user])?;
    let meal_vec = tape.graph.attention(user_emb, meal_rows, meal_rows, &[true; COURSES])?;
    Ok(tape.graph.value(meal_vec).as_slice().to_vec())
}

/// Per-course user summaries (`3 x d`) given the target meal's recipe
/// representations `target` (`3 x d`).
pub fn category_repr(params: &ModelParams, history: &UserHistoryInput, target: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new(params);
    let target = tape.graph.leaf(target.clone());
    let o = tape.whole(ParamId::Category);
    let mut rows = Vec::with_capacity(COURSES);
    for t in 0..COURSES {
        let e = tape.gather(ParamId::Recipe, &history.course_ids(t))?;
        let course_emb = tape.graph.row(o, t)?;
        let history_recipes = tape.graph.add_row(e, course_emb)?;
        let q = tape.graph.row(target, t)?;
        rows.push(tape.graph.attention(q, history_recipes, history_recipes, &history.mask)?);
    }
    let course_vecs = tape.graph.stack_rows(&rows)?;
    Ok(tape.graph.value(course_vecs).clone())
}

/// Attention over the per-course summaries with the user embedding as query.
pub fn user_repr(user_embedding: &[f64], course_reps: &Matrix) -> Result<Vec<f64>> {
    let q = Matrix::row_vector(user_embedding.to_vec());
    let out = crate::autograd::attention(&q, course_reps, course_reps, &[true; COURSES])?;
    Ok(out.output.into_vec())
}

/// Score of `meal` for `user` under `variant`.
pub fn predict_variant(
    params: &ModelParams,
    user: usize,
    meal: &[usize; COURSES],
    history: &UserHistoryInput,
    variant: Variant,
) -> Result<f64> {
    let mut tape = Tape::new(params);
    let vars = tape.score(user, meal, history, variant)?;
    let s = tape.graph.value(vars.score).value();
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("score for user index {user}")));
    }
    Ok(s)
}

pub fn predict(params: &ModelParams, user: usize, meal: &[usize; COURSES], history: &UserHistoryInput) -> Result<f64> {
    predict_variant(params, user, meal, history, Variant::Ccmr)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CCMRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint header, stored as JSON after the magic and version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub d: usize,
    pub l: usize,
    pub n_recipes: usize,
    pub n_categories: usize,
    pub n_users: usize,
    pub variant: Variant,
    pub hyper: HyperParams,
    /// Tensor names and shapes in payload order.
    pub tensors: Vec<(String, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

/// Layout: `CCMRCKPT`, u32 LE version, u32 LE header length, JSON header,
/// then every tensor in declaration order as little-endian f64, row-major.
pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams, hyper: &HyperParams, variant: Variant) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        d: params.d(),
        l: hyper.l,
        n_recipes: params.n_recipes(),
        n_categories: COURSES,
        n_users: params.n_users(),
        variant,
        hyper: hyper.clone(),
        tensors: params
            .iter()
            .map(|(id, m)| (id.name().to_string(), m.rows(), m.cols()))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, m) in params.iter() {
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    r.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.n_categories != COURSES {
        return Err(Error::Checkpoint(format!("{} categories, expected {COURSES}", header.n_categories)));
    }
    let mut params = ModelParams::zeros(header.n_recipes, header.n_users, header.d, header.hyper.leaky_slope);
    let expected: Vec<(String, usize, usize)> = params
        .iter()
        .map(|(id, m)| (id.name().to_string(), m.rows(), m.cols()))
        .collect();
    if expected != header.tensors {
        return Err(Error::Checkpoint("tensor layout does not match the header dimensions".into()));
    }
    let mut buf = [0u8; 8];
    for (_, m) in params.iter_mut() {
        for v in m.as_mut_slice() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok(Checkpoint { header, params })
}
