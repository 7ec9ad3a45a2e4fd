//! Three-course meal construction and user-meal interaction construction.
//!
//! For each user, one appetizer, one main dish and one dessert are drawn at
//! random from the user's remaining positives. The triple becomes a meal when
//! the three interactions happened within `time_window` of each other and the
//! recipes share at least one tag; its recipes then leave the user's pool.
//! Users are afterwards linked to every meal whose three recipes they all
//! liked, and a final k-core over the user-meal graph removes sparse users
//! and meals.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::TimeDelta;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    k_core_filter, threshold_positive, Category, InteractionCorpus, Positives, Recipe, RecipeId, ReviewEvent,
    Timestamp, UserId,
};
use crate::error::{Error, Result};
use crate::{kcore, rng};

pub type MealId = u64;

/// Upper bound on the default per-user attempt budget.
pub const MAX_DEFAULT_ATTEMPTS: usize = 10_000;
/// Attempts granted per possible full triple under the default budget.
pub const ATTEMPTS_PER_TRIPLE: usize = 50;

pub const MEAL_COLUMNS: [&str; 4] = ["meal_id", "appetizer_id", "main_dish_id", "dessert_id"];
pub const USER_MEAL_COLUMNS: [&str; 2] = ["user_id", "meal_id"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Meal {
    pub meal_id: MealId,
    pub appetizer_id: RecipeId,
    pub main_dish_id: RecipeId,
    pub dessert_id: RecipeId,
}

impl Meal {
    /// Member recipes in category order.
    pub fn recipes(&self) -> [RecipeId; 3] {
        [self.appetizer_id, self.main_dish_id, self.dessert_id]
    }
}

/// Sparse binary user-meal interaction matrix.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserMealMatrix {
    pairs: BTreeSet<(UserId, MealId)>,
}

impl UserMealMatrix {
    pub fn new(pairs: impl IntoIterator<Item = (UserId, MealId)>) -> Self {
        UserMealMatrix { pairs: pairs.into_iter().collect() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, user: UserId, meal: MealId) -> bool {
        self.pairs.contains(&(user, meal))
    }

    pub fn insert(&mut self, user: UserId, meal: MealId) -> bool {
        self.pairs.insert((user, meal))
    }

    pub fn remove(&mut self, user: UserId, meal: MealId) -> bool {
        self.pairs.remove(&(user, meal))
    }

    pub fn pairs(&self) -> &BTreeSet<(UserId, MealId)> {
        &self.pairs
    }

    pub fn iter(&self) -> impl Iterator<Item = (UserId, MealId)> + '_ {
        self.pairs.iter().copied()
    }

    /// Meals of one user, ascending.
    pub fn meals_of(&self, user: UserId) -> impl Iterator<Item = MealId> + '_ {
        self.pairs
            .range((user, MealId::MIN)..=(user, MealId::MAX))
            .map(|&(_, m)| m)
    }

    pub fn users(&self) -> BTreeSet<UserId> {
        self.pairs.iter().map(|&(u, _)| u).collect()
    }

    /// Meal sets keyed by user.
    pub fn by_user(&self) -> BTreeMap<UserId, BTreeSet<MealId>> {
        let mut out: BTreeMap<UserId, BTreeSet<MealId>> = BTreeMap::new();
        for &(u, m) in &self.pairs {
            out.entry(u).or_default().insert(m);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuilderConfig {
    /// Maximum spread between the three interaction timestamps of a meal (exclusive).
    pub time_window: TimeDelta,
    /// Sampling attempts per user. `None` uses
    /// `min(ATTEMPTS_PER_TRIPLE * possible_triples, MAX_DEFAULT_ATTEMPTS)`.
    pub max_attempts_per_user: Option<usize>,
    pub k_core: usize,
    pub rng_seed: u64,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        BuilderConfig {
            time_window: TimeDelta::days(30),
            max_attempts_per_user: None,
            k_core: 5,
            rng_seed: 0,
        }
    }
}

impl BuilderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_window <= TimeDelta::zero() {
            return Err(Error::Config("time_window must be positive".into()));
        }
        if self.max_attempts_per_user == Some(0) {
            return Err(Error::Config("max_attempts_per_user must be at least 1".into()));
        }
        Ok(())
    }

    fn attempt_budget(&self, pools: &[Vec<RecipeId>; 3]) -> usize {
        self.max_attempts_per_user.unwrap_or_else(|| {
            let triples = pools.iter().fold(1usize, |acc, p| acc.saturating_mul(p.len()));
            triples.saturating_mul(ATTEMPTS_PER_TRIPLE).min(MAX_DEFAULT_ATTEMPTS)
        })
    }
}

/// Number of tags common to all three recipes.
pub fn shared_tag_count(r1: &Recipe, r2: &Recipe, r3: &Recipe) -> usize {
    let s2 = r2.tag_set();
    let s3 = r3.tag_set();
    r1.tag_set()
        .into_iter()
        .filter(|t| s2.contains(t) && s3.contains(t))
        .count()
}

/// `max(t) - min(t) < time_window`.
pub fn within_window(t1: Timestamp, t2: Timestamp, t3: Timestamp, time_window: TimeDelta) -> bool {
    let hi = t1.max(t2).max(t3);
    let lo = t1.min(t2).min(t3);
    hi - lo < time_window
}

/// Per-user meal construction. Returns each emitted meal with the user whose
/// pool produced it. A triple already emitted by an earlier user reuses that
/// meal id and is not repeated in the output.
pub fn construct_meals_with_origin(corpus: &InteractionCorpus, config: &BuilderConfig) -> Vec<(Meal, UserId)> {
    let mut out = Vec::new();
    let mut seen: HashMap<[RecipeId; 3], MealId> = HashMap::new();
    for &user in &corpus.users {
        let mut pools: [Vec<RecipeId>; 3] = Default::default();
        for (r, _) in corpus.user_positives(user) {
            if let Some(recipe) = corpus.recipes.get(&r) {
                pools[recipe.category.index()].push(r);
            }
        }
        let budget = config.attempt_budget(&pools);
        let mut rng = rng::stream(config.rng_seed, &[user]);
        let mut attempts = 0usize;
        while pools.iter().all(|p| !p.is_empty()) && attempts < budget {
            attempts += 1;
            let picks = [
                rng.gen_range(0..pools[0].len()),
                rng.gen_range(0..pools[1].len()),
                rng.gen_range(0..pools[2].len()),
            ];
            let triple = [pools[0][picks[0]], pools[1][picks[1]], pools[2][picks[2]]];
            let ts = triple.map(|r| corpus.timestamp(user, r).expect("pool recipe has a timestamp"));
            if !within_window(ts[0], ts[1], ts[2], config.time_window) {
                continue;
            }
            let [a, s, d] = triple.map(|r| &corpus.recipes[&r]);
            if shared_tag_count(a, s, d) < 1 {
                continue;
            }
            let next_id = seen.len() as MealId;
            seen.entry(triple).or_insert_with(|| {
                out.push((
                    Meal {
                        meal_id: next_id,
                        appetizer_id: triple[0],
                        main_dish_id: triple[1],
                        dessert_id: triple[2],
                    },
                    user,
                ));
                next_id
            });
            for (pool, &i) in pools.iter_mut().zip(&picks) {
                pool.swap_remove(i);
            }
        }
    }
    out
}

pub fn construct_meals(corpus: &InteractionCorpus, config: &BuilderConfig) -> Vec<Meal> {
    construct_meals_with_origin(corpus, config)
        .into_iter()
        .map(|(m, _)| m)
        .collect()
}

/// Links each user to every meal whose three recipes are still in the user's
/// positive pool, scanning meals by ascending id and consuming the matched
/// recipes.
pub fn construct_user_meal(corpus: &InteractionCorpus, meals: &[Meal]) -> UserMealMatrix {
    let mut ordered: Vec<&Meal> = meals.iter().collect();
    ordered.sort_by_key(|m| m.meal_id);
    let mut out = UserMealMatrix::default();
    for &user in &corpus.users {
        let mut pool: BTreeSet<RecipeId> = corpus.user_positives(user).map(|(r, _)| r).collect();
        for meal in &ordered {
            let recipes = meal.recipes();
            if recipes.iter().all(|r| pool.contains(r)) {
                out.insert(user, meal.meal_id);
                for r in &recipes {
                    pool.remove(r);
                }
            }
        }
    }
    out
}

/// Removes meals with fewer than `k` users and users with fewer than `k`
/// meals until a fixpoint.
pub fn final_core_filter(meals: &[Meal], interactions: &UserMealMatrix, k: usize) -> (Vec<Meal>, UserMealMatrix) {
    let known: BTreeSet<MealId> = meals.iter().map(|m| m.meal_id).collect();
    let edges: BTreeSet<(UserId, MealId)> = interactions
        .iter()
        .filter(|(_, m)| known.contains(m))
        .collect();
    let kept = kcore::prune(&edges, k);
    let live: BTreeSet<MealId> = kept.iter().map(|&(_, m)| m).collect();
    let meals = meals.iter().filter(|m| live.contains(&m.meal_id)).copied().collect();
    (meals, UserMealMatrix { pairs: kept })
}

/// Reasons a meal fails the construction invariants.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MealViolation {
    MissingRecipe(RecipeId),
    WrongCategory { recipe: RecipeId, expected: Category },
    NoSharedTag,
    OutsideWindow,
    NotLiked(RecipeId),
}

/// Checks one meal against the recipe catalogue and, when `origin` is given,
/// against that user's interaction timestamps.
pub fn check_meal(
    corpus: &InteractionCorpus,
    meal: &Meal,
    origin: Option<UserId>,
    time_window: TimeDelta,
) -> Vec<MealViolation> {
    let mut v = Vec::new();
    let mut members = Vec::with_capacity(3);
    for (r, cat) in meal.recipes().into_iter().zip(Category::ALL) {
        match corpus.recipes.get(&r) {
            None => v.push(MealViolation::MissingRecipe(r)),
            Some(recipe) if recipe.category != cat => {
                v.push(MealViolation::WrongCategory { recipe: r, expected: cat })
            }
            Some(recipe) => members.push(recipe),
        }
    }
    if members.len() == 3 && shared_tag_count(members[0], members[1], members[2]) < 1 {
        v.push(MealViolation::NoSharedTag);
    }
    if let Some(user) = origin {
        let ts: Vec<Option<Timestamp>> = meal.recipes().iter().map(|&r| corpus.timestamp(user, r)).collect();
        for (r, t) in meal.recipes().iter().zip(&ts) {
            if t.is_none() {
                v.push(MealViolation::NotLiked(*r));
            }
        }
        if let [Some(a), Some(b), Some(c)] = ts[..] {
            if !within_window(a, b, c, time_window) {
                v.push(MealViolation::OutsideWindow);
            }
        }
    }
    v
}

/// Pairs where the user is missing a positive for some member recipe.
pub fn unliked_pairs(corpus: &InteractionCorpus, meals: &[Meal], interactions: &UserMealMatrix) -> Vec<(UserId, MealId)> {
    let by_id: HashMap<MealId, &Meal> = meals.iter().map(|m| (m.meal_id, m)).collect();
    interactions
        .iter()
        .filter(|&(u, m)| match by_id.get(&m) {
            None => true,
            Some(meal) => meal.recipes().iter().any(|&r| corpus.timestamp(u, r).is_none()),
        })
        .collect()
}

pub fn write_meals<W: Write>(writer: W, meals: &[Meal]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MEAL_COLUMNS)?;
    for m in meals {
        w.write_record([
            m.meal_id.to_string(),
            m.appetizer_id.to_string(),
            m.main_dish_id.to_string(),
            m.dessert_id.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_u64_row<const N: usize>(record: &csv::StringRecord, header: &[&str; N]) -> Result<[u64; N]> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    let mut out = [0u64; N];
    for (i, col) in header.iter().enumerate() {
        let text = record.get(i).unwrap_or("").trim();
        out[i] = text.parse().map_err(|_| Error::MalformedRow {
            line,
            reason: format!("{col} = {text:?} is not an integer"),
        })?;
    }
    Ok(out)
}

fn check_header<const N: usize>(rdr: &mut csv::Reader<impl Read>, expected: &[&str; N]) -> Result<()> {
    let headers = rdr.headers()?;
    for (i, col) in expected.iter().enumerate() {
        if headers.get(i).map(|h| h.trim().trim_start_matches('\u{feff}')) != Some(*col) {
            return Err(Error::MissingColumn(col.to_string()));
        }
    }
    Ok(())
}

pub fn read_meals<R: Read>(reader: R) -> Result<Vec<Meal>> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(&mut rdr, &MEAL_COLUMNS)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let [meal_id, appetizer_id, main_dish_id, dessert_id] = parse_u64_row(&record?, &MEAL_COLUMNS)?;
        out.push(Meal { meal_id, appetizer_id, main_dish_id, dessert_id });
    }
    Ok(out)
}

pub fn write_user_meal<W: Write>(writer: W, interactions: &UserMealMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(USER_MEAL_COLUMNS)?;
    for (u, m) in interactions.iter() {
        w.write_record([u.to_string(), m.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_user_meal<R: Read>(reader: R) -> Result<UserMealMatrix> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(&mut rdr, &USER_MEAL_COLUMNS)?;
    let mut out = UserMealMatrix::default();
    for record in rdr.records() {
        let [u, m] = parse_u64_row(&record?, &USER_MEAL_COLUMNS)?;
        out.insert(u, m);
    }
    Ok(out)
}

/// Output of the full construction pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltDataset {
    /// Recipe-level corpus after thresholding and the k-core filter, before
    /// meal construction.
    pub filtered: InteractionCorpus,
    /// Meals as constructed, before the final core filter.
    pub constructed_meals: Vec<Meal>,
    pub meals: Vec<Meal>,
    pub interactions: UserMealMatrix,
    /// `filtered` restricted to the final users and to recipes in final meals.
    pub corpus: InteractionCorpus,
}

/// Thresholding, recipe k-core, meal construction, user-meal construction and
/// the final core filter, in that order.
pub fn build_dataset(
    recipes: Vec<Recipe>,
    events: &[ReviewEvent],
    threshold: u8,
    config: &BuilderConfig,
) -> Result<BuiltDataset> {
    config.validate()?;
    let positives = threshold_positive(events, threshold);
    let filtered = k_core_filter(&InteractionCorpus::new(recipes, positives), config.k_core);
    let constructed_meals = construct_meals(&filtered, config);
    let raw_interactions = construct_user_meal(&filtered, &constructed_meals);
    let (meals, interactions) = final_core_filter(&constructed_meals, &raw_interactions, config.k_core);
    let corpus = restrict_corpus(&filtered, &interactions.users(), &meals);
    Ok(BuiltDataset { filtered, constructed_meals, meals, interactions, corpus })
}

/// Keeps the given users and the recipes that appear in `meals`.
pub fn restrict_corpus(corpus: &InteractionCorpus, users: &BTreeSet<UserId>, meals: &[Meal]) -> InteractionCorpus {
    let recipes: BTreeSet<RecipeId> = meals.iter().flat_map(|m| m.recipes()).collect();
    let positives: Positives = corpus
        .positives
        .iter()
        .filter(|((u, r), _)| users.contains(u) && recipes.contains(r))
        .map(|(&k, &t)| (k, t))
        .collect();
    InteractionCorpus {
        users: positives.keys().map(|&(u, _)| u).collect(),
        recipes: corpus
            .recipes
            .iter()
            .filter(|(id, _)| recipes.contains(id))
            .map(|(&id, r)| (id, r.clone()))
            .collect(),
        positives,
    }
}
