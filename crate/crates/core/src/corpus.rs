//! Recipe and review ingestion, positive-feedback thresholding, k-core
//! filtering and dataset statistics.
//!
//! Column names follow the `recipe.csv` / `user_recipe.csv` layout of the
//! Allrecipes crawl. Nested fields (reviews, nutrition, ingredients, ...)
//! are carried through as opaque text.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::builder::{Meal, UserMealMatrix};
use crate::error::{Error, Result};
use crate::kcore;

pub type UserId = u64;
pub type RecipeId = u64;
pub type Timestamp = NaiveDateTime;

/// Default rating at or above which a review counts as positive feedback.
pub const DEFAULT_POSITIVE_THRESHOLD: u8 = 4;
/// Default minimum degree for the k-core filter.
pub const DEFAULT_K_CORE: usize = 5;

/// Ordered columns of `recipe.csv`.
pub const RECIPE_COLUMNS: [&str; 11] = [
    "recipe_id",
    "recipe_name",
    "aver_rate",
    "image_url",
    "category",
    "ingredients",
    "cooking_directions",
    "nutrition",
    "review_num",
    "reviews",
    "tags",
];
const RECIPE_REQUIRED: [&str; 5] = ["recipe_id", "recipe_name", "aver_rate", "category", "tags"];

/// Ordered columns of `user_recipe.csv`.
pub const REVIEW_COLUMNS: [&str; 4] = ["user_id", "recipe_id", "rating", "dateLastModified"];

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Course a recipe is served as. The ordering is the row order used by the
/// model (appetizer, main dish, dessert).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Appetizer,
    MainDish,
    Dessert,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Appetizer, Category::MainDish, Category::Dessert];

    pub fn index(self) -> usize {
        match self {
            Category::Appetizer => 0,
            Category::MainDish => 1,
            Category::Dessert => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Appetizer => "appetizer",
            Category::MainDish => "main_dish",
            Category::Dessert => "dessert",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        match norm.as_str() {
            "appetizer" | "appetizers" => Ok(Category::Appetizer),
            "main_dish" | "main_dishes" | "main" => Ok(Category::MainDish),
            "dessert" | "desserts" => Ok(Category::Dessert),
            _ => Err(s.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub recipe_id: RecipeId,
    pub name: String,
    pub category: Category,
    /// Normalized tag tokens in source order.
    pub tags: Vec<String>,
    pub aver_rate: f64,
    /// Remaining `recipe.csv` columns, untouched.
    pub raw_fields: BTreeMap<String, String>,
}

impl Recipe {
    pub fn new(recipe_id: RecipeId, name: impl Into<String>, category: Category, tags: &[&str]) -> Self {
        Recipe {
            recipe_id,
            name: name.into(),
            category,
            tags: normalize_tags(&tags.join(";")),
            aver_rate: 0.0,
            raw_fields: BTreeMap::new(),
        }
    }

    pub fn tag_set(&self) -> BTreeSet<&str> {
        self.tags.iter().map(String::as_str).collect()
    }
}

/// Splits a `;`-delimited tag field into lowercase, trimmed, non-empty tokens.
pub fn normalize_tags(field: &str) -> Vec<String> {
    field
        .split(';')
        .map(|t| t.trim().to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReviewEvent {
    pub user_id: UserId,
    pub recipe_id: RecipeId,
    pub rating: u8,
    pub timestamp: Timestamp,
}

/// Positive user-recipe pairs keyed by `(user_id, recipe_id)`, valued by the
/// interaction timestamp.
pub type Positives = BTreeMap<(UserId, RecipeId), Timestamp>;

/// Users, recipes and their positive interactions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionCorpus {
    pub users: BTreeSet<UserId>,
    pub recipes: BTreeMap<RecipeId, Recipe>,
    pub positives: Positives,
}

impl InteractionCorpus {
    /// Assembles a corpus, dropping positives that reference unknown recipes.
    /// The user set is the set of users with at least one positive.
    pub fn new(recipes: impl IntoIterator<Item = Recipe>, positives: Positives) -> Self {
        let recipes: BTreeMap<_, _> = recipes.into_iter().map(|r| (r.recipe_id, r)).collect();
        let positives: Positives = positives
            .into_iter()
            .filter(|((_, r), _)| recipes.contains_key(r))
            .collect();
        let users = positives.keys().map(|&(u, _)| u).collect();
        InteractionCorpus { users, recipes, positives }
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.recipes.is_empty() && self.positives.is_empty()
    }

    /// Positive recipes of one user with their timestamps, ascending by recipe id.
    pub fn user_positives(&self, user: UserId) -> impl Iterator<Item = (RecipeId, Timestamp)> + '_ {
        self.positives
            .range((user, RecipeId::MIN)..=(user, RecipeId::MAX))
            .map(|(&(_, r), &t)| (r, t))
    }

    pub fn timestamp(&self, user: UserId, recipe: RecipeId) -> Option<Timestamp> {
        self.positives.get(&(user, recipe)).copied()
    }

    pub fn category_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for r in self.recipes.values() {
            counts[r.category.index()] += 1;
        }
        counts
    }
}

fn header_index(headers: &csv::StringRecord) -> HashMap<String, usize> {
    headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().trim_start_matches('\u{feff}').to_string(), i))
        .collect()
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn field<'r>(record: &'r csv::StringRecord, idx: &HashMap<String, usize>, name: &str) -> &'r str {
    idx.get(name).and_then(|&i| record.get(i)).unwrap_or("")
}

fn parse_num<T: FromStr>(text: &str, line: u64, column: &str) -> Result<T> {
    text.trim().parse().map_err(|_| Error::MalformedRow {
        line,
        reason: format!("{column} = {text:?} is not a number"),
    })
}

/// Reads `recipe.csv`.
pub fn parse_recipes<R: Read>(reader: R) -> Result<Vec<Recipe>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let idx = header_index(rdr.headers()?);
    for col in RECIPE_REQUIRED {
        if !idx.contains_key(col) {
            return Err(Error::MissingColumn(col.to_string()));
        }
    }

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::MalformedRow { line, reason: e.to_string() }
        })?;
        let line = record_line(&record);
        let recipe_id: RecipeId = parse_num(field(&record, &idx, "recipe_id"), line, "recipe_id")?;
        if !seen.insert(recipe_id) {
            return Err(Error::DuplicateRecipe { line, recipe_id });
        }
        let cat_text = field(&record, &idx, "category");
        let category = cat_text
            .parse::<Category>()
            .map_err(|token| Error::UnknownCategory { line, token })?;
        let rate_text = field(&record, &idx, "aver_rate");
        let aver_rate: f64 = if rate_text.trim().is_empty() {
            0.0
        } else {
            parse_num(rate_text, line, "aver_rate")?
        };
        if !(0.0..=5.0).contains(&aver_rate) {
            return Err(Error::MalformedRow {
                line,
                reason: format!("aver_rate {aver_rate} outside [0, 5]"),
            });
        }
        let raw_fields = idx
            .iter()
            .filter(|(name, _)| !RECIPE_REQUIRED.contains(&name.as_str()))
            .map(|(name, &i)| (name.clone(), record.get(i).unwrap_or("").to_string()))
            .collect();
        out.push(Recipe {
            recipe_id,
            name: field(&record, &idx, "recipe_name").to_string(),
            category,
            tags: normalize_tags(field(&record, &idx, "tags")),
            aver_rate,
            raw_fields,
        });
    }
    Ok(out)
}

/// Writes recipes with the full column layout of `recipe.csv`.
pub fn write_recipes<W: Write>(writer: W, recipes: &[Recipe]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RECIPE_COLUMNS)?;
    for r in recipes {
        let id = r.recipe_id.to_string();
        let rate = r.aver_rate.to_string();
        let tags = r.tags.join(";");
        let row: Vec<&str> = RECIPE_COLUMNS
            .iter()
            .map(|&col| match col {
                "recipe_id" => id.as_str(),
                "recipe_name" => r.name.as_str(),
                "aver_rate" => rate.as_str(),
                "category" => r.category.as_str(),
                "tags" => tags.as_str(),
                other => r.raw_fields.get(other).map(String::as_str).unwrap_or(""),
            })
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses an ISO-8601 local timestamp, truncated to whole seconds.
pub fn parse_timestamp(text: &str) -> Option<Timestamp> {
    let text = text.trim();
    let parsed = NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M:%S%.f")
        .or_else(|_| NaiveDateTime::parse_from_str(text, "%Y-%m-%d %H:%M:%S%.f"))
        .ok()?;
    parsed.with_nanosecond(0)
}

pub fn format_timestamp(ts: &Timestamp) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

/// Reads `user_recipe.csv`. Events are returned in file order without any
/// deduplication.
pub fn parse_reviews<R: Read>(reader: R) -> Result<Vec<ReviewEvent>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let idx = header_index(rdr.headers()?);
    for col in REVIEW_COLUMNS {
        if !idx.contains_key(col) {
            return Err(Error::MissingColumn(col.to_string()));
        }
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::MalformedRow { line, reason: e.to_string() }
        })?;
        let line = record_line(&record);
        let user_id = parse_num(field(&record, &idx, "user_id"), line, "user_id")?;
        let recipe_id = parse_num(field(&record, &idx, "recipe_id"), line, "recipe_id")?;
        let rating: i64 = parse_num(field(&record, &idx, "rating"), line, "rating")?;
        if !(1..=5).contains(&rating) {
            return Err(Error::RatingRange { line, rating });
        }
        let ts_text = field(&record, &idx, "dateLastModified");
        let timestamp = parse_timestamp(ts_text).ok_or_else(|| Error::Timestamp {
            line,
            text: ts_text.to_string(),
        })?;
        out.push(ReviewEvent {
            user_id,
            recipe_id,
            rating: rating as u8,
            timestamp,
        });
    }
    Ok(out)
}

pub fn write_reviews<W: Write>(writer: W, events: &[ReviewEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REVIEW_COLUMNS)?;
    for e in events {
        w.write_record([
            e.user_id.to_string(),
            e.recipe_id.to_string(),
            e.rating.to_string(),
            format_timestamp(&e.timestamp),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Keeps events rated at or above `threshold`. When a pair is reviewed more
/// than once, the latest qualifying timestamp is kept.
pub fn threshold_positive(events: &[ReviewEvent], threshold: u8) -> Positives {
    let mut out = Positives::new();
    for e in events.iter().filter(|e| e.rating >= threshold) {
        out.entry((e.user_id, e.recipe_id))
            .and_modify(|t| {
                if e.timestamp > *t {
                    *t = e.timestamp;
                }
            })
            .or_insert(e.timestamp);
    }
    out
}

/// Iteratively drops users and recipes with fewer than `k` positives until
/// none remain. The result is the maximal k-core of the bipartite
/// user-recipe graph.
pub fn k_core_filter(corpus: &InteractionCorpus, k: usize) -> InteractionCorpus {
    let edges: BTreeSet<(UserId, RecipeId)> = corpus.positives.keys().copied().collect();
    let kept = kcore::prune(&edges, k);
    let positives: Positives = kept.iter().map(|key| (*key, corpus.positives[key])).collect();
    let users: BTreeSet<UserId> = kept.iter().map(|&(u, _)| u).collect();
    let live_recipes: BTreeSet<RecipeId> = kept.iter().map(|&(_, r)| r).collect();
    let recipes = corpus
        .recipes
        .iter()
        .filter(|(id, _)| live_recipes.contains(id))
        .map(|(&id, r)| (id, r.clone()))
        .collect();
    InteractionCorpus { users, recipes, positives }
}

/// Dataset size, density and per-course recipe counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub bundles: usize,
    pub items: usize,
    pub user_bundle: usize,
    pub user_item: usize,
    pub bundle_item: usize,
    pub avg_bundle_interactions_per_user: f64,
    pub avg_item_interactions_per_user: f64,
    pub avg_bundle_size: f64,
    /// Percent.
    pub user_item_density: f64,
    /// Percent.
    pub user_bundle_density: f64,
    pub appetizers: usize,
    pub main_dishes: usize,
    pub desserts: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn corpus_stats(corpus: &InteractionCorpus, meals: &[Meal], interactions: &UserMealMatrix) -> CorpusStats {
    let users = corpus.users.len();
    let items = corpus.recipes.len();
    let bundles = meals.len();
    let memberships: BTreeSet<(u64, RecipeId)> = meals
        .iter()
        .flat_map(|m| m.recipes().into_iter().map(move |r| (m.meal_id, r)))
        .collect();
    let bundle_item = memberships.len();
    let user_bundle = interactions.len();
    let user_item = corpus.positives.len();
    let [appetizers, main_dishes, desserts] = corpus.category_counts();
    CorpusStats {
        users,
        bundles,
        items,
        user_bundle,
        user_item,
        bundle_item,
        avg_bundle_interactions_per_user: ratio(user_bundle, users),
        avg_item_interactions_per_user: ratio(user_item, users),
        avg_bundle_size: ratio(bundle_item, bundles),
        user_item_density: 100.0 * ratio(user_item, users * items),
        user_bundle_density: 100.0 * ratio(user_bundle, users * bundles),
        appetizers,
        main_dishes,
        desserts,
    }
}

impl CorpusStats {
    /// Flat `key: value` report, one statistic per line.
    pub fn to_report(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(": ");
            s.push_str(&v);
            s.push('\n');
        };
        put("users", self.users.to_string());
        put("bundles", self.bundles.to_string());
        put("items", self.items.to_string());
        put("user_bundle", self.user_bundle.to_string());
        put("user_item", self.user_item.to_string());
        put("bundle_item", self.bundle_item.to_string());
        put("avg_bundle_interactions_per_user", format!("{:.2}", self.avg_bundle_interactions_per_user));
        put("avg_item_interactions_per_user", format!("{:.2}", self.avg_item_interactions_per_user));
        put("avg_bundle_size", format!("{:.2}", self.avg_bundle_size));
        put("user_item_density_pct", format!("{:.2}", self.user_item_density));
        put("user_bundle_density_pct", format!("{:.2}", self.user_bundle_density));
        put("appetizers", self.appetizers.to_string());
        put("main_dishes", self.main_dishes.to_string());
        put("desserts", self.desserts.to_string());
        s
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
