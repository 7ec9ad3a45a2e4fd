//! Seeded synthetic review logs with a latent-factor taste model.
//!
//! Every recipe and user carries a latent vector. A user reviews recipes
//! drawn with probability increasing in affinity (dot product plus a recipe
//! popularity term), and rates the top `positive_rate` share of reviewed
//! recipes with 4 or 5 stars. Tags follow a Zipf popularity curve so that
//! three recipes often share one.

use chrono::TimeDelta;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{parse_timestamp, Category, Recipe, ReviewEvent, Timestamp};
use crate::error::{Error, Result};
use crate::rng;

/// Start of the simulated review period.
pub const ORIGIN: &str = "2015-01-01T00:00:00";

/// Inverse temperature of the review-selection softmax.
const SELECTION_SHARPNESS: f64 = 4.0;
/// Scale of the per-recipe popularity offset added to affinity.
const POPULARITY_SCALE: f64 = 1.0;

const STREAM_RECIPES: u64 = 1;
const STREAM_USERS: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_recipes: usize,
    /// Appetizer, main dish and dessert proportions.
    pub category_mix: [f64; 3],
    pub tag_vocab_size: usize,
    /// Inclusive range.
    pub tags_per_recipe: (usize, usize),
    /// Inclusive range.
    pub events_per_user: (usize, usize),
    pub positive_rate: f64,
    pub time_span: TimeDelta,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_users: 200,
            n_recipes: 600,
            category_mix: [1.0 / 3.0; 3],
            tag_vocab_size: 40,
            tags_per_recipe: (3, 6),
            events_per_user: (120, 200),
            positive_rate: 0.5,
            time_span: TimeDelta::days(120),
            latent_dim: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_users == 0 || self.n_recipes == 0 || self.tag_vocab_size == 0 || self.latent_dim == 0 {
            return bad("n_users, n_recipes, tag_vocab_size and latent_dim must be positive");
        }
        if self.category_mix.iter().any(|p| !(0.0..=1.0).contains(p))
            || (self.category_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("category_mix must be three proportions summing to 1");
        }
        let (tl, th) = self.tags_per_recipe;
        if tl == 0 || tl > th || th > self.tag_vocab_size {
            return bad("tags_per_recipe must be a non-empty range within the tag vocabulary");
        }
        let (el, eh) = self.events_per_user;
        if el == 0 || el > eh {
            return bad("events_per_user must be a non-empty positive range");
        }
        if !(self.positive_rate > 0.0 && self.positive_rate <= 1.0) {
            return bad("positive_rate must lie in (0, 1]");
        }
        if self.time_span <= TimeDelta::zero() {
            return bad("time_span must be positive");
        }
        Ok(())
    }

    /// Recipe count per category: rounded proportions, remainder to desserts.
    pub fn category_counts(&self) -> [usize; 3] {
        let n = self.n_recipes;
        let a = ((n as f64 * self.category_mix[0]).round() as usize).min(n);
        let s = ((n as f64 * self.category_mix[1]).round() as usize).min(n - a);
        [a, s, n - a - s]
    }
}

fn uniform_vec(rng: &mut rng::Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws `k` distinct indices with probability proportional to `weights`
/// via exponential-race keys.
fn weighted_distinct(rng: &mut rng::Rng, weights: &[f64], k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Generates recipes and review events. Recipe ids run `1..=n_recipes`, user
/// ids `1..=n_users`; events are grouped by user and sorted by time.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<Recipe>, Vec<ReviewEvent>)> {
    spec.validate()?;
    let origin: Timestamp = parse_timestamp(ORIGIN).expect("valid origin");

    let mut rrng = rng::stream(spec.seed, &[STREAM_RECIPES]);
    let counts = spec.category_counts();
    let mut categories: Vec<Category> = Category::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
        .collect();
    categories.shuffle(&mut rrng);

    let tag_weights: Vec<f64> = (0..spec.tag_vocab_size).map(|i| 1.0 / (i + 1) as f64).collect();
    let mut recipes = Vec::with_capacity(spec.n_recipes);
    let mut recipe_latent = Vec::with_capacity(spec.n_recipes);
    let mut popularity = Vec::with_capacity(spec.n_recipes);
    for (i, &category) in categories.iter().enumerate() {
        let n_tags = rrng.gen_range(spec.tags_per_recipe.0..=spec.tags_per_recipe.1);
        let mut tag_idx = weighted_distinct(&mut rrng, &tag_weights, n_tags);
        tag_idx.sort_unstable();
        let tags: Vec<String> = tag_idx.iter().map(|t| format!("tag-{t:02}")).collect();
        let tag_refs: Vec<&str> = tags.iter().map(String::as_str).collect();
        let mut recipe = Recipe::new(i as u64 + 1, format!("synthetic recipe {}", i + 1), category, &tag_refs);
        recipe.aver_rate = 0.0;
        recipes.push(recipe);
        recipe_latent.push(uniform_vec(&mut rrng, spec.latent_dim));
        popularity.push(POPULARITY_SCALE * rrng.gen_range(-1.0..1.0));
    }

    let span_secs = spec.time_span.num_seconds().max(1);
    let mut events = Vec::new();
    let mut rating_sum = vec![0u64; spec.n_recipes];
    let mut rating_n = vec![0u64; spec.n_recipes];
    for u in 0..spec.n_users {
        let user_id = u as u64 + 1;
        let mut urng = rng::stream(spec.seed, &[STREAM_USERS, user_id]);
        let taste = uniform_vec(&mut urng, spec.latent_dim);
        let affinity: Vec<f64> = recipe_latent
            .iter()
            .zip(&popularity)
            .map(|(q, b)| dot(&taste, q) + b)
            .collect();
        let n_events = urng
            .gen_range(spec.events_per_user.0..=spec.events_per_user.1)
            .min(spec.n_recipes);
        let weights: Vec<f64> = affinity.iter().map(|a| (SELECTION_SHARPNESS * a).exp()).collect();
        let mut chosen = weighted_distinct(&mut urng, &weights, n_events);
        chosen.sort_by(|&a, &b| affinity[b].total_cmp(&affinity[a]).then(a.cmp(&b)));

        let n_pos = ((spec.positive_rate * n_events as f64).round() as usize).clamp(1, n_events);
        let mut user_events: Vec<ReviewEvent> = chosen
            .iter()
            .enumerate()
            .map(|(rank, &r)| {
                let rating = if rank < n_pos {
                    if rank < n_pos.div_ceil(2) { 5 } else { 4 }
                } else {
                    let below = (rank - n_pos) * 3 / (n_events - n_pos).max(1);
                    3 - below.min(2) as u8
                };
                let offset = urng.gen_range(0..span_secs);
                ReviewEvent {
                    user_id,
                    recipe_id: r as u64 + 1,
                    rating,
                    timestamp: origin + TimeDelta::seconds(offset),
                }
            })
            .collect();
        user_events.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.recipe_id.cmp(&b.recipe_id)));
        for e in &user_events {
            rating_sum[e.recipe_id as usize - 1] += e.rating as u64;
            rating_n[e.recipe_id as usize - 1] += 1;
        }
        events.extend(user_events);
    }
    for (i, r) in recipes.iter_mut().enumerate() {
        if rating_n[i] > 0 {
            r.aver_rate = rating_sum[i] as f64 / rating_n[i] as f64;
        }
        r.raw_fields.insert("review_num".into(), rating_n[i].to_string());
    }
    Ok((recipes, events))
}
