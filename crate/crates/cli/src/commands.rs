use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mealrec::builder::{self, MealId};
use mealrec::ccmr::{self, Catalog, HyperParams, ModelParams, Variant};
use mealrec::corpus::{self, InteractionCorpus};
use mealrec::evaluator::{self, ModelScorer, DEFAULT_KS, DEFAULT_NEGATIVES};
use mealrec::synthgen::{self, SynthSpec};
use mealrec::trainer;

use crate::config::{input, RunConfig};
use crate::{usage, BuildArgs, DataArgs, EvalArgs, Failure, HyperArgs, SplitArgs, StatsArgs, SynthArgs, TrainArgs};

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
    if v.is_some() {
        slot.clone_from(v);
    }
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    set_path(&mut cfg.paths.recipe_csv, &d.recipes);
    set_path(&mut cfg.paths.review_csv, &d.reviews);
    set_path(&mut cfg.paths.meal_csv, &d.meals);
    set_path(&mut cfg.paths.user_meal_csv, &d.user_meal);
}

fn apply_hyper(cfg: &mut RunConfig, h: &HyperArgs) {
    let k = &mut cfg.hyper;
    set(&mut k.d, h.d);
    set(&mut k.l, h.l);
    set(&mut k.batch_size, h.batch);
    set(&mut k.learning_rate, h.lr);
    set(&mut k.epochs, h.epochs);
    set(&mut k.l2_coeff, h.l2);
    set(&mut k.negatives_per_positive, h.negatives_per_positive);
    set(&mut k.holdout_fraction, h.holdout_fraction);
    set(&mut cfg.seeds.train, h.train_seed);
}

fn apply_split(cfg: &mut RunConfig, s: &SplitArgs) {
    set(&mut cfg.seeds.split, s.split_seed);
    set(&mut cfg.seeds.negatives, s.negatives_seed);
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating directory {}", parent.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

/// Writes `body` under the report header.
fn write_report(cfg: &RunConfig, path: &Path, body: &[u8]) -> anyhow::Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{}", cfg.report_header())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let mut spec = SynthSpec { n_users: a.users, n_recipes: a.recipes, seed: a.seed, ..SynthSpec::default() };
    set(&mut spec.events_per_user.0, a.min_events);
    set(&mut spec.events_per_user.1, a.max_events);
    set(&mut spec.tag_vocab_size, a.tag_vocab);
    set(&mut spec.positive_rate, a.positive_rate);
    usage(spec.validate().map_err(anyhow::Error::from))?;
    let (recipes, events) = synthgen::generate(&spec)?;
    let recipe_path = a.out_dir.join("recipe.csv");
    let review_path = a.out_dir.join("user_recipe.csv");
    let mut w = create(&recipe_path)?;
    corpus::write_recipes(&mut w, &recipes).with_context(|| format!("writing {}", recipe_path.display()))?;
    w.flush()?;
    let mut w = create(&review_path)?;
    corpus::write_reviews(&mut w, &events).with_context(|| format!("writing {}", review_path.display()))?;
    w.flush()?;
    println!("{} recipes -> {}", recipes.len(), recipe_path.display());
    println!("{} reviews -> {}", events.len(), review_path.display());
    Ok(())
}

pub fn build(mut cfg: RunConfig, a: &BuildArgs) -> Result<(), Failure> {
    apply_data(&mut cfg, &a.data);
    set(&mut cfg.builder.time_window_days, a.time_window_days);
    if a.max_attempts.is_some() {
        cfg.builder.max_attempts_per_user = a.max_attempts;
    }
    set(&mut cfg.builder.k_core, a.k_core);
    set(&mut cfg.builder.positive_threshold, a.threshold);
    set(&mut cfg.seeds.build, a.seed);
    let recipe_path = usage(input(&cfg.paths.recipe_csv, "recipe CSV"))?;
    let review_path = usage(input(&cfg.paths.review_csv, "review CSV"))?;
    let builder_cfg = cfg.builder_config();
    usage(builder_cfg.validate().map_err(anyhow::Error::from))?;

    let recipes = corpus::parse_recipes(open(&recipe_path)?).with_context(|| recipe_path.display().to_string())?;
    let events = corpus::parse_reviews(open(&review_path)?).with_context(|| review_path.display().to_string())?;
    let built = builder::build_dataset(recipes, &events, cfg.builder.positive_threshold, &builder_cfg)?;
    if built.meals.is_empty() {
        log::warn!("no meals survived construction and filtering");
        eprintln!("warning: the constructed dataset is empty");
    }

    let out_dir = a.out_dir.clone().unwrap_or_else(|| cfg.report_dir());
    let meal_path = out_dir.join("meal.csv");
    let user_meal_path = out_dir.join("user_meal.csv");
    let mut w = create(&meal_path)?;
    builder::write_meals(&mut w, &built.meals)?;
    w.flush()?;
    let mut w = create(&user_meal_path)?;
    builder::write_user_meal(&mut w, &built.interactions)?;
    w.flush()?;

    let stats = corpus::corpus_stats(&built.corpus, &built.meals, &built.interactions);
    let mut body = format!("constructed_meals: {}\n", built.constructed_meals.len());
    body.push_str(&stats.to_report());
    write_report(&cfg, &cfg.report_dir().join("build_stats.txt"), body.as_bytes())?;
    print!("{}\n{body}", cfg.report_header());
    println!("meals -> {}\nuser-meal pairs -> {}", meal_path.display(), user_meal_path.display());
    Ok(())
}

pub fn stats(mut cfg: RunConfig, a: &StatsArgs) -> Result<(), Failure> {
    apply_data(&mut cfg, &a.data);
    set(&mut cfg.builder.positive_threshold, a.threshold);
    let recipe_path = usage(input(&cfg.paths.recipe_csv, "recipe CSV"))?;
    let review_path = usage(input(&cfg.paths.review_csv, "review CSV"))?;
    let meal_path = usage(input(&cfg.paths.meal_csv, "meal CSV"))?;
    let user_meal_path = usage(input(&cfg.paths.user_meal_csv, "user-meal CSV"))?;

    let recipes = corpus::parse_recipes(open(&recipe_path)?).with_context(|| recipe_path.display().to_string())?;
    let events = corpus::parse_reviews(open(&review_path)?).with_context(|| review_path.display().to_string())?;
    let meals = builder::read_meals(open(&meal_path)?).with_context(|| meal_path.display().to_string())?;
    let interactions =
        builder::read_user_meal(open(&user_meal_path)?).with_context(|| user_meal_path.display().to_string())?;
    let full = InteractionCorpus::new(recipes, corpus::threshold_positive(&events, cfg.builder.positive_threshold));
    let restricted = builder::restrict_corpus(&full, &interactions.users(), &meals);
    let stats = corpus::corpus_stats(&restricted, &meals, &interactions);
    let body = stats.to_report();
    print!("{}\n{body}", cfg.report_header());
    if cfg.paths.report_dir.is_some() {
        write_report(&cfg, &cfg.report_dir().join("stats.txt"), body.as_bytes())?;
        let mut json = stats.to_json_line()?;
        json.push('\n');
        write_report(&cfg, &cfg.report_dir().join("stats.jsonl"), json.as_bytes())?;
    }
    Ok(())
}

struct Dataset {
    meals: Vec<builder::Meal>,
    interactions: builder::UserMealMatrix,
    catalog: Catalog,
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let meal_path = usage(input(&cfg.paths.meal_csv, "meal CSV"))?;
    let user_meal_path = usage(input(&cfg.paths.user_meal_csv, "user-meal CSV"))?;
    let meals = builder::read_meals(open(&meal_path)?).with_context(|| meal_path.display().to_string())?;
    let interactions =
        builder::read_user_meal(open(&user_meal_path)?).with_context(|| user_meal_path.display().to_string())?;
    let known: std::collections::BTreeSet<MealId> = meals.iter().map(|m| m.meal_id).collect();
    if let Some((u, m)) = interactions.iter().find(|(_, m)| !known.contains(m)) {
        return Err(Failure::Runtime(anyhow!("user {u} interacts with meal {m}, which is not in the meal file")));
    }
    let catalog = Catalog::from_interactions(&meals, &interactions);
    Ok(Dataset { meals, interactions, catalog })
}

fn checkpoint_path(cfg: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.paths.checkpoint.clone())
        .unwrap_or_else(|| cfg.report_dir().join("model.ckpt"))
}

fn parse_variant(cfg: &mut RunConfig, v: &Option<String>) -> Result<(), Failure> {
    if let Some(v) = v {
        cfg.variant = usage(v.parse::<Variant>().map_err(anyhow::Error::from))?;
    }
    Ok(())
}

pub fn train(mut cfg: RunConfig, a: &TrainArgs) -> Result<(), Failure> {
    apply_data(&mut cfg, &a.data);
    apply_hyper(&mut cfg, &a.hyper);
    apply_split(&mut cfg, &a.split);
    parse_variant(&mut cfg, &a.variant)?;
    let path = checkpoint_path(&cfg, &a.checkpoint);
    cfg.paths.checkpoint = Some(path.clone());
    let hyper = cfg.hyper_params();
    usage(hyper.validate().map_err(anyhow::Error::from))?;
    let data = load_dataset(&cfg)?;

    let split = evaluator::leave_one_out_split(&data.interactions, cfg.seeds.split);
    let out = trainer::fit(&data.catalog, &split.train, &hyper, cfg.variant)?;
    let mut w = create(&path)?;
    ccmr::write_checkpoint(&mut w, &out.params, &hyper, cfg.variant)?;
    let mut trace = Vec::new();
    trainer::write_trace_csv(&mut trace, &out.trace)?;
    let trace_path = cfg.report_dir().join("loss_trace.csv");
    write_report(&cfg, &trace_path, &trace)?;
    let last = out.trace.last().map(|r| r.mean_loss).unwrap_or(f64::NAN);
    println!("{}", cfg.report_header());
    println!(
        "{} trained {} epochs on {} pairs ({} held out); final mean loss {last:.6}; selected epoch {}",
        cfg.variant,
        hyper.epochs,
        split.train.len(),
        out.holdout_pairs,
        out.best_epoch
    );
    println!("checkpoint -> {}\nloss trace -> {}", path.display(), trace_path.display());
    Ok(())
}

fn score(
    cfg: &RunConfig,
    data: &Dataset,
    p: &ModelParams,
    hyper: &HyperParams,
    variant: Variant,
    split: &evaluator::Split,
) -> anyhow::Result<evaluator::Evaluation> {
    if p.n_recipes() != data.catalog.n_recipes() || p.n_users() != data.catalog.n_users() {
        return Err(anyhow!(
            "checkpoint has {} recipes and {} users but the dataset has {} and {}",
            p.n_recipes(),
            p.n_users(),
            data.catalog.n_recipes(),
            data.catalog.n_users()
        ));
    }
    let ids: Vec<MealId> = data.meals.iter().map(|m| m.meal_id).collect();
    let cases = evaluator::build_cases(split, &ids, DEFAULT_NEGATIVES, cfg.seeds.negatives)?;
    let scorer = ModelScorer::new(p, &data.catalog, &split.train, hyper.l, variant, hyper.seed)?;
    Ok(evaluator::evaluate(&scorer, &cases, &DEFAULT_KS)?)
}

fn metrics_row(name: &str, m: &evaluator::Metrics) -> String {
    format!("{name},{:.4},{:.4},{:.4},{:.4}", m.hr_at(5), m.ndcg_at(5), m.hr_at(10), m.ndcg_at(10))
}

pub fn eval(mut cfg: RunConfig, a: &EvalArgs) -> Result<(), Failure> {
    apply_data(&mut cfg, &a.data);
    apply_split(&mut cfg, &a.split);
    cfg.paths.checkpoint = Some(checkpoint_path(&cfg, &a.checkpoint));
    let ck_path = usage(input(&cfg.paths.checkpoint, "checkpoint"))?;
    let data = load_dataset(&cfg)?;
    let ck = ccmr::read_checkpoint(open(&ck_path)?).with_context(|| ck_path.display().to_string())?;
    cfg.variant = ck.header.variant;
    let split = evaluator::leave_one_out_split(&data.interactions, cfg.seeds.split);
    let eval = score(&cfg, &data, &ck.params, &ck.header.hyper, ck.header.variant, &split)?;

    let dir = cfg.report_dir();
    let mut csv_body = Vec::new();
    evaluator::write_report_csv(&mut csv_body, &eval, &DEFAULT_KS)?;
    write_report(&cfg, &dir.join("metrics.csv"), &csv_body)?;
    let header = serde_json::json!({
        "tool": "mealrec",
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": cfg.hash(),
        "seeds": cfg.seeds,
        "variant": cfg.variant,
    });
    let mut jsonl = format!("{header}\n").into_bytes();
    evaluator::write_report_jsonl(&mut jsonl, &eval, &DEFAULT_KS)?;
    let mut w = create(&dir.join("metrics.jsonl"))?;
    w.write_all(&jsonl)?;
    w.flush()?;

    println!("{}", cfg.report_header());
    println!("model,HR@5,NDCG@5,HR@10,NDCG@10");
    println!("{}", metrics_row(cfg.variant.as_str(), &eval.metrics));
    println!("{} users evaluated; per-user rows in {}", eval.metrics.cases, dir.join("metrics.csv").display());
    Ok(())
}

pub fn ablate(mut cfg: RunConfig, a: &TrainArgs) -> Result<(), Failure> {
    apply_data(&mut cfg, &a.data);
    apply_hyper(&mut cfg, &a.hyper);
    apply_split(&mut cfg, &a.split);
    let hyper = cfg.hyper_params();
    usage(hyper.validate().map_err(anyhow::Error::from))?;
    let data = load_dataset(&cfg)?;
    let split = evaluator::leave_one_out_split(&data.interactions, cfg.seeds.split);

    let mut table = String::from("model,HR@5,NDCG@5,HR@10,NDCG@10\n");
    for variant in Variant::ALL {
        let out = trainer::fit(&data.catalog, &split.train, &hyper, variant)?;
        let eval = score(&cfg, &data, &out.params, &hyper, variant, &split)?;
        table.push_str(&metrics_row(variant.as_str(), &eval.metrics));
        table.push('\n');
        log::info!("{variant} done");
    }
    let path = cfg.report_dir().join("ablation.csv");
    write_report(&cfg, &path, table.as_bytes())?;
    println!("{}\n{table}ablation table -> {}", cfg.report_header(), path.display());
    Ok(())
}
