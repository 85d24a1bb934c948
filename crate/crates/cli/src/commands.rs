use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use egin_core::evaluate::{category_similarity_report, dnn_pooling_baseline, evaluate_model, relaimpr, run_ablations};
use egin_core::ingest::{read_samples_file, truncate_sample, write_log_file, write_samples_file};
use egin_core::model_io::{load_model, save_model, write_embeddings, METRICS_FILE};
use egin_core::multi_interest::cosine_sim;
use egin_core::{
    build_all_edges, generate_labeled_samples, generate_log, Catalog, EdgeKind, EmbeddingTable, RunConfig, Trainer,
    TrainingSample,
};

use crate::ConfigArgs;

/// Defaults, then the config file, then `--set` overrides. The result is
/// printed so that it can be saved and fed back as a config file.
fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("cannot load config {}", path.display()))?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.set(o)?;
    }
    println!("# resolved config");
    print!("{}", cfg.to_toml());
    println!("# end config");
    Ok(cfg)
}

fn pick(flag: Option<PathBuf>, from_config: &str, what: &str) -> Result<PathBuf> {
    flag.or_else(|| (!from_config.is_empty()).then(|| PathBuf::from(from_config)))
        .ok_or_else(|| anyhow!("no {what} path: pass the flag or set it in the config"))
}

fn load_samples(path: &Path, cfg: &RunConfig) -> Result<Vec<TrainingSample>> {
    let mut samples = read_samples_file(path)?;
    for s in &mut samples {
        truncate_sample(s, cfg.l_click, cfg.l_query);
    }
    Ok(samples)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn gen_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let gen = cfg.gen_config();
    let start = Instant::now();
    let log = generate_log(&gen)?;
    let data = generate_labeled_samples(&gen, &log)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write_log_file(&out.join("log.tsv"), &log)?;
    write_samples_file(&out.join("train.tsv"), &data.train)?;
    write_samples_file(&out.join("valid.tsv"), &data.valid)?;
    let mut cats = create(&out.join("categories.tsv"))?;
    for (item, c) in Catalog::new(&gen)?.primary_categories() {
        writeln!(cats, "{item}\t{c}")?;
    }
    cats.flush()?;
    let events: usize = log.iter().map(|s| s.events.len()).sum();
    println!(
        "users={} events={} train_samples={} valid_samples={} elapsed={:.1}s",
        log.len(),
        events,
        data.train.len(),
        data.valid.len(),
        start.elapsed().as_secs_f64()
    );
    println!("wrote {}/{{log,train,valid,categories}}.tsv", out.display());
    Ok(())
}

pub fn build_edges(args: &ConfigArgs, samples: Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let path = pick(samples, &cfg.train_path, "samples")?;
    let samples = load_samples(&path, &cfg)?;
    let edge_cfg = cfg.edge_config();
    edge_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = create(out)?;
    let mut counts = [0usize; 3];
    for (i, s) in samples.iter().enumerate() {
        for e in build_all_edges(s, &edge_cfg, &mut rng) {
            counts[e.kind.index()] += 1;
            writeln!(w, "{i}\t{}", e.to_tsv())?;
        }
    }
    w.flush()?;
    for kind in EdgeKind::ALL {
        println!("{}={}", kind.name(), counts[kind.index()]);
    }
    println!("samples={} wrote {}", samples.len(), out.display());
    Ok(())
}

pub fn train(args: &ConfigArgs, train: Option<PathBuf>, valid: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = resolve(args)?;
    let train_path = pick(train, &cfg.train_path, "train")?;
    let valid_path = pick(valid, &cfg.valid_path, "valid").ok();
    let out = pick(out, &cfg.model_dir, "model output")?;
    let train = load_samples(&train_path, &cfg)?;
    let valid = match &valid_path {
        Some(p) => load_samples(p, &cfg)?,
        None => Vec::new(),
    };
    let n_other = train.first().map_or(0, |s| s.other_features.len());
    let mut trainer = Trainer::new(cfg.train_config()?, n_other)?;

    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut metrics = create(&out.join(METRICS_FILE))?;
    let mut io_error = None;
    let start = Instant::now();
    let summary = trainer.fit(&train, &valid, &mut |line| {
        if line.contains("valid_auc") {
            println!("{line}");
        }
        if let Err(e) = writeln!(metrics, "{line}") {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e).context("cannot write metrics log");
    }
    metrics.flush()?;

    cfg.train_path = train_path.display().to_string();
    cfg.valid_path = valid_path.map(|p| p.display().to_string()).unwrap_or_default();
    cfg.model_dir = out.display().to_string();
    save_model(&out, trainer.model(), &cfg)?;
    if let Some(last) = summary.metrics.last() {
        println!("final {}", last.log_line());
    }
    println!(
        "steps={} elapsed={:.1}s model={}",
        summary.steps,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

pub fn eval(args: &ConfigArgs, model: Option<PathBuf>, data: Option<PathBuf>, baseline_auc: Option<f64>) -> Result<()> {
    let cfg = resolve(args)?;
    let dir = pick(model, &cfg.model_dir, "model")?;
    let (model_cfg, model) = load_model(&dir)?;
    let data = pick(data, &cfg.valid_path, "evaluation data")?;
    let samples = load_samples(&data, &model_cfg)?;
    let mut report = evaluate_model(&model, &samples)?;
    if let Some(base) = baseline_auc {
        report = report.with_baseline("given", base)?;
    }
    println!("{report}");
    Ok(())
}

pub fn ablate(args: &ConfigArgs, train: Option<PathBuf>, valid: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(args)?;
    let train = load_samples(&pick(train, &cfg.train_path, "train")?, &cfg)?;
    let valid = load_samples(&pick(valid, &cfg.valid_path, "valid")?, &cfg)?;
    let tc = cfg.train_config()?;
    let start = Instant::now();
    let report = run_ablations(&tc, &train, &valid)?;
    let (_, dnn) = dnn_pooling_baseline(&train, &valid, &tc)?;
    println!("{:<20} {:>8} {:>9}", "model", "auc", "delta");
    for row in &report.ablations {
        println!("{:<20} {:>8.4} {:>+9.4}", row.name, row.auc, row.delta);
    }
    println!("{:<20} {:>8.4} {:>+9.4}", "DNN (sum pooling)", dnn.auc, dnn.auc - report.auc);
    match relaimpr(report.auc, dnn.auc) {
        Ok(r) => println!("relaimpr EGIN vs DNN = {r:.2}%"),
        Err(e) => println!("relaimpr EGIN vs DNN undefined: {e}"),
    }
    println!("elapsed={:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

pub fn export_emb(args: &ConfigArgs, model: Option<PathBuf>, out: &Path, kind: &str) -> Result<()> {
    let cfg = resolve(args)?;
    let (_, model) = load_model(&pick(model, &cfg.model_dir, "model")?)?;
    let tables: Vec<&EmbeddingTable> = match kind {
        "item" => vec![&model.graph.item],
        "query" => vec![&model.graph.query],
        "all" => vec![&model.graph.item, &model.graph.query],
        other => bail!("unknown kind `{other}`; expected item, query or all"),
    };
    write_embeddings(create(out)?, &tables)?;
    let rows: usize = tables.iter().map(|t| t.len()).sum();
    println!("rows={rows} wrote {}", out.display());
    Ok(())
}

fn read_categories(path: &Path) -> Result<BTreeMap<u64, u32>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, cat) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("{}:{}: expected `id<TAB>category`", path.display(), n + 1))?;
        let id = id.trim().parse().with_context(|| format!("{}:{}: bad id", path.display(), n + 1))?;
        let cat = cat.trim().parse().with_context(|| format!("{}:{}: bad category", path.display(), n + 1))?;
        map.insert(id, cat);
    }
    Ok(map)
}

pub fn analyze_emb(
    args: &ConfigArgs,
    model: Option<PathBuf>,
    kind: &str,
    ids: &[u64],
    out: Option<PathBuf>,
    categories: Option<PathBuf>,
) -> Result<()> {
    let cfg = resolve(args)?;
    let (_, model) = load_model(&pick(model, &cfg.model_dir, "model")?)?;
    let table = match kind {
        "item" => &model.graph.item,
        "query" => &model.graph.query,
        other => bail!("unknown kind `{other}`; expected item or query"),
    };
    if ids.is_empty() && categories.is_none() {
        bail!("nothing to do: pass --ids and/or --categories");
    }
    if !ids.is_empty() {
        let mut text = String::from("id");
        for id in ids {
            text.push_str(&format!("\t{id}"));
        }
        text.push('\n');
        for &a in ids {
            text.push_str(&a.to_string());
            for &b in ids {
                let s = cosine_sim(&table.vector(a), &table.vector(b))?;
                text.push_str(&format!("\t{s:.4}"));
            }
            text.push('\n');
        }
        match out {
            Some(p) => {
                fs::write(&p, &text).with_context(|| format!("cannot write {}", p.display()))?;
                println!("wrote {}", p.display());
            }
            None => print!("{text}"),
        }
    }
    if let Some(path) = categories {
        let cats = read_categories(&path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = category_similarity_report(table, &cats, cfg.n_pairs, &mut rng)?;
        println!(
            "intra={:.4} inter={:.4} margin={:.4} pairs={}",
            r.intra,
            r.inter,
            r.margin(),
            r.n_pairs
        );
    }
    Ok(())
}
