use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use aomd_core::ablation::{run_ablation_suite, write_ablation_table};
use aomd_core::io::{gen_synthetic as write_corpus, load_dataset, load_embeddings, DATA_DIR_ENV};
use aomd_core::metrics::{evaluate, write_roc_csv};
use aomd_core::train::{evaluate_posts, fit, prepare_split, write_history_csv};
use aomd_core::{
    cluster, fleiss_kappa, load_annotations, load_model, save_model, Ablation, AomdModel, Dataset,
    EmbeddingTable, Error, EvalReport, ParameterStore, Prediction, Split, WordToken,
};

use crate::config::RunConfig;
use crate::{ConfigArgs, DataArgs, Failure};

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const HISTORY_NAME: &str = "history.csv";
pub const REPORT_NAME: &str = "report.json";
pub const ROC_NAME: &str = "roc.csv";
pub const SPEC_NAME: &str = "spec.json";

type CmdResult = Result<(), Failure>;

/// Relative paths live under `$AOMD_DATA_DIR` when it is set.
fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

fn load_data(args: &DataArgs) -> Result<(Dataset, EmbeddingTable), Failure> {
    let ds = load_dataset(resolve(&args.data))?;
    let table_path = match (&args.embeddings, ds.embeddings_path()) {
        (Some(p), _) => resolve(p),
        (None, Some(p)) => p,
        (None, None) => {
            return Err(Failure::Usage(
                "no embedding table: pass --embeddings or name one in the manifest header".into(),
            ))
        }
    };
    let table = load_embeddings(table_path)?;
    log::info!("loaded {} posts, {} embedding rows", ds.len(), table.len());
    Ok((ds, table))
}

fn load_checkpoint(path: &Path) -> Result<(AomdModel, ParameterStore), Failure> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(load_model(&mut r)?)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport) -> CmdResult {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(REPORT_NAME), report)?;
    let mut w = create(&dir.join(ROC_NAME))?;
    write_roc_csv(&mut w, &report.roc_points)?;
    w.flush()?;
    Ok(())
}

fn print_json(value: &impl serde::Serialize) -> CmdResult {
    println!(
        "{}",
        serde_json::to_string_pretty(value).map_err(Error::from)?
    );
    Ok(())
}

pub fn gen_synthetic(spec: Option<&Path>, overrides: &[String], out: &Path) -> CmdResult {
    let config = RunConfig::load_spec(spec, overrides)?;
    let manifest = write_corpus(&config.synthetic, out)?;
    write_json(&out.join(SPEC_NAME), &config.synthetic)?;
    log::info!(
        "wrote {} posts to {}",
        config.synthetic.n_posts,
        manifest.display()
    );
    Ok(())
}

pub fn train(data: &DataArgs, args: &ConfigArgs, out: &Path, resume: Option<&Path>) -> CmdResult {
    let mut config = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let (ds, table) = load_data(data)?;

    let outcome = match resume {
        Some(ckpt) => {
            let (model, store) = load_checkpoint(ckpt)?;
            if model.config != config.model {
                log::warn!("resuming: the checkpoint's model config replaces the configured one");
            }
            log::info!("resuming from step {}", store.step());
            config.model = model.config.clone();
            let train = prepare_split(&model, &ds, &table, Split::Train)?;
            let val = prepare_split(&model, &ds, &table, Split::Val)?;
            fit(model, store, &train, &val, &config.train)?
        }
        None => aomd_core::train(&ds, &table, config.model.clone(), &config.train)?,
    };
    config.model = outcome.model.config.clone();
    config.echo(out)?;

    let mut w = create(&out.join(CHECKPOINT_NAME))?;
    save_model(&mut w, &outcome.model, &outcome.store)?;
    w.flush()?;
    let mut w = create(&out.join(HISTORY_NAME))?;
    write_history_csv(&mut w, &outcome.history)?;
    w.flush()?;
    log::info!(
        "best epoch {} (val F1 {:.4}), {} epochs run",
        outcome.best_epoch,
        outcome.best_val_f1,
        outcome.history.len()
    );

    let test = prepare_split(&outcome.model, &ds, &table, Split::Test)?;
    if !test.is_empty() {
        let (report, _) = evaluate_posts(
            &outcome.model,
            &outcome.store,
            &test,
            config.train.threshold,
        )?;
        log::info!("test accuracy {:.4}, F1 {:.4}", report.accuracy, report.f1);
        write_report(out, &report)?;
    }
    Ok(())
}

pub fn eval_checkpoint(
    data: &DataArgs,
    ckpt: &Path,
    split: Split,
    threshold: f64,
    out: Option<&Path>,
) -> CmdResult {
    let (ds, table) = load_data(data)?;
    let (model, store) = load_checkpoint(ckpt)?;
    let posts = prepare_split(&model, &ds, &table, split)?;
    if posts.is_empty() {
        return Err(Error::EmptySplit(match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
        .into());
    }
    let (report, _) = evaluate_posts(&model, &store, &posts, threshold)?;
    finish_eval(&report, out)
}

pub fn eval_predictions(path: &Path, threshold: f64, out: Option<&Path>) -> CmdResult {
    let path = resolve(path);
    let reader = BufReader::new(File::open(&path)?);
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.clone(),
            line: i + 1,
            reason,
        };
        let p: Prediction = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let label = p
            .label
            .ok_or_else(|| parse_err(format!("prediction {} has no label", p.id)))?;
        scores.push(p.y_hat);
        labels.push(label);
    }
    let report = evaluate(&scores, &labels, threshold)?;
    finish_eval(&report, out)
}

fn finish_eval(report: &EvalReport, out: Option<&Path>) -> CmdResult {
    if let Some(dir) = out {
        write_report(dir, report)?;
    }
    print_json(report)
}

pub fn predict(data: &DataArgs, ckpt: &Path, split: Option<Split>, out: &Path) -> CmdResult {
    let (ds, table) = load_data(data)?;
    let (model, store) = load_checkpoint(ckpt)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = create(out)?;
    let mut n = 0;
    for (post, s) in ds.posts.iter().zip(&ds.splits) {
        if split.is_some_and(|want| want != *s) {
            continue;
        }
        let prepared = model.prepare(post, &table)?;
        let trace = model.forward(&store, &prepared)?;
        serde_json::to_writer(&mut w, &Prediction::from_trace(&prepared, &trace))
            .map_err(Error::from)?;
        w.write_all(b"\n")?;
        n += 1;
    }
    w.flush()?;
    log::info!("wrote {n} predictions to {}", out.display());
    Ok(())
}

pub fn ablate(
    data: &DataArgs,
    args: &ConfigArgs,
    out: &Path,
    variants: &[Ablation],
    parallel: bool,
) -> CmdResult {
    let config = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let (ds, table) = load_data(data)?;
    let variants = if variants.is_empty() {
        &Ablation::ALL[..]
    } else {
        variants
    };
    let rows = run_ablation_suite(
        &ds,
        &table,
        &config.model,
        &config.train,
        variants,
        parallel,
    )?;
    config.echo(out)?;
    let mut w = create(&out.join("ablation.csv"))?;
    write_ablation_table(&mut w, &rows)?;
    w.flush()?;
    write_json(&out.join("ablation.json"), &rows)?;
    for r in &rows {
        log::info!(
            "{:<13} acc {:.4} f1 {:.4} kappa {:.4}",
            r.variant.name(),
            r.report.accuracy,
            r.report.f1,
            r.report.cohen_kappa
        );
    }
    Ok(())
}

pub fn cluster_tokens(input: &Path, out: &Path, args: &ConfigArgs) -> CmdResult {
    let config = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let input = resolve(input);
    let text = fs::read_to_string(&input)?;
    let tokens: Vec<WordToken> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: input.clone(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    for t in &tokens {
        t.validate()?;
    }
    let clusters = cluster::cluster_tokens(&tokens, &config.model.cluster);
    log::info!("{} tokens -> {} clusters", tokens.len(), clusters.len());
    write_json(out, &clusters)
}

pub fn agreement(path: &Path) -> CmdResult {
    let records = load_annotations(resolve(path))?;
    let kappa = fleiss_kappa(&records)?;
    print_json(&serde_json::json!({ "records": records.len(), "fleiss_kappa": kappa }))
}
