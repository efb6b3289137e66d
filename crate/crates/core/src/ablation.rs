//! Trains and tests every model variant under one seed and one split.

use std::io::Write;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::Result;
use crate::io::{Dataset, EmbeddingTable};
use crate::metrics::EvalReport;
use crate::model::{Ablation, ModelConfig};
use crate::train::{evaluate_posts, prepare_split, train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub best_epoch: usize,
    pub report: EvalReport,
    /// Ids of the test posts, in evaluation order.
    pub test_ids: Vec<String>,
}

fn run_one(
    ds: &Dataset,
    table: &EmbeddingTable,
    base: &ModelConfig,
    config: &TrainConfig,
    variant: Ablation,
) -> Result<AblationRow> {
    let model = ModelConfig {
        ablation: variant,
        ..base.clone()
    };
    let out = train(ds, table, model, config)?;
    let test = prepare_split(&out.model, ds, table, Split::Test)?;
    let (report, _) = evaluate_posts(&out.model, &out.store, &test, config.threshold)?;
    log::info!(
        "{variant}: test acc {:.4} f1 {:.4}",
        report.accuracy,
        report.f1
    );
    Ok(AblationRow {
        variant,
        best_epoch: out.best_epoch,
        report,
        test_ids: test.into_iter().map(|p| p.id).collect(),
    })
}

/// One row per variant, in the order given. With `parallel`, each variant
/// trains on its own thread; results do not depend on the choice.
pub fn run_ablation_suite(
    ds: &Dataset,
    table: &EmbeddingTable,
    base: &ModelConfig,
    config: &TrainConfig,
    variants: &[Ablation],
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    if !parallel {
        return variants
            .iter()
            .map(|&v| run_one(ds, table, base, config, v))
            .collect();
    }
    thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|&v| s.spawn(move || run_one(ds, table, base, config, v)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    })
}

/// CSV table: variant, accuracy, f1, kappa, auc.
pub fn write_ablation_table(w: impl Write, rows: &[AblationRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variant", "accuracy", "f1", "kappa", "auc"])?;
    for r in rows {
        out.write_record([
            r.variant.name().to_string(),
            format!("{:.4}", r.report.accuracy),
            format!("{:.4}", r.report.f1),
            format!("{:.4}", r.report.cohen_kappa),
            r.report.auc.map_or_else(String::new, |a| format!("{a:.4}")),
        ])?;
    }
    out.flush()?;
    Ok(())
}
