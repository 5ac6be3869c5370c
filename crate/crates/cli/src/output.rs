use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use knowtrace_core::evalkit::EvalSummary;
use serde::Serialize;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// `eval_summary.json` and `eval.csv` (id, em, f1, prediction).
pub fn write_eval(dir: &Path, summary: &EvalSummary) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_json(&dir.join("eval_summary.json"), summary)?;
    let path = dir.join("eval.csv");
    let mut csv = csv::Writer::from_path(&path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    csv.write_record(["id", "em", "f1", "prediction"])?;
    for row in &summary.rows {
        csv.write_record([
            row.id.as_str(),
            &row.em.to_string(),
            &format!("{:.6}", row.f1),
            row.prediction.as_str(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn print_eval(summary: &EvalSummary) {
    let flagged = summary.rows.iter().filter(|r| r.flag.is_some()).count();
    println!(
        "{} questions  EM {:.4}  F1 {:.4}  flagged {}",
        summary.count, summary.em, summary.f1, flagged
    );
}
