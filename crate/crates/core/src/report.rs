//! Result tables and report files. Output bytes depend only on the inputs.

use std::fs;
use std::path::Path;

use crate::bias::BiasReport;
use crate::error::{invalid, Result};
use crate::eval::EvalResult;

/// One row per method variant; columns `method,task0..task{T-1},avg`.
pub fn results_csv(results: &[EvalResult]) -> Result<String> {
    let first = results.first().ok_or_else(|| invalid("at least one result is required"))?;
    let tasks = first.per_task.len();
    if results.iter().any(|r| r.per_task.len() != tasks) {
        return Err(invalid("results disagree on the number of tasks"));
    }
    let mut out = String::from("method");
    for t in 0..tasks {
        out.push_str(&format!(",task{t}"));
    }
    out.push_str(",avg\n");
    for r in results {
        out.push_str(&r.label());
        for a in &r.per_task {
            out.push_str(&format!(",{:.4}", 100.0 * a));
        }
        out.push_str(&format!(",{:.4}\n", 100.0 * r.average));
    }
    Ok(out)
}

/// Writes `results.csv` plus `bias_{name}.csv` and `bias_{name}_layers.csv`
/// for every named bias report.
pub fn emit_report(dir: impl AsRef<Path>, results: &[EvalResult], bias: &[(&str, &BiasReport)]) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = vec!["results.csv".to_string()];
    fs::write(dir.join("results.csv"), results_csv(results)?)?;
    for (name, report) in bias {
        let file = format!("bias_{name}.csv");
        fs::write(dir.join(&file), report.to_csv())?;
        written.push(file);
        let file = format!("bias_{name}_layers.csv");
        fs::write(dir.join(&file), report.layer_means_csv())?;
        written.push(file);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias::LossKind;

    #[test]
    fn one_result_table() {
        let r = EvalResult::new("ta", None, vec![0.5, 0.75]);
        assert_eq!(results_csv(&[r]).unwrap(), "method,task0,task1,avg\nta,50.0000,75.0000,62.5000\n");
    }

    #[test]
    fn empty_is_error() {
        assert!(results_csv(&[]).is_err());
    }

    #[test]
    fn emission_is_byte_stable() {
        let results = vec![EvalResult::new("ta", None, vec![0.5]), EvalResult::new("ta", Some("v2".into()), vec![0.9])];
        let bias = BiasReport { values: vec![vec![0.25]], psi: LossKind::L1, split: "test".into(), model: "ta".into() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let files = emit_report(a.path(), &results, &[("ta", &bias)]).unwrap();
        emit_report(b.path(), &results, &[("ta", &bias)]).unwrap();
        for f in files {
            assert_eq!(fs::read(a.path().join(&f)).unwrap(), fs::read(b.path().join(&f)).unwrap());
        }
    }
}
