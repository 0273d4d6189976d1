//! Joins per-run metrics with flatness measurements: one CSV row per
//! flatness file, paired with the metrics of the epoch it was measured at.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use robflat::Error;

use crate::args::ReportArgs;
use crate::commands::{FlatnessOutput, Outcome};

const HEADER: &str = "run,flatness_file,epoch,mode,loss_kind,xi,flatness,flatness_std,reference_loss,train_rce,test_rce,rce_gap,test_rerr";

fn read_metrics(path: &Path) -> Result<BTreeMap<u64, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let epoch = v["epoch"].as_u64().ok_or_else(|| Error::Config(format!("{}:{}: missing epoch", path.display(), i + 1)))?;
        rows.insert(epoch, v);
    }
    Ok(rows)
}

/// Missing or null metrics (e.g. an empty split) become NaN.
fn num(row: Option<&Value>, key: &str) -> f64 {
    row.and_then(|r| r[key].as_f64()).unwrap_or(f64::NAN)
}

fn flatness_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::Config(format!("cannot list {}: {e}", dir.display())))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.starts_with("flatness") && name.ends_with(".json") && !name.ends_with(".manifest.json") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn run(a: &ReportArgs, out: &Path) -> Result<Outcome> {
    let mut csv = format!("{HEADER}\n");
    let mut inputs = Vec::new();
    let mut count = 0;
    for dir in &a.runs {
        let run = dir.display().to_string();
        let metrics_path = dir.join("metrics.jsonl");
        let metrics = read_metrics(&metrics_path)?;
        inputs.push(metrics_path);
        let files = flatness_files(dir)?;
        if files.is_empty() {
            let (epoch, row) = metrics.iter().next_back().map(|(e, r)| (*e, Some(r))).unwrap_or((0, None));
            csv.push_str(&line(&run, "", epoch, None, row));
            count += 1;
        }
        for name in files {
            let path = dir.join(&name);
            let text = std::fs::read_to_string(&path)?;
            let f: FlatnessOutput = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("malformed flatness file {}: {e}", path.display())))?;
            csv.push_str(&line(&run, &name, f.epoch as u64, Some(&f), metrics.get(&(f.epoch as u64))));
            inputs.push(path);
            count += 1;
        }
    }
    std::fs::write(out.join(&a.output), csv)?;
    Ok(Outcome {
        outputs: vec![a.output.clone()],
        inputs,
        config_hash: None,
        seed: None,
        summary: json!({ "runs": a.runs.len(), "rows": count, "output": a.output }),
    })
}

fn line(run: &str, file: &str, epoch: u64, f: Option<&FlatnessOutput>, row: Option<&Value>) -> String {
    let (train, test) = (num(row, "train_rce"), num(row, "test_rce"));
    let flat = match f {
        Some(f) => {
            let r = &f.report;
            let mode = serde_json::to_value(r.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            let kind = serde_json::to_value(r.loss_kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            format!("{mode},{kind},{},{},{},{}", r.xi, r.value, r.std, r.reference_loss)
        }
        None => ",,,,,".to_string(),
    };
    format!("{},{},{epoch},{flat},{train},{test},{},{}\n", csv_field(run), csv_field(file), test - train, num(row, "test_rerr"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
