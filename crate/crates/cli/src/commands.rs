use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::Value;

use exnode::checks::{run_suite, Suite};
use exnode::cnf::sample;
use exnode::data::{read_labeled, read_series, read_sets, write_labeled, write_series, write_sets};
use exnode::Rng;

use crate::config::RunConfig;
use crate::model::{classify_metrics, cnf_metrics, tvae_metrics, Model};
use crate::train::{load_data, manifest, Data};
use crate::CliError;

fn emit(v: &Value, out: Option<&Path>, file: &str) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v)?;
    println!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(file), text + "\n")?;
    }
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let model = Model::load(checkpoint)?;
    let r = BufReader::new(
        File::open(data).map_err(|e| CliError::config(format!("cannot open data {}: {e}", data.display())))?,
    );
    let mismatch = |e: exnode::Error| {
        CliError::config(format!(
            "data {} does not fit the {} checkpoint: {e}",
            data.display(),
            model.task().name()
        ))
    };
    let metrics = match &model {
        Model::Classify(m) => {
            let d = read_labeled(r, Some(m.spec.classes)).map_err(mismatch)?;
            check_dim(d.sets.d(), m.spec.dim)?;
            classify_metrics(m, &d)?
        }
        Model::Cnf { net, solver } => {
            let (sets, _) = read_sets(r).map_err(mismatch)?;
            check_dim(sets.d(), net.spec.dim)?;
            cnf_metrics(net, &sets, solver, seed)?
        }
        Model::Tvae { model: m, solver } => {
            let series = read_series(r).map_err(mismatch)?;
            check_dim(series[0].d(), m.spec.dim)?;
            tvae_metrics(m, &series, solver, seed)?
        }
    };
    emit(&metrics, out, "eval.json")
}

fn check_dim(data: usize, model: usize) -> Result<(), CliError> {
    if data != model {
        return Err(CliError::config(format!("data has dimension {data}, the checkpoint expects {model}")));
    }
    Ok(())
}

pub fn cmd_sample(
    checkpoint: &Path,
    n: usize,
    count: usize,
    times: Option<Vec<f64>>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    if n == 0 || count == 0 {
        return Err(CliError::config("--n and --count must be at least 1"));
    }
    if let Some(t) = &times {
        if t.is_empty() || t.iter().any(|v| !v.is_finite()) {
            return Err(CliError::config("--times must be a non-empty list of finite numbers"));
        }
    }
    let model = Model::load(checkpoint)?;
    let mut rng = Rng::new(seed);
    let mut buf = Vec::new();
    match (&model, times) {
        (Model::Classify(_), _) => return Err(CliError::config("classify checkpoints cannot be sampled")),
        (Model::Cnf { .. }, Some(_)) => return Err(CliError::config("--times applies to tvae checkpoints only")),
        (Model::Cnf { net, solver }, None) => {
            let sets = sample(net, n, count, &mut rng, solver, None)?;
            write_sets(&mut buf, &sets, None)?;
        }
        (Model::Tvae { .. }, None) => return Err(CliError::config("tvae sampling needs --times")),
        (Model::Tvae { model: m, solver }, Some(times)) => {
            let series = (0..count)
                .map(|_| m.sample_series(&times, n, &mut rng, solver))
                .collect::<exnode::Result<Vec<_>>>()?;
            write_series(&mut buf, &series)?;
        }
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, buf)?;
    Ok(())
}

pub fn cmd_check(suite: &str, sabotage: bool, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let suite: Suite = suite.parse().map_err(|e: exnode::Error| CliError::config(e.to_string()))?;
    let report = run_suite(suite, seed, sabotage)?;
    emit(&serde_json::to_value(&report)?, out, &format!("check-{}.json", suite.name()))?;
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::failed(format!("{} suite failed: {}", suite.name(), failed.join(", "))))
    }
}

pub fn cmd_gen(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let data = load_data(&cfg)?;
    fs::create_dir_all(out)?;
    for split in ["train", "test"] {
        let path = out.join(format!("{split}.jsonl"));
        let mut w = BufWriter::new(File::create(&path)?);
        match (&data, split) {
            (Data::Classify { train, .. }, "train") => write_labeled(&mut w, train)?,
            (Data::Classify { test, .. }, _) => write_labeled(&mut w, test)?,
            (Data::Cnf { train, .. }, "train") => write_sets(&mut w, train, None)?,
            (Data::Cnf { test, .. }, _) => write_sets(&mut w, test, None)?,
            (Data::Tvae { train, .. }, "train") => write_series(&mut w, train)?,
            (Data::Tvae { test, .. }, _) => write_series(&mut w, test)?,
        }
        w.flush()?;
    }
    let mut m = manifest(&cfg)?;
    m["written"] = serde_json::json!({ "train": "train.jsonl", "test": "test.jsonl" });
    fs::write(out.join("dataset.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}
