use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use exnode::classifier::{train_classifier, ClassifierModel, LabeledSetBatch};
use exnode::cnf::train_cnf;
use exnode::data::{
    gaussian_mle_ppll, gen_class_sets, gen_density_sets, gen_rotating_series, read_labeled, read_series, read_sets,
};
use exnode::equivariant::{EquivariantNet, SetBatch};
use exnode::tvae::{train_tvae, TemporalSetSeries, TvaeModel};
use exnode::Rng;

use crate::config::{DataFiles, DataSection, RunConfig};
use crate::model::{classify_metrics, cnf_metrics, tvae_metrics, Model, FLOW_PREFIX};
use crate::CliError;

pub enum Data {
    Classify { train: LabeledSetBatch, test: LabeledSetBatch },
    Cnf { train: SetBatch, test: SetBatch, analytic_ppll: Option<f64> },
    Tvae { train: Vec<TemporalSetSeries>, test: Vec<TemporalSetSeries> },
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::config(format!("cannot open data file {}: {e}", path.display())))
}

fn data_err(path: &Path) -> impl Fn(exnode::Error) -> CliError + '_ {
    move |e| CliError::config(format!("data file {}: {e}", path.display()))
}

/// Generated data uses the data seed for the training split and the next
/// seed for the test split.
pub fn load_data(cfg: &RunConfig) -> Result<Data, CliError> {
    let data = match cfg {
        RunConfig::Classify(c) => match &c.data {
            DataSection::Files { files: DataFiles { train, test } } => {
                let k = Some(c.model.classes);
                Data::Classify {
                    train: read_labeled(open(train)?, k).map_err(data_err(train))?,
                    test: read_labeled(open(test)?, k).map_err(data_err(test))?,
                }
            }
            DataSection::Generate(g) => Data::Classify {
                train: gen_class_sets(&g.families, g.train, g.n, g.seed).map_err(gen_err)?,
                test: gen_class_sets(&g.families, g.test, g.n, g.seed + 1).map_err(gen_err)?,
            },
        },
        RunConfig::Cnf(c) => match &c.data {
            DataSection::Files { files: DataFiles { train, test } } => Data::Cnf {
                train: read_sets(open(train)?).map_err(data_err(train))?.0,
                test: read_sets(open(test)?).map_err(data_err(test))?.0,
                analytic_ppll: None,
            },
            DataSection::Generate(g) => {
                let train = gen_density_sets(&g.mixture, g.train, g.n, g.seed).map_err(gen_err)?;
                let test = gen_density_sets(&g.mixture, g.test, g.n, g.seed + 1).map_err(gen_err)?;
                Data::Cnf { train: train.sets, test: test.sets, analytic_ppll: Some(test.analytic_ppll) }
            }
        },
        RunConfig::Tvae(c) => match &c.data {
            DataSection::Files { files: DataFiles { train, test } } => Data::Tvae {
                train: read_series(open(train)?).map_err(data_err(train))?,
                test: read_series(open(test)?).map_err(data_err(test))?,
            },
            DataSection::Generate(g) => Data::Tvae {
                train: gen_rotating_series(&g.series, g.train, g.seed).map_err(gen_err)?,
                test: gen_rotating_series(&g.series, g.test, g.seed + 1).map_err(gen_err)?,
            },
        },
    };
    let (d, want) = match (&data, cfg) {
        (Data::Classify { train, .. }, RunConfig::Classify(c)) => (train.sets.d(), c.model.dim),
        (Data::Cnf { train, .. }, RunConfig::Cnf(c)) => (train.d(), c.model.dim),
        (Data::Tvae { train, .. }, RunConfig::Tvae(c)) => (train[0].d(), c.model.dim),
        _ => unreachable!("data kind follows the task"),
    };
    if d != want {
        return Err(CliError::config(format!("config error at `model.dim`: {want}, but the data has dimension {d}")));
    }
    Ok(data)
}

fn gen_err(e: exnode::Error) -> CliError {
    CliError::config(format!("config error at `data`: {e}"))
}

/// `dataset.json`: the generator section and split seeds, or the file paths.
pub fn manifest(cfg: &RunConfig) -> Result<Value, CliError> {
    let (data, seed) = match cfg {
        RunConfig::Classify(c) => (serde_json::to_value(&c.data)?, data_seed(&c.data)),
        RunConfig::Cnf(c) => (serde_json::to_value(&c.data)?, data_seed(&c.data)),
        RunConfig::Tvae(c) => (serde_json::to_value(&c.data)?, data_seed(&c.data)),
    };
    Ok(match seed {
        Some(s) => json!({ "task": cfg.task().name(), "generator": data, "train_seed": s, "test_seed": s + 1 }),
        None => json!({ "task": cfg.task().name(), "files": data["files"] }),
    })
}

fn data_seed<G: serde::Serialize>(d: &DataSection<G>) -> Option<u64> {
    match d {
        DataSection::Files { .. } => None,
        DataSection::Generate(g) => serde_json::to_value(g).ok()?.get("seed")?.as_u64(),
    }
}

/// Hash of the content as git computes blob ids, with SHA-256.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

struct Rows {
    w: csv::Writer<File>,
    err: Option<csv::Error>,
}

impl Rows {
    fn new(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        w.flush()?;
        Ok(Self { w, err: None })
    }

    fn push(&mut self, row: &[String]) {
        if self.err.is_some() {
            return;
        }
        if let Err(e) = self.w.write_record(row).and_then(|_| self.w.flush().map_err(csv::Error::from)) {
            self.err = Some(e);
        }
    }

    fn finish(self) -> Result<(), CliError> {
        match self.err {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Trains one run into `dir` and returns its final metrics.
pub fn train_one(cfg: &RunConfig, dir: &Path) -> Result<Value, CliError> {
    let start = Instant::now();
    fs::create_dir_all(dir)?;
    let seed = cfg.seed();
    let resolved = serde_json::to_value(cfg)?;
    let hash = content_hash(serde_json::to_string(&resolved)?.as_bytes());
    let mut run = json!({
        "task": cfg.task().name(),
        "seed": seed,
        "config_hash": hash,
        "config": resolved,
    });
    write_json(&dir.join("run.json"), &run)?;
    write_json(&dir.join("dataset.json"), &manifest(cfg)?)?;
    let data = load_data(cfg)?;
    let mut rng = Rng::with_stream(seed, 1);
    let metrics_path = dir.join("metrics.csv");
    let (model, mut metrics) = match (cfg, data) {
        (RunConfig::Classify(c), Data::Classify { train, test }) => {
            let mut model = ClassifierModel::new(c.model.clone(), &mut rng).map_err(spec_err)?;
            let mut rows = Rows::new(&metrics_path, &["epoch", "split", "loss", "accuracy"])?;
            let report = train_classifier(&mut model, &train, Some(&test), &c.optim, |e| {
                rows.push(&[e.epoch.to_string(), "train".into(), num(e.train_loss), num(e.train_accuracy)]);
                if let (Some(l), Some(a)) = (e.val_loss, e.val_accuracy) {
                    rows.push(&[e.epoch.to_string(), "val".into(), num(l), num(a)]);
                }
                eprintln!("epoch {} loss {:.4} acc {:.4} val {:?}", e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy);
            });
            rows.finish()?;
            let report = report?;
            let mut m = classify_metrics(&model, &test)?;
            m["best_epoch"] = json!(report.best_epoch);
            m["epochs_run"] = json!(report.epochs.len());
            (Model::Classify(model), m)
        }
        (RunConfig::Cnf(c), Data::Cnf { train, test, analytic_ppll }) => {
            let mut net = EquivariantNet::new(FLOW_PREFIX, c.model.clone(), &mut rng).map_err(spec_err)?;
            let mut rows = Rows::new(&metrics_path, &["epoch", "split", "ppll"])?;
            let report = train_cnf(&mut net, &train, Some(&test), &c.optim, |e| {
                rows.push(&[e.epoch.to_string(), "train".into(), num(e.train_ppll)]);
                if let Some(v) = e.val_ppll {
                    rows.push(&[e.epoch.to_string(), "val".into(), num(v)]);
                }
                eprintln!("epoch {} ppll {:.4} val {:?}", e.epoch, e.train_ppll, e.val_ppll);
            });
            rows.finish()?;
            report?;
            let mut m = cnf_metrics(&net, &test, &c.solver, 0)?;
            m["gaussian_mle_ppll"] = json!(gaussian_mle_ppll(&train, &test)?);
            if let Some(a) = analytic_ppll {
                m["analytic_ppll"] = json!(a);
            }
            (Model::Cnf { net, solver: c.solver.clone() }, m)
        }
        (RunConfig::Tvae(c), Data::Tvae { train, test }) => {
            let mut model = TvaeModel::new(c.model.clone(), &mut rng).map_err(spec_err)?;
            let mut rows = Rows::new(&metrics_path, &["epoch", "split", "elbo", "recon", "kl"])?;
            let report = train_tvae(&mut model, &train, &c.optim, |e| {
                rows.push(&[e.epoch.to_string(), "train".into(), num(e.elbo), num(e.recon), num(e.kl)]);
                eprintln!("epoch {} elbo {:.4} kl {:.4}", e.epoch, e.elbo, e.kl);
            });
            rows.finish()?;
            let report = report?;
            let mut m = tvae_metrics(&model, &test, &c.solver, 0)?;
            m["train_elbo"] = json!(report.epochs.last().map(|e| e.elbo));
            (Model::Tvae { model, solver: c.solver.clone() }, m)
        }
        _ => unreachable!("data kind follows the task"),
    };
    model.save(&dir.join("checkpoint.json"))?;
    metrics["seed"] = json!(seed);
    write_json(&dir.join("metrics.json"), &metrics)?;
    run["metrics"] = metrics.clone();
    run["elapsed_secs"] = json!(start.elapsed().as_secs_f64());
    write_json(&dir.join("run.json"), &run)?;
    Ok(metrics)
}

fn spec_err(e: exnode::Error) -> CliError {
    CliError::config(format!("config error at `model`: {e}"))
}

const COUNT_KEYS: [&str; 6] = ["sets", "points", "series", "seed", "best_epoch", "epochs_run"];

/// Mean and sample standard deviation of every scalar metric across runs.
pub fn summarize(runs: &[(u64, Value)]) -> Value {
    let mut metrics = Map::new();
    if let Some(Value::Object(first)) = runs.first().map(|r| &r.1) {
        for key in first.keys().filter(|k| !COUNT_KEYS.contains(&k.as_str())) {
            let vals: Option<Vec<f64>> = runs.iter().map(|(_, m)| m.get(key).and_then(Value::as_f64)).collect();
            let Some(vals) = vals else { continue };
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            metrics.insert(key.clone(), json!({ "mean": mean, "std": std, "values": vals }));
        }
    }
    json!({
        "seeds": runs.iter().map(|r| r.0).collect::<Vec<_>>(),
        "metrics": metrics,
    })
}

pub fn cmd_train(path: &Path, out: Option<PathBuf>, seeds: Option<usize>) -> Result<(), CliError> {
    let cfg = RunConfig::load(path)?;
    let out = out
        .or_else(|| cfg.out().map(Path::to_path_buf))
        .ok_or_else(|| CliError::config("config error at `out`: no output directory (set `out` or pass --out)"))?;
    let base = cfg.without_out();
    match seeds {
        None => {
            let cfg = base.with_seed(base.seed());
            let m = train_one(&cfg, &out)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Some(0) => return Err(CliError::config("--seeds must be at least 1")),
        Some(k) => {
            let mut runs = vec![];
            for i in 0..k as u64 {
                let seed = base.seed() + i;
                let m = train_one(&base.with_seed(seed), &out.join(format!("seed-{seed}")))?;
                runs.push((seed, m));
            }
            let summary = summarize(&runs);
            write_json(&out.join("summary.json"), &summary)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_blob_format() {
        // sha256 of "blob 0\0", as `git hash-object --object-format=sha256` prints for an empty file.
        assert_eq!(content_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn summary_uses_sample_std() {
        let runs = vec![(0, json!({"accuracy": 0.9, "sets": 5})), (1, json!({"accuracy": 1.0, "sets": 5}))];
        let s = summarize(&runs);
        let a = &s["metrics"]["accuracy"];
        assert!((a["mean"].as_f64().unwrap() - 0.95).abs() < 1e-12);
        assert!((a["std"].as_f64().unwrap() - 0.05f64.hypot(0.05)).abs() < 1e-12);
        assert!(s["metrics"].get("sets").is_none());
    }
}
