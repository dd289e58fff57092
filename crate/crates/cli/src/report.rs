//! Aggregation of finished runs: one CSV row per configuration, seeds pooled.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};

use mavr_core::metrics::MetricsReport;
use mavr_core::{MavrError, Result};

use crate::RunConfig;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| MavrError::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|source| MavrError::Json { path: path.to_path_buf(), source })
}

/// Hash of the resolved configuration with the training seed cleared.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.train.seed = 0;
    let digest = Sha256::digest(serde_json::to_vec(&c).expect("serialisable"));
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn label(cfg: &RunConfig) -> String {
    let m = &cfg.train.model;
    let views: Vec<&str> = m.views.iter().map(|v| v.name()).collect();
    let mut parts = vec![views.join("+")];
    if !m.use_pyramid {
        parts.push("no-pyramid".into());
    }
    if !m.use_attention {
        parts.push("no-attention".into());
    }
    if cfg.train.lambda1 == 0.0 && cfg.train.lambda2 == 0.0 {
        parts.push("no-align".into());
    }
    parts.join(" ")
}

/// Mean and sample standard deviation across seeds; a single run has std 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Group {
    hash: String,
    label: String,
    reports: Vec<MetricsReport>,
}

pub fn aggregate(runs: &[impl AsRef<Path>]) -> Result<String> {
    let mut groups: Vec<Group> = Vec::new();
    let mut classes = None;
    for dir in runs {
        let dir = dir.as_ref();
        let cfg: RunConfig = read_json(&dir.join("resolved_config.json"))?;
        let report: MetricsReport = read_json(&dir.join("report.json"))?;
        let c = report.confusion.len();
        match classes {
            None => classes = Some(c),
            Some(k) if k != c => {
                return Err(MavrError::Config(format!(
                    "{} has {c} classes, earlier runs have {k}",
                    dir.display()
                )))
            }
            _ => {}
        }
        let hash = config_hash(&cfg);
        match groups.iter_mut().find(|g| g.hash == hash) {
            Some(g) => g.reports.push(report),
            None => groups.push(Group {
                hash,
                label: label(&cfg),
                reports: vec![report],
            }),
        }
    }
    let metrics: [(&str, fn(&MetricsReport) -> f64); 4] = [
        ("accuracy", |r| r.accuracy),
        ("precision_macro", |r| r.precision_macro),
        ("recall_macro", |r| r.recall_macro),
        ("f1_macro", |r| r.f1_macro),
    ];
    let mut out = String::from("config,label,runs");
    for (name, _) in &metrics {
        out.push_str(&format!(",{name}_mean,{name}_std"));
    }
    out.push('\n');
    for g in &groups {
        out.push_str(&format!("{},{},{}", g.hash, g.label, g.reports.len()));
        for (_, f) in &metrics {
            let xs: Vec<f64> = g.reports.iter().map(f).collect();
            let (m, s) = mean_std(&xs);
            out.push_str(&format!(",{m:.4},{s:.4}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn run(runs: &[impl AsRef<Path>], out: Option<&Path>) -> Result<()> {
    let csv = aggregate(runs)?;
    print!("{csv}");
    if let Some(p) = out {
        fs::write(p, &csv).map_err(|e| MavrError::Io { path: p.to_path_buf(), source: e })?;
    }
    Ok(())
}
