use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sinklab::diagnostics::report::write_csv;
use sinklab::{Error, Result};

use crate::config::{from_toml_value, parse_toml, ExperimentConfig};
use crate::pipeline::run_train;

/// A baseline experiment and named deltas against it.
///
/// ```toml
/// baseline = "pre_norm"
///
/// [base]            # a complete experiment config
/// ...
///
/// [[variant]]
/// name = "sandwich"
/// [variant.delta.model]
/// norm_kind = "sandwich"
/// ```
#[derive(Debug, Clone)]
pub struct Suite {
    pub baseline: String,
    pub base: toml::Table,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub delta: toml::Table,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteFile {
    #[serde(default = "default_baseline")]
    baseline: String,
    base: toml::Table,
    #[serde(default)]
    variant: Vec<Variant>,
}

fn default_baseline() -> String {
    "baseline".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setup: String,
    pub perplexity: Option<f64>,
    pub sink_ratio: Option<f64>,
    pub spike: Option<f64>,
    pub error: Option<String>,
}

impl Suite {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let file: SuiteFile = from_toml_value(parse_toml(text, origin)?, origin)?;
        let mut names = vec![file.baseline.as_str()];
        for v in &file.variant {
            if v.name.is_empty() || v.name.contains(['/', '\\']) || v.name.starts_with('.') {
                return Err(Error::Config(format!("{origin}: bad variant name {:?}", v.name)));
            }
            if names.contains(&v.name.as_str()) {
                return Err(Error::Config(format!("{origin}: duplicate setup name {:?}", v.name)));
            }
            names.push(&v.name);
        }
        let suite = Suite {
            baseline: file.baseline,
            base: file.base,
            variants: file.variant,
        };
        // fail early on deltas that do not produce a valid config
        for name in suite.setup_names() {
            suite.resolve(&name)?;
        }
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn setup_names(&self) -> Vec<String> {
        std::iter::once(self.baseline.clone())
            .chain(self.variants.iter().map(|v| v.name.clone()))
            .collect()
    }

    /// The experiment config for one named setup, output directed to
    /// `<base output>/<name>`.
    pub fn resolve(&self, name: &str) -> Result<ExperimentConfig> {
        let mut table = self.base.clone();
        if name != self.baseline {
            let v = self
                .variants
                .iter()
                .find(|v| v.name == name)
                .ok_or_else(|| Error::Config(format!("no setup named {name:?}")))?;
            merge(&mut table, &v.delta);
        }
        let mut cfg: ExperimentConfig = from_toml_value(toml::Value::Table(table), &format!("setup {name}"))?;
        cfg.output.dir = cfg.output.dir.join(name);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        let cfg: ExperimentConfig = from_toml_value(toml::Value::Table(self.base.clone()), "base")?;
        Ok(cfg.output.dir)
    }
}

/// Recursive table merge; non-table values in `delta` replace those in `base`.
pub fn merge(base: &mut toml::Table, delta: &toml::Table) {
    for (k, v) in delta {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(d)) => merge(b, d),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Train every setup in turn. A failing setup keeps its row with the error
/// message and the suite moves on.
pub fn run_ablation_suite(suite: &Suite, mut adjust: impl FnMut(&mut ExperimentConfig)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for name in suite.setup_names() {
        log::info!("setup {name}");
        let outcome = suite.resolve(&name).and_then(|mut cfg| {
            adjust(&mut cfg);
            run_train(&cfg)
        });
        rows.push(match outcome {
            Ok(r) => AblationRow {
                setup: name,
                perplexity: r.perplexity,
                sink_ratio: r.sink_ratio,
                spike: r.spike,
                error: None,
            },
            Err(e) => {
                log::warn!("setup {name} failed: {e}");
                AblationRow {
                    setup: name,
                    perplexity: None,
                    sink_ratio: None,
                    spike: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    Ok(rows)
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Aligned plain-text table: Setup, Perplexity, SinkRatio (%), Spike.
pub fn format_table(rows: &[AblationRow]) -> String {
    let header = ["Setup", "Perplexity", "SinkRatio", "Spike"];
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.setup.clone(),
                cell(r.perplexity, 3),
                cell(r.sink_ratio.map(|s| 100.0 * s), 1),
                r.error.as_ref().map_or_else(|| cell(r.spike, 1), |_| "failed".into()),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: [&str; 4]| {
        let _ = write!(out, "{:<w$}", cells[0], w = widths[0]);
        for (c, w) in cells[1..].iter().zip(&widths[1..]) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
    };
    line(&mut out, header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, [&rule[0], &rule[1], &rule[2], &rule[3]]);
    for row in &body {
        line(&mut out, [&row[0], &row[1], &row[2], &row[3]]);
    }
    for r in rows.iter().filter(|r| r.error.is_some()) {
        let _ = writeln!(out, "{}: {}", r.setup, r.error.as_deref().unwrap_or_default());
    }
    out
}

/// Write `ablation.csv` and `ablation.txt` under `dir`.
pub fn write_table(dir: &Path, rows: &[AblationRow]) -> Result<(PathBuf, PathBuf)> {
    let csv = dir.join("ablation.csv");
    let txt = dir.join("ablation.txt");
    write_csv(&csv, rows)?;
    fs::write(&txt, format_table(rows)).map_err(|e| Error::io(&txt, e))?;
    Ok((csv, txt))
}
