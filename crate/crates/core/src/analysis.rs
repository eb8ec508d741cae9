//! Post-hoc analysis: subnet-grid accuracy, Kendall's tau, metrics trails and
//! plot-data export.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{enumerate_masks, ModelParams, SubnetMask};
use crate::trainer::{evaluate_accuracy, MetricRecord};

/// Subnets retaining at least this fraction of blocks count as large.
pub const LARGE_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub mask: SubnetMask,
    pub retained_fraction: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub mean_all: f64,
    /// `None` only if no mask reaches [`LARGE_FRACTION`].
    pub mean_large: Option<f64>,
}

/// Accuracy of every ordered subnet, in lexicographic mask order.
pub fn subnet_grid_eval(model: &ModelParams, data: &Dataset, cap: usize) -> Result<GridReport> {
    let config = model.config();
    let masks = enumerate_masks(config, cap).map_err(|e| match e {
        Error::EnumerationCap { count, cap } => Error::InvalidArgument(format!(
            "{count} subnets exceed the enumeration cap {cap}; evaluate a sample of masks instead"
        )),
        other => other,
    })?;
    let rows = masks
        .into_iter()
        .map(|mask| {
            Ok(GridRow {
                retained_fraction: mask.retained_fraction(config),
                accuracy: evaluate_accuracy(model, &mask, data)?,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| s / n as f64)
    };
    let mean_all = mean(&mut rows.iter().map(|r| r.accuracy)).expect("at least one mask");
    let mean_large = mean(
        &mut rows
            .iter()
            .filter(|r| r.retained_fraction >= LARGE_FRACTION)
            .map(|r| r.accuracy),
    );
    Ok(GridReport {
        rows,
        mean_all,
        mean_large,
    })
}

/// Tau-a: `(concordant - discordant) / (n(n-1)/2)`; tied pairs count as
/// neither.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "kendall tau needs two equal-length series of at least 2 values (got {} and {})",
            xs.len(),
            ys.len()
        )));
    }
    if !xs.iter().chain(ys).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("kendall tau input"));
    }
    let n = xs.len();
    let mut score: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            let s = (xs[i] - xs[j]).signum() * (ys[i] - ys[j]).signum();
            if xs[i] != xs[j] && ys[i] != ys[j] {
                score += s as i64;
            }
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

pub fn write_metrics<W: Write>(records: &[MetricRecord], mut w: W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format {
            what: "metrics",
            detail: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io("writing metrics", e))?;
    }
    w.flush().map_err(|e| Error::io("writing metrics", e))
}

/// Parses a JSON Lines metrics trail; blank lines are skipped.
pub fn read_metrics<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", origin.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_metrics(std::io::BufReader::new(file), path)
}

/// Writes `loss.csv`, `accuracy.csv` and `retained.csv` into `out_dir`.
pub fn emit_plot_data(records: &[MetricRecord], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let open = |name: &str| -> Result<csv::Writer<std::fs::File>> {
        let path = out_dir.join(name);
        csv::Writer::from_path(&path).map_err(|e| Error::Format {
            what: "plot csv",
            detail: format!("{}: {e}", path.display()),
        })
    };
    let csv_err = |e: csv::Error| Error::Format {
        what: "plot csv",
        detail: e.to_string(),
    };
    let mut loss = open("loss.csv")?;
    let mut acc = open("accuracy.csv")?;
    let mut kept = open("retained.csv")?;
    loss.write_record(["step", "ce_loss", "kl_loss", "total_loss"])
        .map_err(csv_err)?;
    acc.write_record([
        "epoch",
        "main_acc",
        "subnet_mean_acc",
        "large_subnet_mean_acc",
    ])
    .map_err(csv_err)?;
    kept.write_record(["step", "retained_fraction", "macs"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        match r {
            MetricRecord::Step(s) => {
                loss.write_record([
                    s.step.to_string(),
                    s.ce_loss.to_string(),
                    s.kl_loss.to_string(),
                    s.total_loss.to_string(),
                ])
                .map_err(csv_err)?;
                kept.write_record([
                    s.step.to_string(),
                    s.retained_fraction.to_string(),
                    s.macs.to_string(),
                ])
                .map_err(csv_err)?;
            }
            MetricRecord::Eval(e) => {
                acc.write_record([
                    e.epoch.to_string(),
                    e.main_acc.to_string(),
                    opt(e.subnet_mean_acc),
                    opt(e.large_subnet_mean_acc),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    for w in [&mut loss, &mut acc, &mut kept] {
        w.flush().map_err(|e| Error::io("writing plot csv", e))?;
    }
    Ok(())
}
