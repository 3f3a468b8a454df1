use std::path::Path;

use super::CurvePoint;
use crate::agent::IterationRecord;
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            what: "csv",
            detail: format!("{}: {other:?}", path.display()),
        },
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

/// `k,mean,p20,p80,seed_<s>...`, one row per iteration. Reals use the
/// shortest representation that parses back to the same bits.
pub fn write_metrics(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    if curves.is_empty() {
        return Err(Error::format("metrics", "no curve points to write"));
    }
    let mut w = writer(path)?;
    let mut header = vec!["k".to_string(), "mean".into(), "p20".into(), "p80".into()];
    header.extend(curves[0].returns.iter().map(|(s, _)| format!("seed_{s}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for c in curves {
        let mut row = vec![
            c.k.to_string(),
            c.mean.to_string(),
            c.p20.to_string(),
            c.p80.to_string(),
        ];
        row.extend(c.returns.iter().map(|(_, v)| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::format("metrics", format!("{}: bad number `{s}`", path.display())))
}

/// Inverse of [`write_metrics`].
pub fn read_metrics(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let fixed = ["k", "mean", "p20", "p80"];
    if header.len() < 4 || header.iter().take(4).ne(fixed.iter().copied()) {
        return Err(Error::format(
            "metrics",
            format!("{}: unexpected header", path.display()),
        ));
    }
    let seeds = header
        .iter()
        .skip(4)
        .map(|h| {
            h.strip_prefix("seed_")
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| Error::format("metrics", format!("bad seed column `{h}`")))
        })
        .collect::<Result<Vec<u64>>>()?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        if row.len() != header.len() {
            return Err(Error::format("metrics", "row length differs from header"));
        }
        let k = row[0]
            .parse()
            .map_err(|_| Error::format("metrics", format!("bad iteration `{}`", &row[0])))?;
        let returns = seeds
            .iter()
            .zip(row.iter().skip(4))
            .map(|(s, v)| Ok((*s, parse_f64(path, v)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push(CurvePoint {
            k,
            mean: parse_f64(path, &row[1])?,
            p20: parse_f64(path, &row[2])?,
            p80: parse_f64(path, &row[3])?,
            returns,
        });
    }
    Ok(out)
}

/// Per-iteration records of one seed. Wall-clock times are left out so the
/// file is reproducible; they go to `timing.csv`.
pub fn write_records(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "k",
        "episode_return",
        "episode_len",
        "eval_mean",
        "eval_p20",
        "eval_p80",
        "eta",
        "mean_kl",
        "loss_mean",
        "sigma",
        "model_hash",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in records {
        let loss = if r.loss_trace.is_empty() {
            String::new()
        } else {
            (r.loss_trace.iter().sum::<f64>() / r.loss_trace.len() as f64).to_string()
        };
        let sigma: Vec<String> = r.sigma.iter().map(|s| s.to_string()).collect();
        w.write_record([
            r.k.to_string(),
            r.episode_return.to_string(),
            r.episode_len.to_string(),
            r.eval_mean.to_string(),
            r.eval_p20.to_string(),
            r.eval_p80.to_string(),
            r.eta.map(|e| e.to_string()).unwrap_or_default(),
            r.mean_kl.to_string(),
            loss,
            sigma.join(" "),
            format!("{:016x}", r.model_hash),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `seed,k,wall_clock` (seconds).
pub fn write_timing(path: &Path, per_seed: &[(u64, Vec<IterationRecord>)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["seed", "k", "wall_clock"])
        .map_err(|e| csv_err(path, e))?;
    for (seed, recs) in per_seed {
        for r in recs {
            w.write_record([seed.to_string(), r.k.to_string(), r.wall_clock.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
