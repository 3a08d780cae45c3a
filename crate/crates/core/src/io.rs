//! Student checkpoints, trajectory JSONL and CSV tables.

use std::io::{BufRead, Read, Write};

use crate::analysis::{Histogram, Retention, TopKRow};
use crate::error::{EopdError, Result};
use crate::synthenv::{ContextPolicy, RolloutBuffer, TabularPolicy, Trajectory};
use crate::toylab::ToyRun;
use crate::trainer::{MetricsRow, SweepRow, TrainReport};

pub const STUDENT_MAGIC: &[u8; 4] = b"EOPD";
pub const STUDENT_VERSION: u32 = 1;

/// Writes `magic, version, vocab, order` as little-endian u32s followed by
/// the logit table as little-endian f64s.
pub fn write_student<W: Write>(mut w: W, student: &TabularPolicy) -> Result<()> {
    w.write_all(STUDENT_MAGIC)?;
    for v in [
        STUDENT_VERSION,
        to_u32(student.vocab())?,
        to_u32(student.order())?,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for x in student.logits() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| EopdError::Format(format!("{v} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| EopdError::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_student<R: Read>(mut r: R) -> Result<TabularPolicy> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| EopdError::Format(format!("truncated header: {e}")))?;
    if &magic != STUDENT_MAGIC {
        return Err(EopdError::Format(
            "not a student checkpoint (bad magic)".into(),
        ));
    }
    let version = read_u32(&mut r)?;
    if version != STUDENT_VERSION {
        return Err(EopdError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let vocab = read_u32(&mut r)? as usize;
    let order = read_u32(&mut r)? as usize;
    let rows = u32::try_from(order)
        .ok()
        .and_then(|o| vocab.checked_pow(o))
        .filter(|&n| n <= 1_000_000)
        .ok_or_else(|| {
            EopdError::Format(format!("implausible shape vocab={vocab} order={order}"))
        })?;
    let len = rows * vocab;
    let mut bytes = Vec::with_capacity(len * 8);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != len * 8 {
        return Err(EopdError::Format(format!(
            "expected {} bytes of logits, found {}",
            len * 8,
            bytes.len()
        )));
    }
    let logits = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    TabularPolicy::from_logits(vocab, order, logits)
}

/// One JSON trajectory per line.
pub fn write_trajectories<W: Write>(mut w: W, buffer: &RolloutBuffer) -> Result<()> {
    for t in &buffer.trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line)
            .map_err(|e| EopdError::Format(format!("line {}: {e}", i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> EopdError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => EopdError::Io(e),
        other => EopdError::Format(format!("{other:?}")),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

const METRICS_HEADER: [&str; 10] = [
    "iteration",
    "tokens",
    "grad_steps",
    "mean_loss",
    "reverse_kl",
    "forward_kl_high",
    "gate_fraction",
    "high_entropy_fraction",
    "clipped_fraction",
    "student_entropy",
];

fn metrics_fields(r: &MetricsRow) -> [String; 10] {
    [
        r.iteration.to_string(),
        r.tokens.to_string(),
        r.grad_steps.to_string(),
        r.mean_loss.to_string(),
        r.reverse_kl.to_string(),
        opt(r.forward_kl_high),
        r.gate_fraction.to_string(),
        r.high_entropy_fraction.to_string(),
        r.clipped_fraction.to_string(),
        r.student_entropy.to_string(),
    ]
}

pub fn write_train_csv<W: Write>(w: W, report: &TrainReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["method"];
    header.extend(METRICS_HEADER);
    out.write_record(&header).map_err(csv_err)?;
    for row in &report.rows {
        let mut rec = vec![report.method.name().to_string()];
        rec.extend(metrics_fields(row));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per sweep value with its final-iteration metrics.
pub fn write_sweep_csv<W: Write>(w: W, axis: &str, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![axis];
    header.extend(METRICS_HEADER);
    out.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![row.value.clone()];
        match &row.final_row {
            Some(m) => rec.extend(metrics_fields(m)),
            None => rec.extend(std::iter::repeat_n(String::new(), METRICS_HEADER.len())),
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Long-format step traces; `runs` may hold several temperatures.
pub fn write_toy_csv<W: Write>(w: W, runs: &[&ToyRun]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "temperature",
        "seed",
        "step",
        "change_rate",
        "smoothed_change_rate",
        "top1_index",
        "top1_changes",
        "sampled",
        "reward",
    ])
    .map_err(csv_err)?;
    for run in runs {
        let window = run.config.smoothing_window;
        for trace in &run.traces {
            let smoothed = crate::toylab::smooth(&trace.change_rates(), window);
            for (rec, s) in trace.records.iter().zip(smoothed) {
                out.write_record([
                    run.config.temperature.to_string(),
                    trace.seed.to_string(),
                    rec.step.to_string(),
                    rec.change_rate.to_string(),
                    s.to_string(),
                    rec.top1_index.to_string(),
                    rec.top1_changes.to_string(),
                    rec.sampled.to_string(),
                    rec.reward.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// One row per model and bin.
pub fn write_histogram_csv<W: Write>(w: W, hists: &[(&str, &Histogram)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "bin_lo", "bin_hi", "count", "fraction"])
        .map_err(csv_err)?;
    for (name, h) in hists {
        for (i, (&c, &f)) in h.counts.iter().zip(&h.fractions).enumerate() {
            out.write_record([
                name.to_string(),
                h.edges[i].to_string(),
                h.edges[i + 1].to_string(),
                c.to_string(),
                f.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_retention_csv<W: Write>(w: W, r: &Retention) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["threshold", "student_fraction", "teacher_fraction", "ratio"])
        .map_err(csv_err)?;
    out.write_record([
        r.threshold.to_string(),
        r.student_fraction.to_string(),
        r.teacher_fraction.to_string(),
        opt(r.ratio),
    ])
    .map_err(csv_err)?;
    out.flush()?;
    Ok(())
}

/// Forward KL at high teacher entropy, one row per named model.
pub fn write_fkl_csv<W: Write>(w: W, tau: f64, rows: &[(&str, Option<f64>)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "tau", "forward_kl_high"])
        .map_err(csv_err)?;
    for (name, v) in rows {
        out.write_record([name.to_string(), tau.to_string(), opt(*v)])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_topk_csv<W: Write>(w: W, rows: &[TopKRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
