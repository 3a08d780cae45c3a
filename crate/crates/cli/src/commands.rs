use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use eopd_core::analysis::{self, EntropyBins};
use eopd_core::io as eio;
use eopd_core::plot::{bar_chart, line_chart, Series};
use eopd_core::synthenv::ContextPolicy;
use eopd_core::toylab::{run_toy_with, ToyRun, ToySummary};
use eopd_core::trainer::{sweep, train_in, SweepAxis, TrainReport};
use eopd_core::{Environment, EopdError, RolloutBuffer, TabularPolicy};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::Manifest;
use crate::staging::Staging;

pub const TOY_TRACES: &str = "toy_traces.csv";
pub const TOY_SUMMARY: &str = "toy_summary.json";
pub const TOY_PLOT: &str = "toy_change_rate.svg";
pub const TOY_MANIFEST: &str = "toy.manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Analysis {
    Histogram,
    Retention,
    Fkl,
    Topk,
    All,
}

impl Analysis {
    pub fn name(self) -> &'static str {
        match self {
            Analysis::Histogram => "histogram",
            Analysis::Retention => "retention",
            Analysis::Fkl => "fkl",
            Analysis::Topk => "topk",
            Analysis::All => "all",
        }
    }

    fn includes(self, other: Analysis) -> bool {
        self == Analysis::All || self == other
    }

    fn needs_model(self) -> bool {
        self != Analysis::Topk
    }
}

fn write_json<T: Serialize>(st: &mut Staging, name: &str, value: &T) -> Result<(), CliError> {
    st.write(name, |w| -> Result<(), CliError> {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| CliError::Input(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn finish(
    mut st: Staging,
    manifest_name: &str,
    mut manifest: Manifest,
) -> Result<Vec<PathBuf>, CliError> {
    manifest.outputs = st.files().to_vec();
    write_json(&mut st, manifest_name, &manifest)?;
    Ok(st.commit()?)
}

/// Writes the diagnostic of a non-finite abort next to the outputs.
fn non_finite(out: &Path, run_id: &str, err: EopdError) -> CliError {
    let EopdError::NonFinite {
        what,
        iteration,
        diagnostic,
    } = err
    else {
        return err.into();
    };
    let path = out.join(format!("{run_id}__nonfinite.json"));
    let record = serde_json::from_str::<serde_json::Value>(&diagnostic)
        .unwrap_or(serde_json::Value::String(diagnostic));
    let body = serde_json::json!({ "what": what, "iteration": iteration, "record": record });
    let written =
        std::fs::create_dir_all(out).and_then(|_| std::fs::write(&path, format!("{body:#}\n")));
    match written {
        Ok(()) => CliError::NonFinite { path },
        Err(e) => CliError::io(format!("writing {}", path.display()))(e),
    }
}

#[derive(Serialize)]
struct ToySummaryFile<'a> {
    scenarios: Vec<&'a ToySummary>,
}

pub fn toy(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let runs = cfg
        .toy_temperatures
        .iter()
        .map(|&t| run_toy_with(&cfg.toy_for(t), cfg.train.execution))
        .collect::<Result<Vec<ToyRun>, _>>()?;
    for run in &runs {
        log::info!(
            "toy T={}: top-1 changes {:.1} +- {:.1}",
            run.summary.temperature,
            run.summary.top1_change_mean,
            run.summary.top1_change_std
        );
    }
    let mut st = Staging::new(out)?;
    let refs: Vec<&ToyRun> = runs.iter().collect();
    st.write(TOY_TRACES, |w| eio::write_toy_csv(w, &refs))?;
    write_json(
        &mut st,
        TOY_SUMMARY,
        &ToySummaryFile {
            scenarios: runs.iter().map(|r| &r.summary).collect(),
        },
    )?;
    if cfg.plot {
        let labels: Vec<String> = runs
            .iter()
            .map(|r| format!("T = {}", r.summary.temperature))
            .collect();
        let series: Vec<Series<'_>> = runs
            .iter()
            .zip(&labels)
            .map(|(r, label)| Series {
                label,
                points: r
                    .summary
                    .smoothed_change_rate
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| ((i + 1) as f64, v))
                    .collect(),
            })
            .collect();
        let svg = line_chart(
            "Top-10 change rate (smoothed)",
            "step",
            "change rate",
            &series,
        );
        st.write_bytes(TOY_PLOT, svg.as_bytes())?;
    }
    finish(st, TOY_MANIFEST, Manifest::new("toy", cfg))
}

fn report_files(st: &mut Staging, stem: &str, report: &TrainReport) -> Result<(), CliError> {
    st.write(&format!("{stem}__train.csv"), |w| {
        eio::write_train_csv(w, report)
    })?;
    write_json(st, &format!("{stem}__train.json"), report)
}

fn train_plot(report: &TrainReport) -> String {
    let rkl = Series {
        label: "reverse KL",
        points: report
            .rows
            .iter()
            .map(|r| (r.iteration as f64, r.reverse_kl))
            .collect(),
    };
    let fkl = Series {
        label: "forward KL (high entropy)",
        points: report
            .rows
            .iter()
            .filter_map(|r| r.forward_kl_high.map(|v| (r.iteration as f64, v)))
            .collect(),
    };
    line_chart(
        &format!("{} training", report.method),
        "iteration",
        "nats",
        &[rkl, fkl],
    )
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let id = &cfg.run_id;
    let env = Environment::build(&cfg.train.env)?;
    let outcome = train_in(&cfg.train, &env).map_err(|e| non_finite(out, id, e))?;
    if let Some(last) = outcome.report.rows.last() {
        log::info!(
            "{}: final reverse KL {:.4}, forward KL (high entropy) {:?}",
            outcome.report.method,
            last.reverse_kl,
            last.forward_kl_high
        );
    }
    let mut st = Staging::new(out)?;
    report_files(&mut st, id, &outcome.report)?;
    st.write(&format!("{id}__student.bin"), |w| {
        eio::write_student(w, &outcome.student)
    })?;
    if let Some(buffer) = &outcome.last_buffer {
        st.write(&format!("{id}__buffer.jsonl"), |w| {
            eio::write_trajectories(w, buffer)
        })?;
    }
    if cfg.plot {
        st.write_bytes(
            &format!("{id}__train.svg"),
            train_plot(&outcome.report).as_bytes(),
        )?;
    }
    finish(
        st,
        &format!("{id}__train.manifest.json"),
        Manifest::new("train", cfg),
    )
}

/// Makes a sweep value safe to embed in a file name.
fn file_token(value: &str) -> String {
    value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn sweep_cmd(
    cfg: &RunConfig,
    axis: &str,
    values: &[String],
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let parsed: SweepAxis = axis
        .parse()
        .map_err(|e: EopdError| CliError::Usage(e.to_string()))?;
    if values.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    let id = &cfg.run_id;
    let result = sweep(&cfg.train, parsed, values).map_err(|e| non_finite(out, id, e))?;
    let mut st = Staging::new(out)?;
    let axis_name = parsed.name();
    for (value, report) in &result.reports {
        report_files(
            &mut st,
            &format!("{id}__{axis_name}-{}", file_token(value)),
            report,
        )?;
    }
    st.write(&format!("{id}__sweep_{axis_name}.csv"), |w| {
        eio::write_sweep_csv(w, axis_name, &result.table)
    })?;
    if cfg.plot {
        let bars: Vec<(String, f64)> = result
            .table
            .iter()
            .map(|r| {
                let v = r
                    .final_row
                    .as_ref()
                    .and_then(|m| m.forward_kl_high)
                    .unwrap_or(f64::NAN);
                (r.value.clone(), v)
            })
            .collect();
        let svg = bar_chart(
            "Final forward KL at high teacher entropy",
            axis_name,
            "nats",
            &bars,
        );
        st.write_bytes(&format!("{id}__sweep_{axis_name}.svg"), svg.as_bytes())?;
    }
    let mut manifest = Manifest::new("sweep", cfg);
    manifest.axis = Some(axis_name.to_string());
    manifest.values = values.to_vec();
    finish(
        st,
        &format!("{id}__sweep_{axis_name}.manifest.json"),
        manifest,
    )
}

fn read_model(path: &Path, env: &Environment) -> Result<TabularPolicy, CliError> {
    let file =
        File::open(path).map_err(CliError::io(format!("opening model {}", path.display())))?;
    let model = eio::read_student(BufReader::new(file))
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if model.vocab() != env.cfg.vocab || model.order() != env.cfg.order {
        return Err(CliError::Usage(format!(
            "model {} has vocab {} and order {}, config expects {} and {}",
            path.display(),
            model.vocab(),
            model.order(),
            env.cfg.vocab,
            env.cfg.order
        )));
    }
    Ok(model)
}

fn read_buffer(path: &Path, seed: u64) -> Result<RolloutBuffer, CliError> {
    let file =
        File::open(path).map_err(CliError::io(format!("opening buffer {}", path.display())))?;
    let trajectories = eio::read_trajectories(BufReader::new(file))
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(RolloutBuffer {
        seed,
        iteration: 0,
        trajectories,
    })
}

pub struct AnalyzeArgs<'a> {
    pub analysis: Analysis,
    pub model: Option<&'a Path>,
    pub buffer: Option<&'a Path>,
}

pub fn analyze(
    cfg: &RunConfig,
    args: &AnalyzeArgs<'_>,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let id = &cfg.run_id;
    let a = &cfg.analysis;
    let exec = cfg.train.execution;
    let env = Environment::build(&cfg.train.env)?;
    let which = args.analysis;
    let model = match (which.needs_model(), args.model) {
        (true, Some(path)) => Some(read_model(path, &env)?),
        (true, None) => {
            return Err(CliError::Usage(format!(
                "analysis '{}' needs --model",
                which.name()
            )))
        }
        (false, _) => None,
    };
    let buffer = args
        .buffer
        .map(|p| read_buffer(p, cfg.train.seed))
        .transpose()?;
    if let Some(buffer) = &buffer {
        let states = env.num_states();
        if buffer.records().any(|r| {
            r.state >= states || r.teacher.topk.indices.iter().any(|&i| i >= env.cfg.vocab)
        }) {
            return Err(CliError::Usage(
                "buffer does not match the configured environment".into(),
            ));
        }
    }

    let mut st = Staging::new(out)?;
    if let (true, Some(model)) = (which.includes(Analysis::Histogram), &model) {
        let bins = EntropyBins::log_spaced(env.cfg.vocab, a.bins)?;
        let student = analysis::entropy_histogram(model, &env, a.rollouts, &bins, a.seed, exec)?;
        let teacher =
            analysis::entropy_histogram(&env.teacher, &env, a.rollouts, &bins, a.seed, exec)?;
        st.write(&format!("{id}__histogram.csv"), |w| {
            eio::write_histogram_csv(w, &[("student", &student), ("teacher", &teacher)])
        })?;
        if cfg.plot {
            let series = [("student", &student), ("teacher", &teacher)].map(|(label, h)| Series {
                label,
                points: h
                    .edges
                    .iter()
                    .zip(&h.fractions)
                    .map(|(&e, &f)| (e, f))
                    .collect(),
            });
            let svg = line_chart(
                "Token entropy distribution",
                "entropy (nats)",
                "fraction",
                &series,
            );
            st.write_bytes(&format!("{id}__histogram.svg"), svg.as_bytes())?;
        }
    }
    if let (true, Some(model)) = (which.includes(Analysis::Retention), &model) {
        let r = analysis::high_entropy_retention(
            model,
            &env,
            a.retention_threshold,
            a.rollouts,
            a.seed,
            exec,
        )?;
        log::info!(
            "retention: student {:.4}, teacher {:.4}",
            r.student_fraction,
            r.teacher_fraction
        );
        st.write(&format!("{id}__retention.csv"), |w| {
            eio::write_retention_csv(w, &r)
        })?;
    }
    if let (true, Some(model)) = (which.includes(Analysis::Fkl), &model) {
        let (label, v) = match &buffer {
            Some(b) => (
                "student_on_buffer",
                analysis::fkl_at_high_entropy(model, b, a.fkl_tau)?,
            ),
            None => (
                "student",
                analysis::fkl_at_high_entropy_env(
                    model,
                    &env,
                    a.fkl_tau,
                    cfg.train.top_k,
                    a.rollouts,
                    a.seed,
                    exec,
                )?,
            ),
        };
        st.write(&format!("{id}__fkl.csv"), |w| {
            eio::write_fkl_csv(w, a.fkl_tau, &[(label, v)])
        })?;
    }
    if which.includes(Analysis::Topk) {
        let visits = match &buffer {
            Some(b) => b.visit_counts(),
            None => analysis::teacher_visits(&env, a.rollouts, a.seed, exec)?,
        };
        let rows = analysis::topk_tradeoff(&env.teacher, &visits, &a.k_values)?;
        st.write(&format!("{id}__topk.csv"), |w| {
            eio::write_topk_csv(w, &rows)
        })?;
        if cfg.plot {
            let bars: Vec<(String, f64)> = rows
                .iter()
                .map(|r| (r.k.to_string(), r.mean_mass))
                .collect();
            let svg = bar_chart("Teacher top-k mass", "k", "mean mass", &bars);
            st.write_bytes(&format!("{id}__topk.svg"), svg.as_bytes())?;
        }
    }
    let mut manifest = Manifest::new("analyze", cfg);
    manifest.analysis = Some(which.name().to_string());
    manifest.model = args.model.map(|p| p.display().to_string());
    manifest.buffer = args.buffer.map(|p| p.display().to_string());
    finish(
        st,
        &format!("{id}__analyze_{}.manifest.json", which.name()),
        manifest,
    )
}
