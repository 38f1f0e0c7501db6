use std::fs;
use std::path::Path;

use anyhow::{bail, Result};
use serde::Serialize;

use adtg::config::{derive_seed, stream, RunConfig};
use adtg::corpus::synth::{self, SynthTaskSpec, CROSSTASK_PRIMARY};
use adtg::corpus::{
    compressed_sequence, corpus_stats, framewise_labels, load_corpus, render_stats, save_corpus, Corpus, CorpusError,
    StatsRow,
};
use adtg::eval::{build_graphs as build_task_graphs, evaluate, EvalMode, EvalOptions, Guide};
use adtg::graph::GraphError;
use adtg::store::StoreError;

use crate::stages::{run_dir, Run};
use crate::{Preset, SplitArg};

/// 2 for bad input or configuration, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        let validation = if let Some(e) = cause.downcast_ref::<adtg::Error>() {
            Some(e.is_validation())
        } else if let Some(e) = cause.downcast_ref::<CorpusError>() {
            Some(!matches!(e, CorpusError::Io { .. }))
        } else if let Some(e) = cause.downcast_ref::<StoreError>() {
            Some(!matches!(e, StoreError::Io { .. }))
        } else if cause.downcast_ref::<GraphError>().is_some() {
            Some(true)
        } else {
            None
        };
        if let Some(v) = validation {
            return if v { 2 } else { 1 };
        }
    }
    1
}

fn usage(msg: String) -> anyhow::Error {
    adtg::Error::Usage(msg).into()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn preset_specs(preset: Preset, seed: u64, video_scale: f64) -> Vec<SynthTaskSpec> {
    match preset {
        Preset::Chain => vec![synth::chain_spec(5, seed)],
        Preset::Separable => vec![synth::separable_spec(seed)],
        Preset::Ambiguous => vec![synth::ambiguous_spec(seed)],
        Preset::Suite => synth::suite_specs(seed),
        Preset::Crosstask18 => synth::crosstask18_specs(seed, video_scale),
    }
}

pub fn synth(cfg: &RunConfig, preset: Option<Preset>, video_scale: f64) -> Result<()> {
    let specs = match (preset, cfg.synth.is_empty()) {
        (Some(p), true) => preset_specs(p, derive_seed(cfg.seeds[0], stream::SYNTH), video_scale),
        (None, false) => cfg.synth.clone(),
        (Some(_), false) => return Err(adtg::Error::Config("give either --preset or synth specs in the config, not both".into()).into()),
        (None, true) => return Err(adtg::Error::Config("no synth specs in the config and no --preset".into()).into()),
    };
    if !(video_scale > 0.0 && video_scale.is_finite()) {
        return Err(usage(format!("--video-scale must be positive, got {video_scale}")));
    }
    let (corpus, tasks) = synth::generate_suite(&specs)?;
    save_corpus(&corpus, &cfg.corpus)?;
    synth::write_truth_graphs(&tasks, &cfg.corpus)?;
    write(
        &cfg.corpus.join("synth_specs.json"),
        &serde_json::to_string_pretty(&specs).expect("specs serialize"),
    )?;
    print!("{}", render_stats(&corpus_stats(&corpus)?));
    log::info!("wrote {} tasks to {}", corpus.tasks.len(), cfg.corpus.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct VerifyRow {
    task_id: String,
    videos: usize,
    action_space: usize,
    null_fraction: f64,
    reference: Option<(usize, usize, f64)>,
    ok: Option<bool>,
}

pub fn ingest_verify(cfg: &RunConfig, tolerance: f64, strict: bool) -> Result<()> {
    if !(tolerance >= 0.0 && tolerance.is_finite()) {
        return Err(usage(format!("--tolerance must be non-negative, got {tolerance}")));
    }
    let corpus = load_corpus(&cfg.corpus)?;
    corpus.validate()?;
    let rows = corpus_stats(&corpus)?;
    let close = |got: usize, want: usize| (got as f64 - want as f64).abs() <= tolerance * want as f64;
    let report: Vec<VerifyRow> = rows
        .iter()
        .map(|r| {
            let reference = CROSSTASK_PRIMARY
                .iter()
                .find(|(id, ..)| *id == r.task_id)
                .map(|&(_, v, a, n)| (v, a, n as f64 / 100.0));
            VerifyRow {
                task_id: r.task_id.clone(),
                videos: r.videos,
                action_space: r.action_space,
                null_fraction: r.null_fraction,
                reference,
                ok: reference.map(|(v, a, _)| close(r.videos, v) && close(r.action_space, a)),
            }
        })
        .collect();
    let width = report.iter().map(|r| r.task_id.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:>13}  {:>9}  {:>13}  status", "task", "videos", "A_T", "null%");
    for r in &report {
        let (rv, ra, rn) = match r.reference {
            Some((v, a, n)) => (v.to_string(), a.to_string(), format!("{:.0}", n * 100.0)),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let status = match r.ok {
            Some(true) => "ok",
            Some(false) => "MISMATCH",
            None => "no reference",
        };
        println!(
            "{:<width$}  {:>6}/{:<6}  {:>4}/{:<4}  {:>6.1}/{:<6}  {status}",
            r.task_id,
            r.videos,
            rv,
            r.action_space,
            ra,
            r.null_fraction * 100.0,
            rn
        );
    }
    let total: f64 = rows.iter().map(|r| r.null_fraction).sum::<f64>() / rows.len().max(1) as f64;
    println!("mean null fraction {:.1}%", total * 100.0);
    write(
        &cfg.out.join("ingest_verify.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let bad: Vec<&str> = report.iter().filter(|r| r.ok == Some(false)).map(|r| r.task_id.as_str()).collect();
    if strict && !bad.is_empty() {
        return Err(adtg::Error::Config(format!("statistics differ from the reference for {}", bad.join(", "))).into());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct GraphReport {
    task_id: String,
    train_videos: usize,
    skipped_empty: usize,
    nodes: usize,
    edges: usize,
    unseen_val_transitions: usize,
    unseen_test_transitions: usize,
    /// Ground-truth edges absent from the graph, when the corpus has them.
    truth_edges_missing: Option<usize>,
    /// Graph edges absent from the ground truth.
    extra_edges: Option<usize>,
}

fn unseen(split: &Corpus, task_id: &str, g: &adtg::graph::Adtg) -> Result<usize> {
    let Some(task) = split.task(task_id) else { return Ok(0) };
    let mut n = 0;
    for v in &task.videos {
        let seq = compressed_sequence(&framewise_labels(v, &task.vocab)?);
        n += g.unseen_transitions(&seq).len();
    }
    Ok(n)
}

pub fn build_graphs(cfg: &RunConfig) -> Result<()> {
    let run = Run::open(cfg)?;
    let data = &run.data;
    let (graphs, _) = build_task_graphs(&data.train)?;
    let dir = cfg.out.join("graphs");
    let mut report = Vec::new();
    for task in &data.train.tasks {
        let id = task.task_id();
        let g = &graphs[id];
        let mut skipped = 0;
        for v in &task.videos {
            let seq = compressed_sequence(&framewise_labels(v, &task.vocab)?);
            if seq.is_empty() {
                skipped += 1;
            } else if !g.is_replayable(&seq) {
                bail!("graph of task {id} cannot replay training video {}", v.video_id);
            }
        }
        write(&dir.join(format!("{id}.json")), &g.to_json())?;
        write(&dir.join(format!("{id}.dot")), &g.to_dot())?;
        let truth = cfg.corpus.join(id).join("truth_graph.json");
        let (missing, extra) = if truth.exists() {
            let (_, edges) = synth::read_truth_graph(&truth)?;
            let names: std::collections::BTreeSet<(String, String)> = g
                .edges()
                .map(|(a, b, _)| (task.vocab.name(a).to_string(), task.vocab.name(b).to_string()))
                .collect();
            let truth: std::collections::BTreeSet<(String, String)> = edges.into_iter().collect();
            (Some(truth.difference(&names).count()), Some(names.difference(&truth).count()))
        } else {
            (None, None)
        };
        report.push(GraphReport {
            task_id: id.to_string(),
            train_videos: task.videos.len(),
            skipped_empty: skipped,
            nodes: g.nodes().count(),
            edges: g.edges().count(),
            unseen_val_transitions: unseen(&data.val, id, g)?,
            unseen_test_transitions: unseen(&data.test, id, g)?,
            truth_edges_missing: missing,
            extra_edges: extra,
        });
    }
    for r in &report {
        println!(
            "{}: {} nodes, {} edges from {} train videos; unseen transitions val {} test {}{}",
            r.task_id,
            r.nodes,
            r.edges,
            r.train_videos,
            r.unseen_val_transitions,
            r.unseen_test_transitions,
            match (r.truth_edges_missing, r.extra_edges) {
                (Some(m), Some(x)) => format!("; vs ground truth {m} missing, {x} extra"),
                _ => String::new(),
            }
        );
    }
    write(&dir.join("report.json"), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok(())
}

fn parse_modes(modes: &[String]) -> Result<Vec<EvalMode>> {
    let mut out = Vec::new();
    for m in modes {
        if m == "all" {
            out.extend(EvalMode::ALL);
        } else {
            out.push(m.parse()?);
        }
    }
    out.dedup();
    Ok(out)
}

pub fn eval(cfg: &RunConfig, modes: &[String], split: SplitArg) -> Result<()> {
    let modes = parse_modes(modes)?;
    let run = Run::open(cfg)?;
    let models = cfg.seeds.iter().map(|s| run.model(*s)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<(u64, &dyn Guide)> = models.iter().map(|m| (m.seed, m as &dyn Guide)).collect();
    let (name, data) = match split {
        SplitArg::Train => ("train", &run.data.train),
        SplitArg::Val => ("val", &run.data.val),
        SplitArg::Test => ("test", &run.data.test),
    };
    let opts = EvalOptions::from_config(cfg);
    let dir = cfg.out.join(cfg.variant.name()).join("eval");
    for mode in modes {
        let report = evaluate(data, &refs, &cfg.seeds, mode, &opts)?;
        let table = report.to_table();
        print!("{table}");
        if !report.counts.is_empty() {
            println!("counts {:?}", report.counts);
        }
        println!();
        write(&dir.join(format!("{name}_{}.json", mode.name())), &report.to_json())?;
        write(&dir.join(format!("{name}_{}.txt", mode.name())), &table)?;
    }
    Ok(())
}

pub fn plan(cfg: &RunConfig, video_id: &str, cut: usize) -> Result<()> {
    let run = Run::open(cfg)?;
    let seed = cfg.seeds[0];
    let found = [&run.data.train, &run.data.val, &run.data.test]
        .into_iter()
        .zip(["train", "val", "test"])
        .find_map(|(c, name)| c.tasks.iter().find_map(|t| t.video(video_id).map(|v| (t, v, name))));
    let Some((task, video, split)) = found else {
        return Err(usage(format!("unknown video {video_id:?}")));
    };
    let labels = framewise_labels(video, &task.vocab)?;
    if cut >= labels.len() {
        return Err(usage(format!("--cut must be below the video length {}, got {cut}", labels.len())));
    }
    let model = run.model(seed)?;
    let graph = model
        .graph(task.task_id())
        .ok_or_else(|| adtg::Error::Config(format!("no graph for task {}", task.task_id())))?;
    let prefix = compressed_sequence(&labels[..cut]);
    let truth = compressed_sequence(&labels[cut..]);
    let x = video.features.frame_f64(cut + 1);
    let plan = model.view().plan(graph, &x, &prefix, cfg.guidance.beam_width, cfg.guidance.max_len)?;
    let name = |a| task.vocab.name(a).to_string();
    println!(
        "video {video_id} ({split} split, task {}), seed {seed}, planning from second {}",
        task.task_id(),
        cut + 1
    );
    let prefix_names: Vec<String> = prefix.iter().map(|a| name(*a)).collect();
    println!("observed: {}", if prefix_names.is_empty() { "(nothing)".into() } else { prefix_names.join(" -> ") });
    let width = truth.iter().chain(&plan.actions).map(|a| name(*a).len()).max().unwrap_or(0).max(12);
    println!("{:>4}  {:<width$}  {:<width$}", "step", "ground truth", "plan");
    for i in 0..truth.len().max(plan.actions.len()) {
        let t = truth.get(i).map(|a| name(*a)).unwrap_or_default();
        let p = plan.actions.get(i).map(|a| name(*a)).unwrap_or_default();
        let mark = if truth.get(i) == plan.actions.get(i) { "" } else { "  *" };
        println!("{:>4}  {t:<width$}  {p:<width$}{mark}", i + 1);
    }
    println!(
        "log-probability {:.4}; {}",
        plan.log_prob,
        if plan.finished { "ended with EOS" } else { "stopped at the length limit" }
    );
    let path = run_dir(cfg, seed).join("plans").join(format!("{video_id}_cut{cut}.jsonl"));
    write(&path, &plan.trace_jsonl())?;
    println!("trace: {}", path.display());
    Ok(())
}

pub fn stats(cfg: &RunConfig, json: bool) -> Result<()> {
    let corpus = load_corpus(&cfg.corpus)?;
    let rows: Vec<StatsRow> = corpus_stats(&corpus)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
    } else {
        print!("{}", render_stats(&rows));
    }
    Ok(())
}
