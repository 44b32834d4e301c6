//! Subcommand implementations. Each stage reads what the previous one wrote
//! into the output directory.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use diffgda::checkpoint::Checkpoint;
use diffgda::csbm::gen_csbm_pair;
use diffgda::graph::{load_graph, save_graph, Graph};
use diffgda::pipeline::{
    self, evaluate_f1, matrix_text, metrics_jsonl, run_pipeline, write_jsonl, GuidanceStage, ScoreStage, TargetGnn,
};
use serde::Serialize;

use crate::config::RunConfig;

pub const SOURCE_FILE: &str = "source.graph";
pub const TARGET_FILE: &str = "target.graph";
pub const SCORE_CKPT: &str = "score.ckpt";
pub const GUIDANCE_CKPT: &str = "guidance.ckpt";
pub const GNN_CKPT: &str = "gnn.ckpt";
pub const GENERATED_FILE: &str = "generated.graph";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

fn graph(path: &Path, role: &str) -> Result<Graph> {
    load_graph(path).with_context(|| format!("cannot load {role} graph {}", path.display()))
}

fn checkpoint(path: &Path, stage: &str) -> Result<Checkpoint> {
    if !path.exists() {
        anyhow::bail!("missing checkpoint {} (run `{stage}` first)", path.display());
    }
    Ok(Checkpoint::load(path)?)
}

fn json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("cannot write {}", path.display()))
}

pub fn gen_synth(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.synth.spec()?;
    let (s, t) = gen_csbm_pair(&spec, cfg.train.seed)?;
    fs::create_dir_all(&cfg.out)?;
    save_graph(&s, cfg.out.join(SOURCE_FILE))?;
    save_graph(&t, cfg.out.join(TARGET_FILE))?;
    println!(
        "wrote {} and {} ({} nodes, {} and {} edges)",
        SOURCE_FILE,
        TARGET_FILE,
        s.n(),
        s.edge_count(),
        t.edge_count()
    );
    Ok(())
}

pub fn train_score(cfg: &RunConfig) -> Result<()> {
    let source = graph(&cfg.source_path(), "source")?;
    let target = graph(&cfg.target_path(), "target")?;
    let stage = pipeline::run_score_stage(&source, &target, &cfg.train)?;
    fs::create_dir_all(&cfg.out)?;
    stage.to_checkpoint().save(cfg.out.join(SCORE_CKPT))?;
    write_jsonl(cfg.out.join("score_loss.jsonl"), &stage.trace)?;
    if let Some(last) = stage.trace.last() {
        println!("score model trained: final loss {:.4}", last.total());
    }
    Ok(())
}

pub fn train_guidance(cfg: &RunConfig) -> Result<()> {
    let source = graph(&cfg.source_path(), "source")?;
    let target = graph(&cfg.target_path(), "target")?;
    let score = ScoreStage::from_checkpoint(&checkpoint(&cfg.out.join(SCORE_CKPT), "train-score")?)?;
    let stage = pipeline::run_guidance_stage(&source, &target, &score.frame, &cfg.train)?;
    stage.to_checkpoint().save(cfg.out.join(GUIDANCE_CKPT))?;
    write_jsonl(cfg.out.join("guidance_loss.jsonl"), &stage.trace)?;
    json(&cfg.out.join("classifier.json"), &stage.report)?;
    println!("domain classifier accuracy {:.3}", stage.report.accuracy);
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let source = graph(&cfg.source_path(), "source")?;
    let score = ScoreStage::from_checkpoint(&checkpoint(&cfg.out.join(SCORE_CKPT), "train-score")?)?;
    let guide = GuidanceStage::from_checkpoint(&checkpoint(&cfg.out.join(GUIDANCE_CKPT), "train-guidance")?)?;
    let g = pipeline::run_generate_stage(&source, &score, Some(&guide), &cfg.train)?;
    save_graph(&g.graph, cfg.out.join(GENERATED_FILE))?;
    println!("generated graph: {} nodes, {} edges", g.graph.n(), g.graph.edge_count());
    Ok(())
}

pub fn adapt(cfg: &RunConfig) -> Result<()> {
    let path = cfg.out.join(GENERATED_FILE);
    if !path.exists() {
        anyhow::bail!("missing {} (run `generate` first)", path.display());
    }
    let generated = graph(&path, "generated")?;
    let target = graph(&cfg.target_path(), "target")?;
    let trained = pipeline::train_target_gnn(&generated, &target, &cfg.train)?;
    let mut ck = Checkpoint::new();
    trained.model.to_checkpoint(&mut ck);
    ck.save(cfg.out.join(GNN_CKPT))?;
    fs::write(cfg.out.join(METRICS_FILE), metrics_jsonl(&trained.metrics, &trained.records)?)?;
    let (emb, _) = trained.model.predict(&target)?;
    fs::write(cfg.out.join(EMBEDDINGS_FILE), matrix_text(&emb))?;
    report(&trained.metrics);
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    micro_f1: f64,
    macro_f1: f64,
    nodes: usize,
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let model = TargetGnn::from_checkpoint(&checkpoint(&cfg.out.join(GNN_CKPT), "adapt")?)?;
    let target = graph(&cfg.target_path(), "target")?;
    let (_, pred) = model.predict(&target)?;
    let (p, t): (Vec<usize>, Vec<usize>) = target
        .labels()
        .iter()
        .zip(&pred)
        .filter_map(|(l, &p)| l.map(|l| (p, l)))
        .unzip();
    let (micro_f1, macro_f1) = evaluate_f1(&p, &t, target.c())?;
    json(
        &cfg.out.join("eval.json"),
        &EvalReport {
            micro_f1,
            macro_f1,
            nodes: p.len(),
        },
    )?;
    println!("Mi-F1 {micro_f1:.4}  Ma-F1 {macro_f1:.4}  ({} labeled nodes)", p.len());
    Ok(())
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let source = graph(&cfg.source_path(), "source")?;
    let target = graph(&cfg.target_path(), "target")?;
    let out = run_pipeline(&source, &target, &cfg.train)?;
    out.write_artifacts(&cfg.out)?;
    report(out.metrics());
    Ok(())
}

fn report(m: &diffgda::pipeline::Metrics) {
    println!(
        "Mi-F1 {:.4} ± {:.4}  Ma-F1 {:.4} ± {:.4}  over {} rounds",
        m.mi_mean,
        m.mi_std,
        m.ma_mean,
        m.ma_std,
        m.rounds.len()
    );
}
