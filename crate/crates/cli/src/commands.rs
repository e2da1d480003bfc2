//! Command implementations. Each command writes its outputs atomically, then a manifest listing
//! the digests of everything it read and wrote.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use rayon::prelude::*;
use serde_json::json;

use ecm_sphere::checkpoint::Checkpoint;
use ecm_sphere::data::EmbeddingDataset;
use ecm_sphere::eval::{embed_dataset, evaluate, v_measure_at_dim, EvalConfig};
use ecm_sphere::heads::pool_and_embed;
use ecm_sphere::losses::LossKind;
use ecm_sphere::metrics::mds_project;
use ecm_sphere::metrics::theory::{theory_check_sincere_simplex, SimplexCheckConfig};
use ecm_sphere::report::{matrix_csv, scatter_svg, scores_csv};
use ecm_sphere::synth::{synth_generate, Split, SynthConfig};
use ecm_sphere::tensor::{norm, Tensor};
use ecm_sphere::trainer::{train, Scheduler, TrainConfig};
use ecm_sphere::{EcmConfig, Error, HeadConfig, HeadKind, HeadParams, Pooling};

use crate::manifest::{file_sha256, sibling, write_atomic, RunManifest, TOOL};
use crate::{
    Cli, ClusterArgs, Command, EvalArgs, GeneratorArgs, ImportArgs, OptimArgs, ReplayArgs, ReplayMismatch,
    SweepDimsArgs, SweepLabelsArgs, SynthArgs, TraceArgs, TrainArgs, VerifyArgs,
};

const UNIT_TOL: f64 = 1e-9;

pub fn execute(cmd: &Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::SweepDims(a) => sweep_dims(a, argv),
        Command::SweepLabels(a) => sweep_labels(a, argv),
        Command::Verify(a) => verify(a, argv),
        Command::Trace(a) => trace(a, argv),
        Command::Import(a) => import(a, argv),
        Command::Replay(a) => replay(a),
    }
}

fn load_ecm(path: Option<&Path>) -> Result<EcmConfig> {
    match path {
        Some(p) => EcmConfig::load(p).with_context(|| format!("cannot load ECM config {}", p.display())),
        None => Ok(EcmConfig::default()),
    }
}

fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    EmbeddingDataset::load(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn finish(mut m: RunManifest, inputs: &[&Path], outputs: &[PathBuf], manifest_path: &Path) -> Result<()> {
    for p in inputs {
        m.input(p)?;
    }
    for p in outputs {
        m.output(p)?;
    }
    m.write(manifest_path)
}

/// Data, checkpoint and ECM that agree on labels and width.
struct EvalInputs {
    dataset: EmbeddingDataset,
    ckpt: Checkpoint,
    ecm: EcmConfig,
}

fn eval_inputs(data: &Path, ckpt: &Path, ecm: Option<&Path>) -> Result<EvalInputs> {
    let dataset = load_dataset(data)?;
    let ckpt = load_checkpoint(ckpt)?;
    let ecm = load_ecm(ecm)?;
    dataset.check_labels(&ecm)?;
    if dataset.d() != ckpt.config.d {
        return Err(Error::Dimension(format!(
            "dataset {} has d = {} but checkpoint head has d = {}",
            data.display(),
            dataset.d(),
            ckpt.config.d
        ))
        .into());
    }
    Ok(EvalInputs { dataset, ckpt, ecm })
}

fn input_paths<'a>(required: &[&'a Path], ecm: Option<&'a PathBuf>) -> Vec<&'a Path> {
    let mut v = required.to_vec();
    v.extend(ecm.map(PathBuf::as_path));
    v
}

fn synth_config(ecm: EcmConfig, g: &GeneratorArgs, seed: u64) -> Result<SynthConfig> {
    let mut cfg = SynthConfig::new(ecm, g.n, g.d, g.t, g.kappa.0, seed)?;
    cfg.distractor_scale = g.distractor_scale;
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(o: &OptimArgs, loss: LossKind, head: HeadKind, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: o.lr,
        epochs: o.epochs,
        batch_size: o.batch,
        seed,
        scheduler: Scheduler::Constant,
        loss,
        head,
        tau: o.tau,
        margin: o.margin,
    }
}

fn eval_config(c: &ClusterArgs, mds_per_label: usize) -> EvalConfig {
    EvalConfig {
        restarts: c.restarts,
        max_iter: c.max_iter,
        seed: c.seed,
        mds_per_label,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map_or_else(|| "nan".into(), |x| x.to_string())
}

fn synth(a: &SynthArgs, argv: &[String]) -> Result<()> {
    let ecm = load_ecm(a.config.as_deref())?;
    let cfg = synth_config(ecm, &a.generator, a.seed)?;
    let split: Split = a.split.into();
    let ds = synth_generate(&cfg, split)?;
    write_atomic(&a.out, &ds.to_bytes()?)?;
    println!("wrote {} records ({} labels, d = {}) to {}", ds.len(), ds.label_names().len(), ds.d(), a.out.display());
    let m = RunManifest::new("synth", argv, Some(a.seed), json!({ "synth": cfg, "split": split }));
    finish(
        m,
        &input_paths(&[], a.config.as_ref()),
        std::slice::from_ref(&a.out),
        &sibling(&a.out, ".manifest.json"),
    )
}

fn train_cmd(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let ecm = load_ecm(a.ecm.as_deref())?;
    let head_cfg = HeadConfig::new(ds.d(), a.head.n_heads, a.head.pooling.into())?;
    let cfg = train_config(&a.optim, a.loss.into(), a.head.head.into(), a.seed);
    let outcome = match train(&ds, &cfg, &ecm, &head_cfg) {
        Ok(o) => o,
        Err(Error::Divergence { step, detail, last_good }) => {
            if let Some(params) = last_good {
                let path = sibling(&a.out, ".last_good");
                write_atomic(&path, &Checkpoint::new(head_cfg.clone(), *params)?.to_bytes()?)?;
                eprintln!("last finite parameters saved to {}", path.display());
            }
            return Err(Error::Divergence { step, detail, last_good: None }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = Checkpoint::new(head_cfg.clone(), outcome.params)?;
    write_atomic(&a.out, &ckpt.to_bytes()?)?;
    let log_path = sibling(&a.out, ".log.csv");
    write_text(&log_path, &outcome.log.to_csv())?;
    for (e, mean) in outcome.log.epoch_means.iter().enumerate() {
        println!("epoch {:>3}  mean loss {mean:.6}", e + 1);
    }
    if let Some(err) = outcome.log.max_weight_norm_error() {
        println!("max weight-slice norm error over all steps: {err:.2e}");
    }
    println!("checkpoint {} (params sha256 {})", a.out.display(), outcome.log.checksum);
    let m = RunManifest::new(
        "train",
        argv,
        Some(a.seed),
        json!({ "ecm": ecm, "head": head_cfg, "train": cfg, "loss": { "kind": cfg.loss, "tau": cfg.tau, "margin": cfg.margin } }),
    );
    finish(
        m,
        &input_paths(&[&a.data], a.ecm.as_ref()),
        &[a.out.clone(), log_path],
        &sibling(&a.out, ".manifest.json"),
    )
}

fn eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let inp = eval_inputs(&a.data, &a.ckpt, a.ecm.as_deref())?;
    let cfg = eval_config(&a.cluster, a.mds_per_label);
    let emb = embed_dataset(&inp.ckpt.params, &inp.ckpt.config, &inp.dataset)?;
    let report = evaluate(&emb, &inp.dataset.labels(), &inp.ecm, &cfg)?;
    let names = inp.ecm.names();

    let outputs = [
        (a.out.join("scores.csv"), scores_csv(&report)),
        (a.out.join("avgcossim.csv"), matrix_csv(&report.avg_cos_sim, &names)),
        (a.out.join("pca.svg"), scatter_svg(&report.pca.coords, &report.labels, &names, "PCA")),
        (a.out.join("mds.svg"), scatter_svg(&report.mds, &report.mds_labels, &names, "MDS")),
    ];
    for (path, text) in &outputs {
        write_text(path, text)?;
    }
    println!(
        "v_measure {:.6}  homogeneity {:.6}  completeness {:.6}  cd_r {}",
        report.scores.v,
        report.scores.homogeneity,
        report.scores.completeness,
        fmt_opt(report.cd_r)
    );
    let m = RunManifest::new(
        "eval",
        argv,
        Some(cfg.seed),
        json!({ "ecm": inp.ecm, "head": inp.ckpt.config, "head_kind": inp.ckpt.params.kind(),
                "restarts": cfg.restarts, "max_iter": cfg.max_iter, "mds_per_label": cfg.mds_per_label }),
    );
    finish(
        m,
        &input_paths(&[&a.data, &a.ckpt], a.ecm.as_ref()),
        &outputs.map(|(p, _)| p),
        &a.out.join("manifest.json"),
    )
}

/// Powers of two below `d`, then `d`.
pub fn default_dims(d: usize) -> Vec<usize> {
    let mut dims: Vec<usize> = std::iter::successors(Some(2), |&x| Some(x * 2)).take_while(|&x| x < d).collect();
    dims.push(d);
    dims
}

fn sweep_dims(a: &SweepDimsArgs, argv: &[String]) -> Result<()> {
    let inp = eval_inputs(&a.data, &a.ckpt, a.ecm.as_deref())?;
    let d = inp.dataset.d();
    let dims = if a.dims.is_empty() { default_dims(d) } else { a.dims.clone() };
    if dims.contains(&0) {
        bail!(Error::Config("PCA dimensions must be positive".into()));
    }
    let cfg = eval_config(&a.cluster, 0);
    let emb = embed_dataset(&inp.ckpt.params, &inp.ckpt.config, &inp.dataset)?;
    let labels = inp.dataset.labels();
    let k = inp.ecm.len();
    let rows: Vec<String> = dims
        .par_iter()
        .map(|&dim| {
            if dim > d {
                return Ok(format!("{dim},nan,nan,nan,skipped"));
            }
            let s = v_measure_at_dim(&emb, &labels, k, dim, &cfg)?;
            Ok(format!("{dim},{},{},{},ok", s.v, s.homogeneity, s.completeness))
        })
        .collect::<ecm_sphere::Result<_>>()?;
    for &dim in dims.iter().filter(|&&x| x > d) {
        eprintln!("warning: dim {dim} exceeds embedding width {d}; row marked skipped");
    }
    let mut csv = String::from("dim,v_measure,homogeneity,completeness,status\n");
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    write_text(&a.out, &csv)?;
    print!("{csv}");
    let m = RunManifest::new(
        "sweep-dims",
        argv,
        Some(cfg.seed),
        json!({ "ecm": inp.ecm, "dims": dims, "restarts": cfg.restarts, "max_iter": cfg.max_iter }),
    );
    finish(
        m,
        &input_paths(&[&a.data, &a.ckpt], a.ecm.as_ref()),
        std::slice::from_ref(&a.out),
        &sibling(&a.out, ".manifest.json"),
    )
}

fn sweep_labels(a: &SweepLabelsArgs, argv: &[String]) -> Result<()> {
    struct Point {
        ecm: EcmConfig,
        tag: String,
        train: EmbeddingDataset,
        test: EmbeddingDataset,
    }
    let points: Vec<Point> = a
        .ecm_series
        .iter()
        .map(|p| {
            let ecm = load_ecm(Some(p))?;
            let cfg = synth_config(ecm.clone(), &a.generator, a.seed)?;
            Ok(Point {
                tag: p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()),
                train: synth_generate(&cfg, Split::Train)?,
                test: synth_generate(&cfg, Split::Test)?,
                ecm,
            })
        })
        .collect::<Result<_>>()?;
    let head_cfg = HeadConfig::new(a.generator.d, a.head.n_heads, a.head.pooling.into())?;
    let eval_cfg = EvalConfig {
        restarts: a.restarts,
        seed: a.seed,
        ..EvalConfig::default()
    };
    let items: Vec<(usize, LossKind)> = (0..points.len())
        .flat_map(|i| LossKind::ALL.into_iter().map(move |l| (i, l)))
        .collect();
    let rows: Vec<String> = items
        .par_iter()
        .map(|&(i, loss)| -> Result<String> {
            let p = &points[i];
            let cfg = train_config(&a.optim, loss, a.head.head.into(), a.seed);
            let out = train(&p.train, &cfg, &p.ecm, &head_cfg)
                .with_context(|| format!("training {loss} on {}", p.tag))?;
            let emb = embed_dataset(&out.params, &head_cfg, &p.test)?;
            let report = evaluate(&emb, &p.test.labels(), &p.ecm, &eval_cfg)?;
            Ok(format!(
                "{},{},{},{},{}",
                p.ecm.len(),
                p.tag,
                loss.to_string().to_lowercase(),
                report.scores.v,
                fmt_opt(report.cd_r)
            ))
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("labels,config,loss,v_measure,cd_r\n");
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    write_text(&a.out, &csv)?;
    print!("{csv}");
    let m = RunManifest::new(
        "sweep-labels",
        argv,
        Some(a.seed),
        json!({
            "ecms": points.iter().map(|p| &p.ecm).collect::<Vec<_>>(),
            "generator": { "n": a.generator.n, "d": a.generator.d, "T": a.generator.t,
                           "kappa": a.generator.kappa.0, "distractor_scale": a.generator.distractor_scale },
            "head": head_cfg,
            "train": train_config(&a.optim, LossKind::Sincere, a.head.head.into(), a.seed),
            "restarts": a.restarts,
        }),
    );
    let inputs: Vec<&Path> = a.ecm_series.iter().map(PathBuf::as_path).collect();
    finish(m, &inputs, std::slice::from_ref(&a.out), &sibling(&a.out, ".manifest.json"))
}

fn verify(a: &VerifyArgs, argv: &[String]) -> Result<()> {
    if a.d + 1 < a.e && !a.allow_infeasible {
        bail!(Error::Config(format!(
            "d = {} < E − 1 = {}: a regular simplex does not fit (use --allow-infeasible to run the constrained optimization)",
            a.d,
            a.e.saturating_sub(1)
        )));
    }
    let cfg = SimplexCheckConfig {
        steps: a.steps,
        seed: a.seed,
        ..SimplexCheckConfig::new(a.e, a.d, a.tau)
    };
    let r = theory_check_sincere_simplex(&cfg)?;
    println!("i,j,inner_product,target,deviation");
    for &(i, j, s) in &r.pairwise {
        println!("{i},{j},{s:.9},{:.9},{:.3e}", r.target, (s - r.target).abs());
    }
    println!("max_deviation {:.3e}", r.max_deviation);
    println!("loss {:.12}  simplex value {:.12}  gap {:.3e}", r.loss, r.bound, r.loss - r.bound);
    println!("converged {}  simplex_feasible {}", r.converged, r.simplex_feasible);
    if let Some(w) = &r.warning {
        eprintln!("warning: {w}");
    }
    if let Some(out) = &a.out {
        let mut text = serde_json::to_string_pretty(&r)?;
        text.push('\n');
        write_text(out, &text)?;
        let m = RunManifest::new(
            "verify",
            argv,
            Some(a.seed),
            json!({ "check": "sincere-simplex", "E": a.e, "d": a.d, "tau": a.tau, "steps": a.steps,
                    "initial_step": cfg.initial_step, "final_step": cfg.final_step }),
        );
        finish(m, &[], std::slice::from_ref(out), &sibling(out, ".manifest.json"))?;
    }
    Ok(())
}

/// Pooled state without normalization, so stages that are not on the sphere are shown as is.
fn pool_raw(h: &Tensor, pooling: Pooling) -> Vec<f64> {
    let t = h.rows();
    match pooling {
        Pooling::Cls => h.row_slice(0).to_vec(),
        Pooling::Last => h.row_slice(t - 1).to_vec(),
        Pooling::Mean => (0..h.cols()).map(|c| (0..t).map(|r| h.get(r, c)).sum::<f64>() / t as f64).collect(),
    }
}

fn max_row_norm_error(h: &Tensor) -> f64 {
    (0..h.rows()).map(|r| (norm(h.row_slice(r)) - 1.0).abs()).fold(0.0, f64::max)
}

pub const TRACE_STAGES: [&str; 4] = ["input", "post_attention", "post_mlp", "final"];

fn trace(a: &TraceArgs, argv: &[String]) -> Result<()> {
    let inp = eval_inputs(&a.data, &a.ckpt, a.ecm.as_deref())?;
    let sub = inp.dataset.take_per_label(a.per_label);
    let cfg = &inp.ckpt.config;
    let params = &inp.ckpt.params;
    let per_record: Vec<([Vec<f64>; 4], f64)> = sub
        .records()
        .par_iter()
        .map(|r| {
            let t = params.forward_with_trace(cfg, &r.tokens)?;
            let emb = pool_and_embed(&t.output, cfg.pooling)?;
            let err = max_row_norm_error(&t.post_attention)
                .max(max_row_norm_error(&t.output))
                .max(max_row_norm_error(&emb));
            let stages = [
                pool_raw(&t.input, cfg.pooling),
                pool_raw(&t.post_attention, cfg.pooling),
                pool_raw(&t.mlp_out, cfg.pooling),
                emb.data().to_vec(),
            ];
            Ok((stages, err))
        })
        .collect::<ecm_sphere::Result<_>>()?;
    let labels = sub.labels();
    let names = inp.ecm.names();
    let mut outputs = Vec::new();
    for (s, stage) in TRACE_STAGES.iter().enumerate() {
        let rows: Vec<Vec<f64>> = per_record.iter().map(|(st, _)| st[s].clone()).collect();
        let coords = mds_project(&Tensor::from_rows(&rows)?, 2)?;
        let path = a.out.join(format!("{stage}.svg"));
        write_text(&path, &scatter_svg(&coords, &labels, &names, &stage.replace('_', "-")))?;
        outputs.push(path);
    }
    if matches!(params, HeadParams::Ngpt(_)) {
        let worst = per_record.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        let states = sub.records().iter().map(|r| 2 * r.tokens.rows() + 1).sum::<usize>();
        if worst > UNIT_TOL {
            bail!(Error::DegenerateNorm(format!(
                "unit-norm check failed: max |norm - 1| = {worst:.3e} over {states} states"
            )));
        }
        println!("unit-norm check passed: max |norm - 1| = {worst:.3e} over {states} hidden states and embeddings");
    }
    println!("wrote {} stage plots of {} records to {}", outputs.len(), sub.len(), a.out.display());
    let m = RunManifest::new(
        "trace",
        argv,
        None,
        json!({ "ecm": inp.ecm, "head": cfg, "head_kind": params.kind(), "per_label": a.per_label }),
    );
    finish(
        m,
        &input_paths(&[&a.data, &a.ckpt], a.ecm.as_ref()),
        &outputs,
        &a.out.join("manifest.json"),
    )
}

fn import(a: &ImportArgs, argv: &[String]) -> Result<()> {
    let ecm = load_ecm(a.ecm.as_deref())?;
    let file = File::open(&a.jsonl).with_context(|| format!("cannot open {}", a.jsonl.display()))?;
    let ds = EmbeddingDataset::import_jsonl(BufReader::new(file), &ecm)
        .with_context(|| format!("cannot import {}", a.jsonl.display()))?;
    write_atomic(&a.out, &ds.to_bytes()?)?;
    println!("imported {} records (d = {}) to {}", ds.len(), ds.d(), a.out.display());
    let m = RunManifest::new("import", argv, None, json!({ "ecm": ecm }));
    finish(
        m,
        &input_paths(&[&a.jsonl], a.ecm.as_ref()),
        std::slice::from_ref(&a.out),
        &sibling(&a.out, ".manifest.json"),
    )
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let m = RunManifest::load(&a.manifest)?;
    if m.tool != TOOL {
        bail!(Error::Config(format!("{} was not written by {TOOL}", a.manifest.display())));
    }
    let changed: Vec<&str> = m
        .inputs
        .iter()
        .filter(|i| file_sha256(Path::new(&i.path)).ok().as_deref() != Some(i.sha256.as_str()))
        .map(|i| i.path.as_str())
        .collect();
    if !changed.is_empty() {
        bail!(Error::Config(format!("inputs changed since the run: {}", changed.join(", "))));
    }
    let cli = Cli::try_parse_from(std::iter::once(TOOL.to_string()).chain(m.argv.iter().cloned()))
        .map_err(|e| anyhow!(Error::Config(format!("manifest arguments do not parse: {e}"))))?;
    if matches!(cli.command, Command::Replay(_)) {
        bail!(Error::Config("a replay manifest cannot replay another replay".into()));
    }
    execute(&cli.command, &m.argv)?;
    let mismatched: Vec<String> = m
        .outputs
        .iter()
        .filter(|o| file_sha256(Path::new(&o.path)).ok().as_deref() != Some(o.sha256.as_str()))
        .map(|o| o.path.clone())
        .collect();
    if !mismatched.is_empty() {
        return Err(ReplayMismatch(mismatched).into());
    }
    println!("replay of {}: {} outputs byte-identical", m.command, m.outputs.len());
    Ok(())
}
