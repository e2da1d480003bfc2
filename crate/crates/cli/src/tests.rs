use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use ecm_sphere::checkpoint::Checkpoint;
use ecm_sphere::data::EmbeddingDataset;
use ecm_sphere::heads::{HeadParams, Pooling};
use ecm_sphere::{EcmConfig, HeadConfig, HeadKind, Polarity, Tensor};

use super::*;
use crate::manifest::file_sha256;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("ecm-sphere").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs a parsed command in-process and returns its error, if any.
fn execute_err(args: &[&str]) -> Option<anyhow::Error> {
    let cli = Cli::try_parse_from(std::iter::once("ecm-sphere").chain(args.iter().copied())).unwrap();
    let argv: Vec<String> = args.iter().map(|a| a.to_string()).collect();
    commands::execute(&cli.command, &argv).err()
}

fn small_synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["synth", "--out", s(&out), "--n", "12", "--d", "8", "--T", "3", "--seed", "5"];
    args.extend_from_slice(extra);
    assert_eq!(cli(&args), 0);
    out
}

fn scores(dir: &Path) -> HashMap<String, String> {
    fs::read_to_string(dir.join("scores.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn epoch_means(log: &Path) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for line in fs::read_to_string(log).unwrap().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let epoch: usize = f[1].parse().unwrap();
        let loss: f64 = f[2].parse().unwrap();
        if sums.len() < epoch {
            sums.resize(epoch, (0.0, 0));
        }
        sums[epoch - 1].0 += loss;
        sums[epoch - 1].1 += 1;
    }
    sums.iter().map(|(t, n)| t / *n as f64).collect()
}

/// Pearson correlation between circumplex distance and `1 − cos Δθ` over label pairs, written
/// out directly from the ring layout.
fn ring_cd_r(ecm: &EcmConfig) -> f64 {
    let e = ecm.len();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..e {
        for j in i + 1..e {
            let a = ecm.labels()[i].slot as i64;
            let b = ecm.labels()[j].slot as i64;
            let steps = (a - b).rem_euclid(e as i64).min((b - a).rem_euclid(e as i64));
            let (pi, pj) = (ecm.labels()[i].polarity, ecm.labels()[j].polarity);
            let c = if pi == pj {
                0.0
            } else if pi == Polarity::Neutral || pj == Polarity::Neutral {
                2.0
            } else {
                4.0
            };
            xs.push(c + steps as f64);
            ys.push(1.0 - (steps as f64 * 2.0 * std::f64::consts::PI / e as f64).cos());
        }
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn identity_like_ngpt(path: &Path, d: usize) {
    let cfg = HeadConfig::new(d, 2, Pooling::Mean).unwrap();
    let mut p = HeadParams::init(HeadKind::Ngpt, &cfg, 0).unwrap();
    if let HeadParams::Ngpt(n) = &mut p {
        n.alpha_attn = Tensor::zeros(1, d);
        n.alpha_mlp = Tensor::zeros(1, d);
    }
    Checkpoint::new(cfg, p).unwrap().save(path).unwrap();
}

fn zero_projection_gpt(path: &Path, d: usize) {
    let cfg = HeadConfig::new(d, 2, Pooling::Mean).unwrap();
    let mut p = HeadParams::init(HeadKind::Gpt, &cfg, 0).unwrap();
    if let HeadParams::Gpt(g) = &mut p {
        g.block.w_o = Tensor::zeros(d, d);
        g.block.w_o_mlp = Tensor::zeros(cfg.d_mlp, d);
    }
    Checkpoint::new(cfg, p).unwrap().save(path).unwrap();
}

#[test]
fn kappa_parsing() {
    assert_eq!(parse_kappa("inf").unwrap(), Kappa(None));
    assert_eq!(parse_kappa("50").unwrap(), Kappa(Some(50.0)));
    assert!(parse_kappa("0").is_err());
    assert!(parse_kappa("-3").is_err());
    assert!(parse_kappa("abc").is_err());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cli(&["train"]), 2);
    assert_eq!(cli(&["train", "--data", "x", "--out", "y", "--head", "lstm"]), 2);
    assert_eq!(cli(&["--help"]), 0);
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_synth(dir.path(), "a.ecm1", &[]);
    let b = small_synth(dir.path(), "b.ecm1", &[]);
    assert_eq!(file_sha256(&a).unwrap(), file_sha256(&b).unwrap());
    let ds = EmbeddingDataset::load(&a).unwrap();
    assert_eq!(ds.len(), 144);
    assert_eq!(ds.label_names(), EcmConfig::default().names());
    let m = RunManifest::load(&manifest::sibling(&a, ".manifest.json")).unwrap();
    assert_eq!(m.command, "synth");
    assert_eq!(m.seed, Some(5));
    assert_eq!(m.outputs[0].sha256, file_sha256(&a).unwrap());
    let test = small_synth(dir.path(), "t.ecm1", &["--split", "test"]);
    assert_ne!(file_sha256(&a).unwrap(), file_sha256(&test).unwrap());
}

#[test]
fn synth_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.ecm1");
    assert_eq!(cli(&["synth", "--out", s(&out), "--d", "2"]), 2);
    assert_eq!(cli(&["synth", "--out", s(&out), "--config", s(&dir.path().join("none.json"))]), 2);
    assert!(!out.exists());
}

#[test]
fn missing_data_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.ecm1");
    let out = dir.path().join("c.ckpt");
    let args = ["train", "--data", s(&missing), "--out", s(&out)];
    let err = execute_err(&args).unwrap();
    assert!(format!("{err:#}").contains(s(&missing)));
    assert_eq!(exit_code(&err), 2);
    assert_eq!(cli(&args), 2);
}

#[test]
fn all_six_combinations_lower_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.ecm1", &[]);
    for head in ["gpt", "ngpt"] {
        for loss in ["sincere", "softcse", "circularcse"] {
            let out = dir.path().join(format!("{head}-{loss}.ckpt"));
            let code = cli(&[
                "train", "--data", s(&data), "--out", s(&out), "--head", head, "--loss", loss, "--epochs", "6",
                "--lr", "1e-2", "--batch", "48",
            ]);
            assert_eq!(code, 0, "{head}/{loss}");
            let means = epoch_means(&manifest::sibling(&out, ".log.csv"));
            assert_eq!(means.len(), 6);
            assert!(means[5] < means[0], "{head}/{loss}: {means:?}");
            assert_eq!(Checkpoint::load(&out).unwrap().params.kind().to_string(), head);
        }
    }
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.ecm1", &[]);
    let digests: Vec<String> = ["a.ckpt", "b.ckpt"]
        .iter()
        .map(|n| {
            let out = dir.path().join(n);
            assert_eq!(cli(&["train", "--data", s(&data), "--out", s(&out), "--epochs", "2", "--lr", "1e-3"]), 0);
            file_sha256(&out).unwrap()
        })
        .collect();
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn divergence_exits_3_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.ecm1", &[]);
    let out = dir.path().join("c.ckpt");
    let code = cli(&["train", "--data", s(&data), "--out", s(&out), "--head", "gpt", "--lr", "1e300", "--epochs", "3"]);
    assert_eq!(code, 3);
    assert!(!out.exists());
    let kept = Checkpoint::load(&manifest::sibling(&out, ".last_good")).unwrap();
    assert!(kept.params.is_finite());
}

#[test]
fn planted_identity_eval_is_exact_and_stable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("p.ecm1");
    assert_eq!(cli(&["synth", "--out", s(&data), "--n", "20", "--d", "8", "--T", "1", "--kappa", "inf"]), 0);
    let ckpt = dir.path().join("id.ckpt");
    identity_like_ngpt(&ckpt, 8);
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    for r in [&r1, &r2] {
        assert_eq!(cli(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(r)]), 0);
    }
    let sc = scores(&r1);
    assert_eq!(sc["v_measure"].parse::<f64>().unwrap(), 1.0);
    // tokens are stored as f32, so the planted directions carry ~1e-8 rounding
    let cd: f64 = sc["cd_r"].parse().unwrap();
    assert!((cd - ring_cd_r(&EcmConfig::default())).abs() < 1e-6, "{cd}");
    for f in ["scores.csv", "avgcossim.csv", "pca.svg", "mds.svg"] {
        assert_eq!(fs::read(r1.join(f)).unwrap(), fs::read(r2.join(f)).unwrap(), "{f}");
    }
    let avg = fs::read_to_string(r1.join("avgcossim.csv")).unwrap();
    assert!(avg.starts_with("label,love,joy,"));
    assert_eq!(avg.lines().count(), 13);
}

#[test]
fn eval_rejects_width_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.ecm1", &[]);
    let ckpt = dir.path().join("c.ckpt");
    identity_like_ngpt(&ckpt, 4);
    let out = dir.path().join("r");
    let err = execute_err(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&out)]).unwrap();
    assert_eq!(exit_code(&err), 2);
    assert!(format!("{err:#}").contains("d = 8"));
}

#[test]
fn sweep_dims_full_rank_matches_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.ecm1", &[]);
    let ckpt = dir.path().join("c.ckpt");
    assert_eq!(cli(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "2", "--lr", "1e-2"]), 0);
    let rep = dir.path().join("r");
    assert_eq!(cli(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&rep)]), 0);
    let csv = dir.path().join("dims.csv");
    assert_eq!(
        cli(&["sweep-dims", "--data", s(&data), "--ckpt", s(&ckpt), "--dims", "2,8,12", "--out", s(&csv), "--jobs", "2"]),
        0
    );
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "dim,v_measure,homogeneity,completeness,status");
    assert_eq!(lines.len(), 4);
    let full: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(full[0], "8");
    assert_eq!(full[1], scores(&rep)["v_measure"]);
    assert_eq!(lines[3], "12,nan,nan,nan,skipped");
    assert!(lines[1].ends_with(",ok"));
}

#[test]
fn default_dims_cover_powers_of_two_and_d() {
    assert_eq!(commands::default_dims(16), vec![2, 4, 8, 16]);
    assert_eq!(commands::default_dims(12), vec![2, 4, 8, 12]);
    assert_eq!(commands::default_dims(2), vec![2]);
}

#[test]
fn verify_simplex_and_infeasible_guard() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.json");
    assert_eq!(cli(&["verify", "--check", "sincere-simplex", "--E", "2", "--d", "2", "--out", s(&out)]), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let sim = v["pairwise"][0][2].as_f64().unwrap();
    assert!((sim + 1.0).abs() < 1e-3, "{sim}");

    let args = ["verify", "--check", "sincere-simplex", "--E", "4", "--d", "2"];
    let err = execute_err(&args).unwrap();
    assert_eq!(exit_code(&err), 2);
    assert!(format!("{err}").contains("--allow-infeasible"));
    let out4 = dir.path().join("v4.json");
    assert_eq!(cli(&[&args[..], &["--allow-infeasible", "--out", s(&out4)]].concat()), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out4).unwrap()).unwrap();
    assert_eq!(v["simplex_feasible"], false);
    assert!(v["max_deviation"].as_f64().unwrap() > 0.1);
}

#[test]
fn trace_writes_four_stages() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.ecm1", &[]);
    let ckpt = dir.path().join("n.ckpt");
    assert_eq!(cli(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "1", "--lr", "1e-2"]), 0);
    let out = dir.path().join("trace");
    assert_eq!(cli(&["trace", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&out), "--per-label", "5"]), 0);
    let svgs: Vec<_> = commands::TRACE_STAGES.iter().map(|st| out.join(format!("{st}.svg"))).collect();
    assert!(svgs.iter().all(|p| p.exists()));
    assert_eq!(fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "svg").count(), 4);
}

#[test]
fn zero_projection_gpt_trace_keeps_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.ecm1", &[]);
    let ckpt = dir.path().join("z.ckpt");
    zero_projection_gpt(&ckpt, 8);
    let out = dir.path().join("trace");
    assert_eq!(cli(&["trace", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&out)]), 0);
    let circles = |f: &str| -> Vec<String> {
        fs::read_to_string(out.join(f)).unwrap().lines().filter(|l| l.starts_with("<circle")).map(String::from).collect()
    };
    let input = circles("input.svg");
    assert_eq!(input.len(), 144 + 12);
    assert_eq!(input, circles("post_attention.svg"));
}

#[test]
fn import_fixture_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let jsonl = dir.path().join("f.jsonl");
    fs::write(
        &jsonl,
        concat!(
            r#"{"id": "a", "label": "joy", "vectors": [[1, 0, 0], [0, 1, 0]]}"#,
            "\n",
            r#"{"id": "b", "label": "fear", "vectors": [[0, 0, 1]]}"#,
            "\n\n",
            r#"{"id": "c", "label": "trust", "vectors": [[0.5, 0.5, 0]]}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = dir.path().join("f.ecm1");
    assert_eq!(cli(&["import", "--jsonl", s(&jsonl), "--out", s(&out)]), 0);
    let ds = EmbeddingDataset::load(&out).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.labels(), vec![1, 5, 11]);
    assert_eq!(ds.records()[0].tokens.rows(), 2);

    fs::write(&jsonl, r#"{"id": "a", "label": "nostalgia", "vectors": [[1, 0]]}"#).unwrap();
    assert_eq!(cli(&["import", "--jsonl", s(&jsonl), "--out", s(&dir.path().join("bad.ecm1"))]), 2);
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.ecm1", &[]);
    let ckpt = dir.path().join("c.ckpt");
    assert_eq!(cli(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "2", "--lr", "1e-2"]), 0);
    let rep = dir.path().join("r");
    assert_eq!(cli(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&rep)]), 0);
    let trace = dir.path().join("t");
    assert_eq!(cli(&["trace", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&trace), "--per-label", "4"]), 0);

    let manifests = [
        manifest::sibling(&data, ".manifest.json"),
        manifest::sibling(&ckpt, ".manifest.json"),
        rep.join("manifest.json"),
        trace.join("manifest.json"),
    ];
    for m in &manifests {
        let before = fs::read(m).unwrap();
        assert_eq!(cli(&["replay", "--manifest", s(m)]), 0, "{}", m.display());
        assert_eq!(fs::read(m).unwrap(), before);
    }

    // a manifest whose recorded output digest no longer matches what the command writes
    let mut m = RunManifest::load(&rep.join("manifest.json")).unwrap();
    m.outputs[0].sha256 = "0".repeat(64);
    let forged = dir.path().join("forged.json");
    m.write(&forged).unwrap();
    assert_eq!(cli(&["replay", "--manifest", s(&forged)]), 3);

    fs::write(&ckpt, b"changed").unwrap();
    assert_eq!(cli(&["replay", "--manifest", s(&rep.join("manifest.json"))]), 2);
}

fn write_ecm(path: &Path, labels: &[(&str, &str)]) {
    let entries: Vec<serde_json::Value> = labels
        .iter()
        .enumerate()
        .map(|(i, (n, p))| serde_json::json!({ "name": n, "slot": i, "polarity": p }))
        .collect();
    let doc = serde_json::json!({
        "version": 1,
        "labels": entries,
        "polarity_constants": { "same": 0.0, "neutral_cross": 2.0, "opposite": 4.0 },
    });
    fs::write(path, doc.to_string()).unwrap();
}

#[test]
fn label_sweep_gap_narrows_with_fewer_labels() {
    let dir = tempfile::tempdir().unwrap();
    let e2 = dir.path().join("e2.json");
    write_ecm(&e2, &[("joy", "positive"), ("sadness", "negative")]);
    let e4 = dir.path().join("e4.json");
    write_ecm(&e4, &[("joy", "positive"), ("surprise", "neutral"), ("sadness", "negative"), ("calmness", "positive")]);
    let e12 = dir.path().join("e12.json");
    EcmConfig::default().save(&e12).unwrap();
    let series = format!("{},{},{}", s(&e2), s(&e4), s(&e12));

    let mut gap4 = 0.0;
    let mut gap12 = 0.0;
    for seed in ["1", "2", "3"] {
        let out = dir.path().join(format!("labels-{seed}.csv"));
        let code = cli(&["sweep-labels", "--ecm-series", &series, "--out", s(&out), "--T", "4", "--lr", "1e-2", "--seed", seed]);
        assert_eq!(code, 0);
        let text = fs::read_to_string(&out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("labels,config,loss,v_measure,cd_r"));
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), 3 * 3);
        let v = |e: &str, loss: &str| -> f64 {
            rows.iter().find(|r| r[0] == e && r[2] == loss).unwrap()[3].parse().unwrap()
        };
        for loss in ["sincere", "softcse", "circularcse"] {
            assert!(v("2", loss) >= 0.95, "seed {seed} {loss}: {}", v("2", loss));
        }
        assert!(rows.iter().filter(|r| r[0] == "2").all(|r| r[4] == "nan"));
        gap4 += (v("4", "circularcse") - v("4", "sincere")).abs() / 3.0;
        gap12 += (v("12", "circularcse") - v("12", "sincere")).abs() / 3.0;
    }
    assert!(gap4 < gap12, "E=4 gap {gap4}, E=12 gap {gap12}");
}
