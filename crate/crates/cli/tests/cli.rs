use std::collections::BTreeMap;
use std::process::{Command, Output};

use leantape::report::{read_csv, CsvRow};

const S: usize = 131072;

fn leantape(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leantape"))
        .args(args)
        .env_remove("MEMSAVE_SEED")
        .output()
        .expect("binary runs")
}

fn csv_rows(args: &[&str]) -> Vec<CsvRow> {
    let out = leantape(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out.stdout.contains(&b'\r'));
    read_csv(out.stdout.as_slice()).unwrap()
}

fn curves(rows: &[CsvRow], column: fn(&CsvRow) -> usize) -> BTreeMap<(String, String), Vec<usize>> {
    let mut out: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for r in rows {
        out.entry((r.scenario.clone(), r.policy.clone()))
            .or_default()
            .push(column(r));
    }
    out
}

#[test]
fn conv_probe_has_flat_memsave_and_sloped_naive_layer_curves() {
    let rows = csv_rows(&["probe", "--layer", "conv2d", "--max-depth", "12", "--timing-reps", "0"]);
    assert_eq!(rows.len(), 12 * 4 * 2);
    let c = curves(&rows, |r| r.tape_bytes);
    let only_m = &c[&("only4".to_string(), "memsave".to_string())];
    let only_n = &c[&("only4".to_string(), "naive".to_string())];
    for depth in 4..=12 {
        // Layer 4 keeps its input; later layers keep only their kernels.
        assert_eq!(only_m[depth - 1], S + (depth - 4) * 2304);
        assert_eq!(only_n[depth - 1], (depth - 3) * S + (depth - 3) * 2304);
    }
}

#[test]
fn linear_probe_rows_coincide_across_policies() {
    let rows = csv_rows(&[
        "probe",
        "--layer",
        "linear",
        "--max-depth",
        "6",
        "--scenario-set",
        "all,input,from4,only4",
        "--timing-reps",
        "0",
    ]);
    for pair in rows.chunks(2) {
        assert_eq!(
            (pair[0].tape_bytes, pair[0].peak_bytes),
            (pair[1].tape_bytes, pair[1].peak_bytes)
        );
    }
}

#[test]
fn eval_batchnorm_probe_is_flat_only_under_memsave() {
    let rows = csv_rows(&[
        "probe",
        "--layer",
        "batchnorm2d-eval",
        "--max-depth",
        "6",
        "--scenario-set",
        "input",
        "--timing-reps",
        "0",
    ]);
    let c = curves(&rows, |r| r.peak_bytes);
    let naive = &c[&("input".to_string(), "naive".to_string())];
    let memsave = &c[&("input".to_string(), "memsave".to_string())];
    assert!(naive.windows(2).all(|w| w[1] > w[0]));
    assert!(memsave[1..].windows(2).all(|w| w[1] == w[0]));
}

#[test]
fn bottleneck_ablation_rows() {
    let rows = csv_rows(&[
        "scenario",
        "--net",
        "bottleneck",
        "--scenario",
        "input",
        "--ablate-kinds",
    ]);
    assert_eq!(rows.len(), 3);
    let (base, conv, relu) = (&rows[0], &rows[1], &rows[2]);
    assert_eq!(base.layer, "none");
    assert_eq!(conv.layer, "conv2d");
    assert_eq!(relu.layer, "conv2d+relu");
    // The only difference is the stem's differentiable network input, (2, 1, 16, 16) in f32.
    assert_eq!(base.tape_bytes - conv.tape_bytes, 2 * 16 * 16 * 4);
    assert!(relu.tape_bytes < conv.tape_bytes);
}

#[test]
fn csv_header_is_written_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    let out = leantape(&[
        "probe",
        "--layer",
        "conv_transpose2d",
        "--max-depth",
        "2",
        "--timing-reps",
        "0",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("net,layer,depth,scenario,policy,tape_bytes,peak_bytes,forward_ms,backward_ms\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 4 * 2);
}

#[test]
fn gradcheck_exit_codes() {
    let pass = leantape(&["gradcheck", "--net", "deep-cnn", "--depth", "3", "--scenario", "all"]);
    assert_eq!(pass.status.code(), Some(0), "{}", String::from_utf8_lossy(&pass.stdout));
    let attention = leantape(&["gradcheck", "--net", "attention", "--scenario", "input"]);
    assert_eq!(attention.status.code(), Some(0));
    let fail = leantape(&["gradcheck", "--net", "deep-cnn", "--depth", "3", "--tol", "1e-30"]);
    assert_eq!(fail.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&fail.stdout).contains("worst"));
}

#[test]
fn surgical_gradients_cover_the_first_quarter() {
    let out = leantape(&[
        "gradcheck",
        "--net",
        "deep-cnn",
        "--depth",
        "8",
        "--scenario",
        "surgical",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gradients: layer0.weight layer1.weight\n"), "{text}");
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["probe", "--layer", "bogus"][..],
        &["probe", "--layer", "conv2d", "--max-depth", "0"],
        &["scenario", "--net", "no-such-net"],
        &["scenario", "--net", "mlp", "--scenario", "sideways"],
        &["gradcheck", "--net", "mlp", "--scenario", "none"],
        &["gradcheck", "--net", "mlp", "--dtype", "f32"],
    ] {
        assert_eq!(leantape(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn graph_marks_saved_input_only_under_naive() {
    let dot = |policy: &str, layer: &str| {
        let out = leantape(&[
            "graph",
            "--net",
            &format!("probe-{layer}"),
            "--depth",
            "1",
            "--scenario",
            "input",
            "--policy",
            policy,
        ]);
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    let input_line = |g: &str| {
        g.lines()
            .find(|l| l.trim_start().starts_with("v0 "))
            .unwrap()
            .to_string()
    };
    assert!(input_line(&dot("naive", "conv2d")).contains("[saved tensor]"));
    assert!(!input_line(&dot("memsave", "conv2d")).contains("[saved tensor]"));
    assert_eq!(dot("naive", "linear"), dot("memsave", "linear"));
}

#[test]
fn graph_write_error_names_the_path() {
    let out = leantape(&["graph", "--net", "mlp", "--out", "/nonexistent-dir/g.dot"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent-dir/g.dot"));
}

#[test]
fn json_network_file_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.json");
    std::fs::write(
        &path,
        r#"{
  "name": "tiny",
  "input_shape": [2, 4, 8, 8],
  "layers": [
    {"kind": "conv2d", "in_channels": 4, "out_channels": 4, "kernel": 3, "padding": 1},
    {"kind": "relu", "policy": "memsave"},
    {"kind": "add", "inputs": [0, 2]}
  ]
}"#,
    )
    .unwrap();
    let rows = csv_rows(&["scenario", "--file", path.to_str().unwrap(), "--scenario", "paper"]);
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.net == "tiny" && r.policy == "mixed"));
}

#[test]
fn seed_comes_from_the_environment() {
    let run = |seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_leantape"))
            .args(["gradcheck", "--net", "mlp", "--depth", "2"])
            .env("MEMSAVE_SEED", seed)
            .output()
            .unwrap();
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    assert_eq!(run("5"), run("5"));
    assert_ne!(run("5"), run("6"));
}
