use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "generator.n_shots=300",
    "--set", "model.d_model=8",
    "--set", "model.d_r=4",
    "--set", "model.d_ff=8",
    "--set", "model.n_experts=2",
    "--set", "model.top_k=1",
    "--set", "fusion.d_out=8",
    "--set", "qfm.d_q=4",
    "--set", "qfm.n_qubits=2",
    "--set", "qfm.n_heads=2",
    "--set", "qfm.mlp_hidden=8",
    "--set", "head.hidden=8",
    "--set", "train.max_epochs=2",
];

fn barfiq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_barfiq")).args(args).output().unwrap()
}

fn with_tiny<'a>(head: &[&'a str], out: &'a str) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(&["--out", out]);
    v.extend_from_slice(TINY);
    v
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn help_documents_every_flag() {
    let o = barfiq(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for sub in ["gen-data", "fit-fringe", "train", "eval", "sweep", "ablate", "diagnose-correlation", "selftest", "report"] {
        assert!(text.contains(sub), "{sub}");
    }
    let o = barfiq(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    for flag in ["--config", "--out", "--set", "--seed"] {
        assert!(stdout(&o).contains(flag), "{flag}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&barfiq(&["frobnicate"])), 1);
    assert_eq!(code(&barfiq(&["train", "--bogus"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&barfiq(&["gen-data", "--out", out, "--set", "train.nonsense=3"])), 1);
    assert_eq!(code(&barfiq(&["gen-data", "--out", out, "--config", "/no/such/file.toml"])), 1);
}

#[test]
fn gen_data_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = barfiq(&with_tiny(&["gen-data", "--seed", "5"], d.to_str().unwrap()));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(a.join("shots.csv").exists() && a.join("manifest.json").exists());
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn fit_fringe_reports_short_streams_as_missing() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("three.csv");
    fs::write(&csv, "iter,theta,rho,phi_rt,a,c,r\n0,0.0,0.6,0.0,0,0,0\n1,1.0,0.5,0.0,0,0,0\n2,2.0,0.4,0.0,0,0,0\n").unwrap();
    let out = dir.path().join("fit");
    let o = barfiq(&[
        "fit-fringe",
        "--input",
        csv.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "fringe.min_points=5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("phases.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.contains("missing_insufficient_window")), "{text}");

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "iter,theta\n0,zero\n").unwrap();
    let o = barfiq(&["fit-fringe", "--input", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_diagnose_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    for d in [&a, &b] {
        let o = barfiq(&with_tiny(&["train"], d.to_str().unwrap()));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());

    let ev = dir.path().join("eval");
    let o = barfiq(&["eval", "--run", a.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("eval.json")).unwrap()).unwrap();
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(eval["model"], metrics["model"]);

    let diag = dir.path().join("diag");
    let o = barfiq(&["diagnose-correlation", "--run", a.to_str().unwrap(), "--out", diag.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for k in 0..2 {
        for tag in ["pre", "post"] {
            let text = fs::read_to_string(diag.join(format!("corr_head{k}_{tag}.csv"))).unwrap();
            let lines: Vec<&str> = text.lines().collect();
            assert_eq!(lines.len(), 3);
            let cells: Vec<&str> = lines[1].split(',').collect();
            assert!(cells[1] == "1" || cells[1] == "NA", "{text}");
        }
    }

    let o = barfiq(&["report", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("ca_sa"));
    assert!(a.join("report.csv").exists());

    let o = barfiq(&["eval", "--run", dir.path().to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn report_on_an_empty_directory_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&barfiq(&["report", dir.path().to_str().unwrap()])), 2);
}

#[test]
fn sweep_report_lists_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let mut args = with_tiny(&["sweep"], out.to_str().unwrap());
    args.extend_from_slice(&["--set", "train.max_epochs=1", "--set", "sweep.windows=[4, 8, 12, 16, 20]"]);
    let o = barfiq(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = barfiq(&["report", out.to_str().unwrap(), "--out", dir.path().join("rep").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let table: Vec<String> = stdout(&o).lines().skip(1).map(String::from).collect();
    assert_eq!(table.len(), 20);

    let mut rdr = csv_rows(&fs::read_to_string(out.join("sweep.csv")).unwrap());
    assert_eq!(rdr.len(), 20);
    for (line, row) in table.iter().zip(rdr.drain(..)) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields[0], row[0]);
        assert_eq!(fields[1], row[1]);
        let mae: f64 = row[4].parse().unwrap();
        assert_eq!(fields[2], format!("{mae:.4}"));
    }
    assert_eq!(fs::read(out.join("sweep.csv")).unwrap(), fs::read(dir.path().join("rep/report.csv")).unwrap());
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn selftest_passes() {
    let o = barfiq(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{text}");
}
