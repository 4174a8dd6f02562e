use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn prefflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefflow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = prefflow(args);
    assert!(
        out.status.success(),
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn seed_and_out_dir_are_mandatory() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["generate", "--target", "onemoon2d", "--out-dir", s(dir.path())],
        vec!["generate", "--target", "onemoon2d", "--seed", "1"],
        vec!["run", "--target", "onemoon2d", "--out-dir", s(dir.path())],
        vec!["ablate", "--target", "onemoon2d", "--axis", "k", "--values", "2", "--seed", "0"],
    ] {
        let out = prefflow(&args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("--seed") || err.contains("--out-dir"), "{err}");
    }
    let out = prefflow(&["generate", "--target", "mars3d", "--seed", "1", "--out-dir", s(dir.path())]);
    assert!(!out.status.success());
    let out = prefflow(&[
        "run", "--target", "onemoon2d", "--arch", "spline:two:8", "--seed", "1", "--out-dir", s(dir.path()),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("arch"));
}

#[test]
fn generate_train_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    ok(&["generate", "--target", "onemoon2d", "--n", "30", "--heldout-n", "20", "--seed", "3", "--out-dir", s(&data_dir)]);
    let text = std::fs::read_to_string(data_dir.join("data.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], r#"{"format":"prefflow-v1","dim":2,"k":5}"#);
    assert_eq!(lines.len(), 31);
    assert_eq!(std::fs::read_to_string(data_dir.join("heldout.jsonl")).unwrap().lines().count(), 21);

    let run_dir = dir.path().join("flow");
    let data = data_dir.join("data.jsonl");
    let stdout = ok(&[
        "train", "--target", "onemoon2d", "--data", s(&data), "--iterations", "200", "--checkpoint-every", "100",
        "--arch", "affine:2:8", "--seed", "3", "--out-dir", s(&run_dir),
    ]);
    assert!(stdout.contains("200 steps"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("train.json")).unwrap()).unwrap();
    assert_eq!(report["iterations"], 200);
    assert!(run_dir.join("checkpoints/step-00000200.json").exists());

    let model = run_dir.join("model.json");
    let heldout = data_dir.join("heldout.jsonl");
    let eval_dir = dir.path().join("eval");
    ok(&[
        "eval", "--target", "onemoon2d", "--model", s(&model), "--heldout", s(&heldout), "--samples", "500",
        "--seed", "3", "--out-dir", s(&eval_dir),
    ]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert!(m["loglik"].as_f64().unwrap() < 0.0);
    assert!(m["wasserstein"].as_f64().unwrap() > 0.0);
    assert!((0.0..=1.0).contains(&m["mmtv"].as_f64().unwrap()));
    assert_eq!(m["metadata"]["heldout_observations"], 20);

    let grid_dir = dir.path().join("grid");
    ok(&["export-grid", "--model", s(&model), "--res", "20", "--seed", "0", "--out-dir", s(&grid_dir)]);
    let grid = std::fs::read_to_string(grid_dir.join("grid-0-1.csv")).unwrap();
    assert_eq!(grid.lines().next().unwrap(), "x0,x1,density");
    assert_eq!(grid.lines().count(), 401);
    ok(&["export-grid", "--model", s(&model), "--view", "marginals", "--res", "20", "--seed", "0", "--out-dir", s(&grid_dir)]);
    let marg = std::fs::read_to_string(grid_dir.join("marginals.csv")).unwrap();
    assert_eq!(marg.lines().next().unwrap(), "dim,x,density");
    assert_eq!(marg.lines().count(), 41);

    let normal_dir = dir.path().join("normal");
    ok(&[
        "train", "--target", "onemoon2d", "--data", s(&data), "--model", "normal", "--iterations", "100",
        "--seed", "3", "--out-dir", s(&normal_dir),
    ]);
    ok(&[
        "eval", "--target", "onemoon2d", "--model", s(&normal_dir.join("model.json")), "--samples", "500",
        "--heldout-n", "10", "--seed", "3", "--out-dir", s(&normal_dir),
    ]);

    let out = prefflow(&[
        "train", "--target", "gaussian6d", "--data", s(&data), "--seed", "3", "--out-dir", s(&run_dir),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}

#[test]
fn run_is_reproducible_and_ablate_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        vec![
            "run".to_string(), "--target".into(), "onemoon2d".into(), "--n".into(), "20".into(),
            "--iterations".into(), "100".into(), "--heldout-n".into(), "10".into(), "--replicates".into(),
            "2".into(), "--seed".into(), "5".into(), "--out-dir".into(), out.into(),
        ]
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let args = args(s(d));
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let stdout = ok(&args);
        assert!(stdout.contains("2 completed, 0 failed"), "{stdout}");
    }
    let csv = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "target,model,n,k,s_true,s_lik,w,seed,loglik,wasserstein,mmtv");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("Onemoon2D,flow,20,5,"));
    assert!(a.join("replicate-5.model.json").exists() && a.join("summary.json").exists());

    let ab = dir.path().join("ablate");
    let stdout = ok(&[
        "ablate", "--target", "onemoon2d", "--axis", "k", "--values", "2,3", "--n", "15", "--iterations", "50",
        "--heldout-n", "10", "--replicates", "1", "--model", "normal", "--seed", "0", "--out-dir", s(&ab),
    ]);
    assert!(stdout.contains("k=2") && stdout.contains("k=3"), "{stdout}");
    let rows = std::fs::read_to_string(ab.join("ablation.csv")).unwrap();
    let ks: Vec<&str> = rows.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(ks, ["2", "3"]);
}

fn http(port: u16, request: &str) -> std::io::Result<String> {
    let mut stream = TcpStream::connect(("127.0.0.1", port))?;
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    stream.write_all(request.as_bytes())?;
    let mut out = String::new();
    stream.read_to_string(&mut out)?;
    Ok(out)
}

#[test]
fn serve_answers_http() {
    let dir = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_prefflow"))
        .args(["serve", "--port", &port.to_string(), "--data-dir", s(dir.path())])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let body = r#"{"dim":2,"k":3}"#;
    let request = format!(
        "POST /sessions HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let start = Instant::now();
    let reply = loop {
        match http(port, &request) {
            Ok(r) => break r,
            Err(_) if start.elapsed() < Duration::from_secs(20) => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => panic!("server never came up: {e}"),
        }
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(reply.starts_with("HTTP/1.1 201"), "{reply}");
    assert!(reply.contains("\"dim\":2"));
    let sessions = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(sessions, 1);
}
