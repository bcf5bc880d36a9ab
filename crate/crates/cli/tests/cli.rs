use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

fn rtlrag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtlrag"))
        .current_dir(dir)
        .args(args)
        .env_remove("RTLRAG_EMBED_URL")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Ingests and indexes `corpus` into `dir`; returns (index, documents).
fn build(dir: &Path, corpus: &str) -> (String, String) {
    let corpus = fixture(corpus);
    ok(&rtlrag(dir, &["ingest", "--corpus", corpus.to_str().unwrap(), "--out", "docs.jsonl"]));
    ok(&rtlrag(dir, &["index", "--documents", "docs.jsonl", "--out", "index.bin"]));
    ("index.bin".into(), "docs.jsonl".into())
}

fn binom(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn pass_at(n: u64, c: u64, k: u64) -> f64 {
    1.0 - binom(n - c, k) / binom(n, k)
}

#[test]
fn query_on_three_documents_prints_three_ranked_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (index, docs) = build(dir.path(), "corpus3.jsonl");
    let stdout = ok(&rtlrag(dir.path(), &["query", "--index", &index, "--documents", &docs, "a 4-bit adder"]));
    let rows: Vec<&str> = stdout
        .lines()
        .skip(1)
        .take_while(|l| !l.trim().is_empty())
        .collect();
    assert_eq!(rows.len(), 3, "{stdout}");
    let scores: Vec<f64> = rows
        .iter()
        .map(|r| r.split_whitespace().nth(3).unwrap().parse().unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
    assert!(rows[0].contains("vdb-adder4"));
    assert!(stdout.contains("trace:"));
}

#[test]
fn query_json_matches_table_order() {
    let dir = tempfile::tempdir().unwrap();
    let (index, docs) = build(dir.path(), "corpus3.jsonl");
    let stdout = ok(&rtlrag(
        dir.path(),
        &["query", "--index", &index, "--documents", &docs, "--json", "--tau", "0.0", "a 4-bit adder"],
    ));
    let v: Value = serde_json::from_str(&stdout).unwrap();
    let pool = v["pool"].as_array().unwrap();
    assert_eq!(pool.len(), 3);
    assert_eq!(pool[0]["doc_id"], "vdb-adder4");
    assert!(v["trace"]["filtered"].as_u64().unwrap() >= 1);
}

#[test]
fn generate_prints_only_code_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let (index, docs) = build(dir.path(), "corpus50.jsonl");
    let mock = format!("mock:{}", fixture("mock_golden.json").display());
    let out = rtlrag(
        dir.path(),
        &[
            "generate",
            "--index",
            &index,
            "--documents",
            &docs,
            "--provider",
            &mock,
            "Design a 4-bit adder named adder4 with inputs a and b, a 4-bit sum output and a carry out.",
        ],
    );
    let stdout = ok(&out);
    assert_eq!(stdout, std::fs::read_to_string(fixture("adder/golden.v")).unwrap());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("provider: mock-golden"), "{stderr}");
}

#[test]
fn bench_with_mock_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let (index, docs) = build(dir.path(), "corpus50.jsonl");
    let mock = format!("mock:{}", fixture("mock_mixed.json").display());
    let suite = fixture("stub/suite2.jsonl");
    let toolchain = fixture("stub/toolchain.toml");
    let stdout = ok(&rtlrag(
        dir.path(),
        &[
            "bench",
            "--index",
            &index,
            "--documents",
            &docs,
            "--provider",
            &mock,
            "--suite",
            suite.to_str().unwrap(),
            "--toolchain",
            toolchain.to_str().unwrap(),
            "--out",
            "report.json",
            "--baseline",
        ],
    ));
    assert!(stdout.contains("Functional correctness"));

    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["fingerprint"]["retrieval_mode"], "disabled");
    assert_eq!(runs[1]["fingerprint"]["retrieval_mode"], "dynamic");
    for run in runs {
        // adder: 5 of 10 compile, 3 pass; mux: none compile
        let problems = run["problems"].as_array().unwrap();
        let adder = problems.iter().find(|p| p["id"] == "p-adder4").unwrap();
        assert_eq!((adder["n"].as_u64(), adder["c_syntax"].as_u64(), adder["c_func"].as_u64()), (Some(10), Some(5), Some(3)));
        for (key, c_adder) in [("syntax", 5), ("functional", 3)] {
            for est in run[key].as_array().unwrap() {
                let k = est["k"].as_u64().unwrap();
                let expected = (pass_at(10, c_adder, k) + pass_at(10, 0, k)) / 2.0;
                let got = est["estimate"].as_f64().unwrap();
                assert!((got - expected).abs() < 1e-12, "{key}@{k}: {got} vs {expected}");
            }
        }
    }

    let rendered = ok(&rtlrag(dir.path(), &["report", "report.json"]));
    assert_eq!(rendered, stdout);
    // functional pass@1 = (0.3 + 0) / 2
    assert!(rendered.contains("15.0"), "{rendered}");
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    build(dir.path(), "corpus3.jsonl");
    std::fs::write(
        dir.path().join("rtlrag.toml"),
        "index = \"index.bin\"\ndocuments = \"docs.jsonl\"\n\n[retrieval]\ntau = -1.0\nk_max = 2\npool_size = 3\n",
    )
    .unwrap();
    let stdout = ok(&rtlrag(dir.path(), &["--config", "rtlrag.toml", "query", "--json", "an adder"]));
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["pool"].as_array().unwrap().len(), 3);
    assert!(v["trace"]["selected"].as_u64().unwrap() <= 2);
    // a flag overrides the file
    let stdout = ok(&rtlrag(
        dir.path(),
        &["--config", "rtlrag.toml", "query", "--json", "--mode", "disabled", "an adder"],
    ));
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["selected"], Value::Array(vec![]));
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rtlrag(dir.path(), &["query", "--no-such-flag", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (index, docs) = build(dir.path(), "corpus3.jsonl");
    let code = |args: &[&str]| rtlrag(dir.path(), args).status.code();

    // usage: bad option value, missing required input, invalid retrieval combination
    assert_eq!(code(&["query", "--index", &index, "--documents", &docs, "--mode", "sideways", "q"]), Some(2));
    assert_eq!(code(&["query", "--documents", &docs, "q"]), Some(2));
    assert_eq!(code(&["query", "--index", &index, "--documents", &docs, "--pool-size", "2", "q"]), Some(2));
    assert_eq!(code(&["generate", "--index", &index, "--documents", &docs, "--provider", "bogus", "q"]), Some(2));
    assert_eq!(code(&[]), Some(2));

    // environment: missing files
    assert_eq!(code(&["query", "--index", "missing.bin", "--documents", &docs, "q"]), Some(3));
    assert_eq!(code(&["ingest", "--corpus", "missing.jsonl", "--out", "x.jsonl"]), Some(3));

    // domain: corrupt index, refused generation
    std::fs::write(dir.path().join("bad.bin"), b"not an index").unwrap();
    assert_eq!(code(&["query", "--index", "bad.bin", "--documents", &docs, "q"]), Some(1));
    std::fs::write(dir.path().join("refuse.json"), r#"{"default":[{"refusal":"no"}]}"#).unwrap();
    assert_eq!(
        code(&["generate", "--index", &index, "--documents", &docs, "--provider", "mock:refuse.json", "q"]),
        Some(1)
    );

    // environment: no toolchain at all
    let suite = fixture("suite2.jsonl");
    std::fs::write(
        dir.path().join("tc.toml"),
        "compile_cmd = \"definitely-not-a-compiler-xyz {files}\"\nsim_run_cmd = \"true\"\ntimeout_s = 5.0\n",
    )
    .unwrap();
    let mock = format!("mock:{}", fixture("mock_golden.json").display());
    assert_eq!(
        code(&[
            "bench", "--index", &index, "--documents", &docs, "--provider", &mock, "--suite",
            suite.to_str().unwrap(), "--toolchain", "tc.toml", "--out", "r.json",
        ]),
        Some(3)
    );
}
