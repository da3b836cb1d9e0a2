use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cirlab::{save_embedding_store, EmbeddingStore, TokenMatrix};
use tempfile::TempDir;

fn cirlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cirlab"))
        .current_dir(dir)
        .env_clear()
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth_store(dir: &TempDir, n: usize) -> PathBuf {
    let path = dir.path().join("store.temb");
    let n = n.to_string();
    let o = cirlab(
        dir.path(),
        &[
            "synth",
            "--output",
            path.to_str().unwrap(),
            "--n",
            &n,
            "--p",
            "3",
            "--d",
            "8",
            "--clusters",
            "4",
            "--noise",
            "0.2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    path
}

#[test]
fn curate_is_reproducible_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let store = synth_store(&dir, 50);
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "1", "4"].iter().enumerate() {
        let out = format!("run{i}.jsonl");
        let o = cirlab(
            dir.path(),
            &[
                "--threads",
                threads,
                "curate",
                "--embeddings",
                store.to_str().unwrap(),
                "--q1",
                "3",
                "--q2",
                "9",
                "--triplets-out",
                &out,
            ],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("curated 50 triplets window=[3,9]"));
        outputs.push(std::fs::read_to_string(dir.path().join(out)).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    for line in outputs[0].lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let rank = v["rank"].as_u64().unwrap();
        assert!((3..=9).contains(&rank));
        assert_ne!(v["ref_id"], v["target_id"]);
    }
}

#[test]
fn curate_window_errors() {
    let dir = tempfile::tempdir().unwrap();
    let store = synth_store(&dir, 20);
    // 19 other items, so q2 = 20 is out of range.
    let o = cirlab(
        dir.path(),
        &[
            "curate",
            "--embeddings",
            store.to_str().unwrap(),
            "--q1",
            "1",
            "--q2",
            "20",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind=WindowOutOfRange"), "{}", stderr(&o));

    let o = cirlab(dir.path(), &["curate", "--embeddings", "missing.temb"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error code=3"));

    std::fs::write(dir.path().join("junk.temb"), b"not a store").unwrap();
    let o = cirlab(dir.path(), &["curate", "--embeddings", "junk.temb"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn verify_bounds_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = cirlab(
        dir.path(),
        &["--out", "res", "verify-bounds", "--n", "16", "--p", "3", "--d", "8"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("res/bounds.json")).unwrap()).unwrap();
    assert_eq!(v["proposition_ok"], true);
    assert_eq!(v["corollary_ok"], true);
    assert!(v["loss_maxsim"].as_f64().unwrap() <= v["loss_standard"].as_f64().unwrap() + 1e-9);

    let store = synth_store(&dir, 10);
    let o = cirlab(
        dir.path(),
        &["verify-bounds", "--embeddings", store.to_str().unwrap(), "--n", "12"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn collapse_lab_validation_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    // d·p = 4 < M − 1 = 5.
    let o = cirlab(dir.path(), &["collapse-lab", "--m", "6", "--p", "1", "--d", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind=InvalidConfig"));

    let o = cirlab(dir.path(), &["collapse-lab", "--steps", "0"]);
    assert_ne!(o.status.code(), Some(0));

    let o = cirlab(
        dir.path(),
        &["--seed", "11", "collapse-lab", "--tau", "1", "--steps", "3000"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trace = std::fs::read_to_string(dir.path().join("out/collapse_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3002);
    assert!(dir.path().join("out/collapse.json").exists());
}

fn store(ids: &[&str], rows: &[[f32; 2]]) -> EmbeddingStore {
    let ms = rows
        .iter()
        .map(|r| TokenMatrix::from_flat(1, 2, r.to_vec()).unwrap())
        .collect();
    EmbeddingStore::new(ids.iter().map(|s| s.to_string()).collect(), ms).unwrap()
}

#[test]
fn eval_on_a_toy_run() {
    let dir = tempfile::tempdir().unwrap();
    let cands: Vec<String> = (0..20).map(|i| format!("c{i:02}")).collect();
    let cand_ids: Vec<&str> = cands.iter().map(String::as_str).collect();
    // Candidates spread over the upper half circle; each query points at one.
    let rows: Vec<[f32; 2]> = (0..20)
        .map(|i| {
            let a = std::f32::consts::PI * i as f32 / 19.0;
            [a.cos(), a.sin()]
        })
        .collect();
    save_embedding_store(&store(&cand_ids, &rows), dir.path().join("c.temb")).unwrap();
    save_embedding_store(
        &store(&["q1", "q2", "q3"], &[rows[0], rows[5], rows[12]]),
        dir.path().join("q.temb"),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("ann.jsonl"),
        concat!(
            "{\"query_id\":\"q1\",\"relevant_ids\":[\"c00\"]}\n",
            "{\"query_id\":\"q2\",\"relevant_ids\":[\"c06\"]}\n",
            "{\"query_id\":\"q3\",\"relevant_ids\":[\"c19\"]}\n",
        ),
    )
    .unwrap();
    let args = [
        "eval",
        "--queries",
        "q.temb",
        "--embeddings",
        "c.temb",
        "--annotations",
        "ann.jsonl",
        "--ks",
        "1,3",
    ];
    let o = cirlab(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/metrics.json")).unwrap()).unwrap();
    // q1 hits at rank 1, q2 at rank 2 or 3 (c04 and c06 are equidistant), q3 misses.
    assert_eq!(v["recall_at"]["1"].as_f64().unwrap(), 0.333333);
    assert_eq!(v["recall_at"]["3"].as_f64().unwrap(), 0.666667);
    assert_eq!(v["query_count"], 3);

    std::fs::write(
        dir.path().join("ann.jsonl"),
        "{\"query_id\":\"q9\",\"relevant_ids\":[\"c00\"]}\n",
    )
    .unwrap();
    let o = cirlab(dir.path(), &args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind=MissingQuery"), "{}", stderr(&o));
}

#[test]
fn bench_checksum_ignores_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut sums = Vec::new();
    for t in ["1", "2", "4"] {
        let o = cirlab(
            dir.path(),
            &["--threads", t, "bench", "--n", "48", "--p", "4", "--d", "16"],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("out/bench.json")).unwrap()).unwrap();
        assert_eq!(v["sample_max_abs_diff"].as_f64().unwrap(), 0.0);
        sums.push(v["checksum"].as_str().unwrap().to_owned());
    }
    assert!(sums.iter().all(|s| *s == sums[0]));
}

#[test]
fn config_layers_resolve_in_order() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("lab.conf"),
        "# lab\nmining.q1 = 4\nmining.q2 = 8\nseed = 3\n",
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cirlab"))
        .current_dir(dir.path())
        .env_clear()
        .env("CIRLAB_MINING_Q2", "9")
        .args(["--config", "lab.conf", "--seed", "5", "config"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    let line = |key: &str| {
        text.lines()
            .find(|l| l.starts_with(&format!("{key} =")))
            .unwrap()
            .to_owned()
    };
    assert!(
        line("mining.q1").contains("= 4") && line("mining.q1").contains("file"),
        "{text}"
    );
    assert!(
        line("mining.q2").contains("= 9") && line("mining.q2").contains("env"),
        "{text}"
    );
    assert!(line("seed").contains("= 5") && line("seed").contains("flag"), "{text}");

    let o = cirlab(dir.path(), &["--set", "mining.bogus=1", "config"]);
    assert_eq!(o.status.code(), Some(2));
}
