use flowfilter::dynamics::{sir_ensemble, SirParams, SirState};
use flowfilter::io::{export_sir_csv, ingest_sir_csv, sidecar_path, Dataset, DatasetMeta};
use flowfilter::Error;

fn ensemble() -> Dataset {
    let trajs = sir_ensemble(&SirParams::default(), (0.02, 0.04), (0.005, 0.025), 3, SirState::default(), 20, 1).unwrap();
    Dataset::new(
        DatasetMeta {
            system: "sir-ensemble".into(),
            seed: 1,
            n_trajectories: 3,
            obs_dim: 3,
            state_dim: 3,
            has_params: true,
            config: serde_json::json!({}),
            normalization: None,
            start_date: None,
        },
        trajs,
    )
    .unwrap()
}

#[test]
fn dataset_roundtrip() {
    let ds = ensemble();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/data.csv");
    ds.write(&path).unwrap();
    assert!(sidecar_path(&path).ends_with("data.meta.json"));
    let back = Dataset::read(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.n_records(), 60);
    assert_eq!(back.id().unwrap(), ds.id().unwrap());
    let head = std::fs::read_to_string(&path).unwrap();
    assert!(head.starts_with("traj,step,time,o0,o1,o2,s0,s1,s2,beta,gamma\n"));
}

#[test]
fn mismatched_sidecar_is_a_schema_error() {
    let ds = ensemble();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    ds.write(&path).unwrap();
    let side = sidecar_path(&path);
    let text = std::fs::read_to_string(&side).unwrap().replace("\"obs_dim\": 3", "\"obs_dim\": 2");
    std::fs::write(&side, text).unwrap();
    assert!(matches!(Dataset::read(&path), Err(Error::Schema(_))));
}

fn write(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("in.csv");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn ingest_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let body = "date,S,I,R\n2020-03-01,0.99,0.01,0.0\n2020-03-02,0.97,0.02,0.01\n2020-03-05,0.9,0.05,0.05\n";
    let ds = ingest_sir_csv(&write(dir.path(), body)).unwrap();
    assert_eq!(ds.n_records(), 3);
    let norm = ds.meta.normalization.clone().unwrap();
    assert_eq!(norm.mean.len(), 3);
    assert_eq!(ds.trajectories[0].times, vec![0.0, 1.0, 4.0]);
    let raw = norm.denormalize(&ds.trajectories[0].states[1]);
    assert!((raw[0] - 0.97).abs() < 1e-12);

    let out = String::from_utf8(export_sir_csv(&ds).unwrap()).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "date,S,I,R");
    let orig: Vec<&str> = body.lines().collect();
    for (a, b) in lines[1..].iter().zip(&orig[1..]) {
        let a: Vec<&str> = a.split(',').collect();
        let b: Vec<&str> = b.split(',').collect();
        assert_eq!(a[0], b[0]);
        for j in 1..4 {
            let (x, y): (f64, f64) = (a[j].parse().unwrap(), b[j].parse().unwrap());
            assert!((x - y).abs() < 1e-12);
        }
    }

    let ds2 = ingest_sir_csv(&write(dir.path(), body)).unwrap();
    let p = dir.path().join("ingested.csv");
    ds2.write(&p).unwrap();
    assert_eq!(Dataset::read(&p).unwrap(), ds);
}

#[test]
fn ingest_rejects_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let bad_sum = "date,S,I,R\n2020-03-01,0.99,0.01,0.0\n2020-03-02,1.0,0.3,0.2\n";
    match ingest_sir_csv(&write(dir.path(), bad_sum)) {
        Err(Error::Schema(msg)) => assert!(msg.contains("row 2"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let backwards = "date,S,I,R\n2020-03-02,0.99,0.01,0.0\n2020-03-01,0.98,0.01,0.01\n";
    match ingest_sir_csv(&write(dir.path(), backwards)) {
        Err(Error::Schema(msg)) => assert!(msg.contains("row 2") && msg.contains("not after"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let header = "day,S,I,R\n2020-03-01,0.99,0.01,0.0\n";
    assert!(matches!(ingest_sir_csv(&write(dir.path(), header)), Err(Error::Schema(_))));
}
