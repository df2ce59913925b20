use std::path::Path;
use std::process::{Command, Output};

use mtdnet::checkpoint::Checkpoint;
use mtdnet::network::{init_params, zero_final_layer, NetConfig};

fn mtdnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtdnet"))
        .args(args)
        .current_dir(cwd)
        .env_remove(mtdnet::THREADS_ENV)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtdnet(&["train", "--bogus"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--bogus"));

    let o = mtdnet(&["frobnicate"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "net.embed_dim = \"wide\"\n").unwrap();
    std::fs::write(d.join("ok.toml"), "train.epochs = 1\n").unwrap();

    let o = mtdnet(&["train", "--config", "bad.toml", "--data", "x", "--out", "m.ckpt"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loading config") && stderr(&o).contains("net.embed_dim"), "{}", stderr(&o));

    let o = mtdnet(&["train", "--config", "missing.toml", "--data", "x", "--out", "m.ckpt"], d);
    assert!(stderr(&o).contains("loading config") && stderr(&o).contains("missing.toml"));

    let o = mtdnet(&["train", "--config", "ok.toml", "--data", "nowhere", "--out", "m.ckpt"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loading dataset"), "{}", stderr(&o));

    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = mtdnet(&["eval", "--checkpoint", "junk.ckpt", "--data", "x", "--out", "c.csv"], d);
    assert!(stderr(&o).contains("loading checkpoint") && stderr(&o).contains("magic"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_mtdnet"))
        .arg("case-study")
        .env(mtdnet::THREADS_ENV, "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(mtdnet::THREADS_ENV));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        let o = mtdnet(&["gen-data", "--out", out, "--identities", "5", "--seed", "3"], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let manifest = std::fs::read_to_string(d.join("a/manifest.csv")).unwrap();
    assert_eq!(manifest, std::fs::read_to_string(d.join("b/manifest.csv")).unwrap());
    assert!(manifest.starts_with("path,person_id,camera_id\n"));
    assert_eq!(manifest.lines().count(), 1 + 10);
    for line in manifest.lines().skip(1) {
        let rel = line.split(',').next().unwrap();
        assert_eq!(std::fs::read(d.join("a").join(rel)).unwrap(), std::fs::read(d.join("b").join(rel)).unwrap());
    }
}

/// Constant scores put every gallery item in a tie with the match; under
/// the pessimistic tie rule the match ranks last for every query.
#[test]
fn eval_of_constant_scorer_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = mtdnet(&["gen-data", "--out", "ds", "--identities", "6", "--seed", "1"], d);
    assert!(o.status.success());
    let net = NetConfig::desk();
    let mut params = init_params(&net, 0).unwrap();
    zero_final_layer(&mut params);
    Checkpoint { net, seed: 0, epoch: 0, params }.save(&d.join("z.ckpt")).unwrap();

    let o = mtdnet(&["eval", "--checkpoint", "z.ckpt", "--data", "ds", "--out", "cmc.csv", "--trials", "4"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("cmc.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "rank,accuracy");
    assert_eq!(rows.len(), 1 + 6);
    for (r, row) in rows[1..].iter().enumerate() {
        let want = if r + 1 < 6 { "0.000000" } else { "1.000000" };
        assert_eq!(*row, format!("{},{want}", r + 1));
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("rank-1 0.0000"));
}

#[test]
fn train_cross_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), "train.epochs = 1\ntrain.triplets_per_pair = 2\n").unwrap();
    for (out, seed) in [("src", "1"), ("tgt", "2")] {
        let o = mtdnet(&["gen-data", "--out", out, "--identities", "4", "--seed", seed], d);
        assert!(o.status.success());
    }
    let o = mtdnet(&["train", "--config", "c.toml", "--data", "src", "--out", "s.ckpt"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mtdnet(
        &["train-cross", "--config", "c.toml", "--source-checkpoint", "s.ckpt", "--source", "src", "--target", "tgt", "--out", "t.ckpt"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let hist = std::fs::read_to_string(d.join("t.ckpt.loss.csv")).unwrap();
    assert!(hist.starts_with("epoch,l_trp,l_cls,l_cts,combined\n"));
    let l_cts = hist.lines().nth(1).unwrap().split(',').nth(3).unwrap();
    assert!(l_cts.parse::<f64>().is_ok(), "{hist}");
    Checkpoint::load_for(&d.join("t.ckpt"), &NetConfig::desk()).unwrap();

    let o = mtdnet(
        &[
            "train-cross", "--config", "c.toml", "--source-checkpoint", "s.ckpt", "--source", "src", "--target", "tgt",
            "--out", "b.ckpt", "--balance-cts",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let lam = Checkpoint::load(&d.join("b.ckpt")).unwrap().net.loss.lambda_cts;
    assert!(lam > 0.0 && lam.is_finite() && lam != 1.0, "{lam}");

    std::fs::write(d.join("small.toml"), "net.embed_dim = 16\n").unwrap();
    let o = mtdnet(
        &["train-cross", "--config", "small.toml", "--source-checkpoint", "s.ckpt", "--source", "src", "--target", "tgt", "--out", "x.ckpt"],
        d,
    );
    assert!(stderr(&o).contains("embed.weight"), "{}", stderr(&o));
}
