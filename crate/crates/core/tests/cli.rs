use std::path::Path;
use std::process::{Command, Output};

fn xsrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xsrl"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const CONFIG: &str = "\
# desk-sized model
word_dim = 8
pos_dim = 4
tree = gcn
tree_hidden = 8
lstm_hidden = 8
lstm_layers = 1
repr_dim = 8
lang_dim = 2
batch_size = 10
epochs = 2
";

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), CONFIG).unwrap();
    let o = xsrl(
        dir.path(),
        &["synth-data", "--languages", "de,en,fr", "--train-sentences", "20", "--test-sentences", "5"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn unknown_flags_and_subcommands_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["train", "--no-such-flag"][..], &["frobnicate"][..], &[][..]] {
        let o = xsrl(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn validation_failures_exit_nonzero() {
    let dir = workspace();
    let o = xsrl(dir.path(), &["train", "--config", "c.cfg", "--encoder", "basic", "--sources", "de,en", "--out", "m"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("exactly one source"));
    let o = xsrl(dir.path(), &["train", "--config", "c.cfg", "--set", "alpha_p=0", "--sources", "en", "--out", "m"]);
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(dir.path().join("bad.cfg"), "lr = 0.1\nwat = 3\n").unwrap();
    let o = xsrl(dir.path(), &["train", "--config", "bad.cfg", "--out", "m"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn train_then_eval_both_modes() {
    let dir = workspace();
    let d = dir.path();
    let o = xsrl(
        d,
        &[
            "train", "--config", "c.cfg", "--encoder", "basic", "--sources", "en", "--target", "de", "--out", "m.ckpt",
            "--loss-log", "loss.tsv",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("m.ckpt").exists() && d.join("m.ckpt.json").exists());
    assert_eq!(std::fs::read_to_string(d.join("loss.tsv")).unwrap().lines().count(), 2);

    let o = xsrl(d, &["eval", "--config", "c.cfg", "--checkpoint", "m.ckpt", "--target", "de", "--predictions", "p.tsv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("source\ttarget\tmode\tP\tR\tF1"));
    assert!(lines.next().unwrap().starts_with("en\tde\tbilingual\t"));
    assert!(d.join("p.tsv").exists());

    let o = xsrl(
        d,
        &["eval", "--checkpoint", "m.ckpt", "--input", "data/de-test.conllu", "--target", "de", "--gold-predicates", "--breakdown"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("# per-label") && out.contains("# distance"));
}

#[test]
fn transfer_matrix_writes_the_grid() {
    let dir = workspace();
    let o = xsrl(dir.path(), &["transfer-matrix", "--config", "c.cfg", "--mode", "multi", "--out", "grid.tsv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = std::fs::read_to_string(dir.path().join("grid.tsv")).unwrap();
    assert_eq!(grid.lines().count(), 4);
    assert!(grid.lines().any(|l| l.starts_with("de+en\tfr\tmulti\t")));
}

#[test]
fn grad_check_prints_the_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let o = xsrl(dir.path(), &["grad-check"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    let (key, value) = last.split_once('\t').unwrap();
    assert_eq!(key, "max-relative-error");
    assert!(value.parse::<f64>().unwrap() <= 1e-4);
    assert!(out.contains("treelstm") && out.contains("pgn-bilstm"));
}

#[test]
fn pretrain_ho_reports_heldout_metrics() {
    let dir = workspace();
    let o = xsrl(
        dir.path(),
        &[
            "pretrain-ho", "--input", "data/en-train.conllu", "data/de-train.conllu", "--out", "ho.ckpt", "--heldout", "5",
            "--steps", "5", "--hidden", "8", "--layers", "1",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("mask-accuracy\t") && out.contains("edge-auc\t"));

    let o = xsrl(
        dir.path(),
        &["train", "--config", "c.cfg", "--sources", "en", "--ho-checkpoint", "ho.ckpt", "--out", "m.ckpt"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = xsrl(dir.path(), &["eval", "--checkpoint", "m.ckpt", "--input", "data/fr-test.conllu"]);
    assert_eq!(o.status.code(), Some(1), "missing high-order checkpoint must be rejected");
}
