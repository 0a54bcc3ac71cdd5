use std::path::Path;
use std::process::{Command, Output};

fn fm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fm"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn fm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn smoke_config(dir: &Path, steps: usize) -> std::path::PathBuf {
    let text = format!(
        "lr = 0.01\nbatch_size = 2\ntotal_steps = {steps}\neval_every = 5\nseed = 3\n\n\
         [model]\nn_layers = 1\ntrain_ctx = 8\nmixer = \"fm\"\n\n\
         [model.layer]\nm = 4\nk = 2\ntau = 1.0\nd_model = 8\nd_memory = 8\n"
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    let data: String = (0..2000).map(|i| (b'a' + (i * 7 % 13) as u8) as char).collect();
    std::fs::write(dir.join("data.txt"), data).unwrap();
    path
}

#[test]
fn flops_reports_the_reference_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = fm(
        &["flops", "--d-model", "8", "--d-memory", "8", "--m", "4", "--k", "1"],
        dir.path(),
    );
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("total 534"), "{s}");
    assert!(s.contains("savings 231"), "{s}");
    assert!(dir.path().join("out/manifest.toml").is_file());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = fm(&["gradcheck", "--preset", "tiny"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().any(|l| l == "PASS"));
}

#[test]
fn training_is_reproducible_and_checkpoints_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), 10);
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = fm(
            &["train", "--config", cfg, "--data", "data.txt", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/metrics.tsv"), read("b/metrics.tsv"));
    assert_eq!(read("a/checkpoint.fmck"), read("b/checkpoint.fmck"));
    let manifest = String::from_utf8(read("a/manifest.toml")).unwrap();
    assert!(
        manifest.contains("config_sha256") && manifest.contains("seed = \"3\""),
        "{manifest}"
    );

    let o = fm(&["eval", "--checkpoint", "a/checkpoint.fmck", "--out", "e"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("model\ttest_loss\na\t"));

    let o = fm(
        &[
            "generate",
            "--checkpoint",
            "a/checkpoint.fmck",
            "--prompt",
            "ab",
            "--tokens",
            "5",
            "--out",
            "g",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read("g/generation.txt").len(), 5);
}

#[test]
fn invalid_input_exits_1_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let o = fm(&["train", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let cfg = smoke_config(dir.path(), 10);
    let text = std::fs::read_to_string(&cfg).unwrap() + "bogus_key = 1\n";
    std::fs::write(&cfg, text).unwrap();
    let o = fm(
        &["train", "--config", "run.toml", "--data", "data.txt", "--out", "x"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("x").exists());

    let o = fm(&["plots", "--sweep", "missing.tsv", "--out", "p"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.tsv"));
    assert!(!dir.path().join("p").exists());
}

#[test]
fn plots_from_a_table() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("sweep.tsv"),
        "m\tvariant\tk\ttau\tloss\n4\tdense\t4\t1\t2.5\n",
    )
    .unwrap();
    let o = fm(&["plots", "--sweep", "sweep.tsv"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let plot = std::fs::read_to_string(dir.path().join("out/plot_sweep.tsv")).unwrap();
    assert_eq!(plot, "m\tvariant\ttau\tloss\n4\tdense\t1\t2.5\n");
}
