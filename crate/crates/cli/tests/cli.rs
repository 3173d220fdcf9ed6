use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "model.model_dim = 16
model.hidden_dim = 32
model.heads = 2
model.layers_enc = 1
model.layers_dec = 1
model.max_positions = 10
model.max_length_bins = 11
train.token_budget = 96
train.warmup = 10
train.max_updates = 30
train.checkpoint_every = 10
train.average_last = 3
train.max_refine_iterations = 2
decode.iterations = 3
decode.candidates = 2
";

fn mnat(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mnat"));
    c.args(args).env("MNAT_LOG", "info");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A temp dir holding a config, a corpus and a trained checkpoint directory.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn trained() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        let conf = format!("{TINY}data.checkpoint_dir = {}\n", ws.path("ck").display());
        std::fs::write(ws.path("run.conf"), conf).unwrap();
        let o = run(mnat(&[
            "generate",
            "--task",
            "copy",
            "--vocab-size",
            "16",
            "--count",
            "80",
            "--max-len",
            "6",
            "--output",
        ])
        .arg(ws.path("corpus.tsv")));
        assert!(o.status.success(), "{}", stderr(&o));
        let text = std::fs::read_to_string(ws.path("corpus.tsv")).unwrap();
        let (src, tgt): (Vec<_>, Vec<_>) =
            text.lines().map(|l| l.split_once('\t').unwrap()).unzip();
        std::fs::write(ws.path("src.txt"), src.join("\n") + "\n").unwrap();
        std::fs::write(ws.path("tgt.txt"), tgt.join("\n") + "\n").unwrap();
        let o = run(ws.cmd(&["train", "--train"]).arg(ws.path("corpus.tsv")));
        assert!(o.status.success(), "{}", stderr(&o));
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// A command preloaded with the config file, which names the checkpoint
    /// directory.
    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = mnat(&[]);
        c.arg("--config").arg(self.path("run.conf")).args(args);
        c
    }
}

fn key_value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
        .parse()
        .unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn train_writes_checkpoints_log_and_vocabulary() {
    let ws = Workspace::trained();
    for name in ["averaged.mnat", "vocab.txt", "train.log"] {
        assert!(ws.path("ck").join(name).exists(), "{name}");
    }
    let log = std::fs::read_to_string(ws.path("ck/train.log")).unwrap();
    assert_eq!(log.lines().count(), 31, "header plus one line per update");
}

#[test]
fn translate_emits_one_line_per_input_and_is_deterministic() {
    let ws = Workspace::trained();
    let first = run(ws.cmd(&["translate", "--input"]).arg(ws.path("src.txt")));
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(stdout(&first).lines().count(), 80);
    let second = run(ws
        .cmd(&["translate", "-B", "2", "--batch-size", "7", "--input"])
        .arg(ws.path("src.txt")));
    assert_eq!(
        first.stdout, second.stdout,
        "batch size must not change output"
    );
}

#[test]
fn evaluate_reports_perfect_score_for_identical_files() {
    let ws = Workspace::trained();
    let o = run(mnat(&["evaluate", "--hypotheses"])
        .arg(ws.path("tgt.txt"))
        .arg("--references")
        .arg(ws.path("tgt.txt")));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(key_value(&stdout(&o), "bleu"), 100.0);
}

#[test]
fn probe_without_substitution_is_fully_similar_and_clamps_sample() {
    let ws = Workspace::trained();
    let o = run(ws
        .cmd(&["probe", "--beta", "0", "--sample-size", "500", "--corpus"])
        .arg(ws.path("corpus.tsv")));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!((key_value(&stdout(&o), "mean_similarity") - 1.0).abs() < 1e-6);
    assert!(
        stderr(&o).contains("exceeds the 80 available pairs"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn flags_override_config_file_values() {
    let ws = Workspace::trained();
    let conf = ws.path("bad.conf");
    write(&conf, &format!("{TINY}probe.beta = 3\n"));
    let probe = |extra: &[&str]| {
        let mut c = mnat(&[]);
        c.arg("--config").arg(&conf).arg("probe").args(extra);
        c.arg("--checkpoint-dir")
            .arg(ws.path("ck"))
            .arg("--corpus")
            .arg(ws.path("corpus.tsv"));
        run(&mut c)
    };
    assert_eq!(probe(&[]).status.code(), Some(1));
    assert!(probe(&["--beta", "0.2"]).status.success());
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |c: &mut Command| run(c).status.code();

    assert_eq!(
        code(&mut mnat(&["train", "--beta", "3", "--train", "x.tsv"])),
        Some(1)
    );
    assert_eq!(code(&mut mnat(&["train", "--bogus"])), Some(1));
    let conf = d.join("unknown.conf");
    write(&conf, "train.nonsense = 1\n");
    assert_eq!(
        code(mnat(&["--config"]).arg(&conf).args([
            "evaluate",
            "--hypotheses",
            "a",
            "--references",
            "b"
        ])),
        Some(1)
    );

    let missing = d.join("missing.tsv");
    assert_eq!(
        code(
            mnat(&["train", "--train"])
                .arg(&missing)
                .arg("--checkpoint-dir")
                .arg(d.join("ck"))
        ),
        Some(2)
    );
    let (h, r) = (d.join("h.txt"), d.join("r.txt"));
    write(&h, "a b\nc d\n");
    write(&r, "a b\n");
    assert_eq!(
        code(
            mnat(&["evaluate", "--hypotheses"])
                .arg(&h)
                .arg("--references")
                .arg(&r)
        ),
        Some(2)
    );
}
