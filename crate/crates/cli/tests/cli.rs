use std::path::Path;
use std::process::{Command, Output};

fn fhkd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fhkd"))
        .args(args)
        .current_dir(dir)
        .env("FHKD_THREADS", "1")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const RUN: &str = "teacher = \"toy-teacher\"\nstudent = \"toy-student\"\nstudent_seed = 3\n\n[distill]\ntotal_steps = 6\nbatch_size = 2\ngrad_accumulation = 2\nseed = 5\n";

/// Loss CSV without the wall-clock column.
fn losses(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn distill_writes_checkpoint_and_log_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), RUN).unwrap();
    for out in ["a.fhkd", "b.fhkd"] {
        let o = fhkd(
            &[
                "distill",
                "--config",
                "run.toml",
                "--data",
                "synth:7,8,1.0",
                "--out",
                out,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = fhkd(
        &[
            "distill",
            "--config",
            "run.toml",
            "--data",
            "synth:7,8,1.0",
            "--out",
            "c.fhkd",
            "--threads",
            "2",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.fhkd"), read("b.fhkd"));
    assert_eq!(read("a.fhkd"), read("c.fhkd"));
    let log = losses(&dir.path().join("a.losses.csv"));
    assert_eq!(log.len(), 7);
    assert_eq!(log[0], "step,lr,l_feat,l_hint,l_kd");
    assert_eq!(log, losses(&dir.path().join("b.losses.csv")));
    assert_eq!(log, losses(&dir.path().join("c.losses.csv")));
}

#[test]
fn export_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        RUN.replace("total_steps = 6", "total_steps = 1"),
    )
    .unwrap();
    let o = fhkd(
        &[
            "distill",
            "--config",
            "run.toml",
            "--data",
            "synth:1,2,0.5",
            "--out",
            "s.fhkd",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let o = fhkd(&["inspect", "--ckpt", "s.fhkd"], dir.path());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("name = \"toy-student\""));
    assert!(text.contains("total 16784"));
    assert!(text.contains("optimizer state at step 1"));
    assert!(text.contains("heads.1.fc.weight"));

    let o = fhkd(
        &[
            "export",
            "--ckpt",
            "s.fhkd",
            "--strip-heads",
            "--out",
            "ft.fhkd",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text =
        String::from_utf8(fhkd(&["inspect", "--ckpt", "ft.fhkd"], dir.path()).stdout).unwrap();
    assert!(text.contains("total 13568"));
    assert!(!text.contains("heads.1."));
    assert!(text.contains("heads.4.fc.weight"));
    assert!(text.contains("no optimizer state"));
}

#[test]
fn bench_reports_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let o = fhkd(
        &[
            "bench",
            "--student",
            "toy-student",
            "--teacher",
            "toy-teacher",
            "--clips",
            "synth:2,2,0.5",
            "--format",
            "csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("model,reference,clips"));
    // default repeats
    assert!(lines
        .next()
        .unwrap()
        .starts_with("toy-student,toy-teacher,2,16000,5,"));

    let o = fhkd(
        &[
            "bench",
            "--student",
            "toy-student",
            "--teacher",
            "toy-teacher",
            "--clips",
            "synth:2,2,0.5",
            "--repeats",
            "2",
            "--out",
            "r.json",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let json = std::fs::read_to_string(dir.path().join("r.json")).unwrap();
    assert!(json.contains("\"repeats\": 2"));
}

#[test]
fn gradcheck_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let o = fhkd(
        &["gradcheck", "--module", "layers", "--seeds", "3"],
        dir.path(),
    );
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout).unwrap().contains("ok"));
    let o = fhkd(&["gradcheck", "--module", "everything"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn errors_carry_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = fhkd(&["distill", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.starts_with("error[E_USAGE]") && err.contains("Usage:"),
        "{err}"
    );

    let o = fhkd(&["inspect", "--ckpt", "missing.fhkd"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[E_IO]"));

    std::fs::write(
        dir.path().join("bad.toml"),
        "teacher = \"toy-teacher\"\nstudent = \"nope\"\n",
    )
    .unwrap();
    let o = fhkd(
        &[
            "distill",
            "--config",
            "bad.toml",
            "--data",
            "synth:1,1,0.5",
            "--out",
            "x",
        ],
        dir.path(),
    );
    assert!(stderr(&o).starts_with("error[E_PRESET]"));

    std::fs::write(dir.path().join("junk.fhkd"), b"FHKD\x09\0\0\0").unwrap();
    let o = fhkd(&["inspect", "--ckpt", "junk.fhkd"], dir.path());
    assert!(stderr(&o).starts_with("error[E_CKPT]"), "{}", stderr(&o));

    let o = fhkd(
        &[
            "bench",
            "--student",
            "toy-student",
            "--teacher",
            "toy-teacher",
            "--clips",
            "synth:1,1",
            "--repeats",
            "2",
        ],
        dir.path(),
    );
    assert!(stderr(&o).starts_with("error[E_PARSE]"));
}
