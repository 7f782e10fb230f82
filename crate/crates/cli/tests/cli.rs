use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use chalkline::pipeline::PipelineConfig;

const TINY: &str = r#"
seed = 11

[simdata]
teachers = 6
lessons_per_year = 2
years = 2
embed_dim = 16

[encoder]
attention_width = 8
trunk_widths = [16, 8]

[train]
epochs = 2

[spearman]
null_permutations = 10

[spearman.partial]
bootstrap = 10

[taucca]
null_permutations = 10
levels = ["lesson"]
"#;

fn chalkline(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chalkline"))
        .args(args)
        .env("CHALKLINE_OUT", dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn csvs(out: &Path) -> Vec<Vec<u8>> {
    ["spearman.csv", "gtheory.csv", "taucca.csv"]
        .iter()
        .map(|f| fs::read(out.join("analysis").join(f)).unwrap())
        .collect()
}

#[test]
fn all_then_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = chalkline(dir.path(), &["all", "--config", &cfg, "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let ckpts = fs::read_dir(out.join("ckpt"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "bin"))
        .count();
    assert_eq!(ckpts, 2);
    for f in ["spearman.svg", "gtheory.svg", "taucca.svg"] {
        assert!(out.join("report").join(f).exists());
    }
    let first = csvs(&out);
    let header = String::from_utf8_lossy(&first[0]).lines().next().unwrap().to_string();
    assert!(header.starts_with("config_digest,seed,"));

    let o = chalkline(dir.path(), &["all", "--config", &cfg, "--jobs", "1"]);
    assert!(o.status.success());
    assert_eq!(csvs(&out), first);
}

#[test]
fn missing_scores_exit_nonzero_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = chalkline(dir.path(), &["eval-taucca", "--config", &cfg]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing upstream artifact"), "{err}");
    assert!(err.contains(&Path::new("scores").join("windows.csv").display().to_string()), "{err}");
}

#[test]
fn invalid_config_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nepochs = 0\n");
    let o = chalkline(dir.path(), &["all", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());

    let cfg = write_config(dir.path(), "[train]\nlearning_rate = 0.1\n");
    let o = chalkline(dir.path(), &["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = chalkline(dir.path(), &["print-config", "--config", &cfg, "--seed", "99", "--instrument", "mqi"]);
    assert!(o.status.success());
    let printed = PipelineConfig::from_toml_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(printed.seed, 99);
    assert_eq!(printed.instrument.as_str(), "mqi");
    assert_eq!(printed.paths.out, dir.path().join("out"));
    assert_eq!(printed.simdata.teachers, 6);

    let o = chalkline(dir.path(), &["train", "--instrument", "neither"]);
    assert!(!o.status.success());
}

#[test]
fn stages_chain_by_hand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    for stage in ["simulate", "ingest", "train", "score", "eval-gtheory"] {
        let o = chalkline(dir.path(), &[stage, "--config", &cfg]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let out = dir.path().join("out");
    assert!(out.join("analysis").join("gtheory.csv").exists());
    assert!(!out.join("analysis").join("spearman.csv").exists());
    let o = chalkline(dir.path(), &["report", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("spearman.csv"));
}
