use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [0, 1]

[dataset]
identities = 2
reference = 16
class_pool = 200

[schedule]
steps = 20

[dm]
steps = 40
batch = 32

[personalize]
steps = 5

[unlearn]
steps = 5

[eval]
generations = 16
carry_samples = 16

[eval.sampler]
k = 5
"#;

fn ldul(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldul")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn out_dir(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = ldul(&["run", "main", "-c", &cfg, "--set", "unlearn.budjet=3", "-o", &out_dir(dir.path(), "x")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unlearn.budjet"));
    let o = ldul(&["run", "no-such-experiment"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = ldul(&["train-dm", "-c", &cfg, "--set", "dm.lr=1e12", "-o", &out_dir(dir.path(), "x")]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn interrupted_run_resumes_to_the_same_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (out_dir(dir.path(), "a"), out_dir(dir.path(), "b"));
    let full = ldul(&["run", "budget-ablation", "-c", &cfg, "-o", &a, "--set", "sweep=[4, 32]"]);
    assert!(full.status.success(), "{}", String::from_utf8_lossy(&full.stderr));
    let cut = ldul(&["run", "budget-ablation", "-c", &cfg, "-o", &b, "--set", "sweep=[4, 32]", "--stop-after", "1"]);
    assert_eq!(cut.status.code(), Some(1));
    assert!(!Path::new(&b).join("metrics.csv").exists());
    let resumed = ldul(&["run", "budget-ablation", "-c", &cfg, "-o", &b, "--set", "sweep=[4, 32]"]);
    assert!(resumed.status.success());
    let read = |d: &str| std::fs::read(Path::new(d).join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let text = String::from_utf8(read(&a)).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    assert!(text.starts_with("experiment,seed,sweep_key,sweep_value,"));
    assert!(Path::new(&a).join("protection.svg").exists());
    assert!(Path::new(&a).join("resolved.toml").exists());
}

#[test]
fn feasible_region_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = out_dir(dir.path(), "f");
    let o = ldul(&["run", "feasible-region", "-c", &cfg, "-o", &out, "--set", "sweep=[1, 2, 4]"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = Path::new(&out).join("metrics.csv");
    let header = std::fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_string();
    for col in ["carry", "e_l", "e_r"] {
        assert!(header.split(',').any(|c| c == col), "{header}");
    }
    let svg = dir.path().join("p.svg");
    let csv_arg = csv.display().to_string();
    let svg_arg = svg.display().to_string();
    let o = ldul(&["plot", "--csv", &csv_arg, "--y", "carry,e_r", "--to", &svg_arg]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<polyline"));
    let o = ldul(&["plot", "--csv", &csv_arg, "--y", "psnr_db", "--to", &svg_arg]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn attack_passes_through_at_zero_strength() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = out_dir(dir.path(), "t");
    let o = ldul(&["train-dm", "-c", &cfg, "-o", &out]);
    assert!(o.status.success());
    let input = Path::new(&out).join("dataset/id0.csv");
    let to = dir.path().join("attacked.csv");
    let (i, t) = (input.display().to_string(), to.display().to_string());
    let o = ldul(&["attack", "-c", &cfg, "-o", &out, "--input", &i, "--to", &t, "--set", "attack={name=\"diffpure\", t_star=0}"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&to).unwrap());
    let o = ldul(&["attack", "-c", &cfg, "-o", &out, "--input", &i, "--to", &t, "--set", "attack={name=\"diffpure\", t_star=10}"]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(&input).unwrap(), std::fs::read(&to).unwrap());
}
