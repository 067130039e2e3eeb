use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn koopman(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopman")).args(args).current_dir(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn default_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = koopman(&["check", "--out", "out", "--threads", "2"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
    assert!(text.contains("projection_bound[geometric]"));
    let manifest = fs::read_to_string(dir.path().join("out/manifest.txt")).unwrap();
    assert!(manifest.contains("config_sha256 = "));
    assert!(manifest.contains("seed = 42"));
    assert!(manifest.contains("koopman_version = "));
}

#[test]
fn single_iteration_check_fails_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "[edmd]\nm = 3000\n[projection]\nprojectors = [\"geometric\"]\nmax_iters = 1\nwarm_start = false\n",
    );
    let o = koopman(&["check", "--config", &cfg, "--out", "out"], dir.path());
    assert!(!o.status.success());
    assert!(stdout(&o).contains("did not converge"), "{}", stdout(&o));
}

#[test]
fn invariant_fit_verifies_against_the_exact_operator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "[system]\nname = \"example1\"\n[dictionary]\ndegree = 2\nexclude = [\"1\", \"x*v\", \"v^2\"]\n[edmd]\ndt = 0.1\n",
    );
    let o = koopman(&["fit", "--verify", "--config", &cfg, "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("PASS ‖K̂ − exp(Δt·A)‖_F"), "{text}");
    assert!(dir.path().join("out/koopman.csv").exists());
    assert!(dir.path().join("out/koopman.meta.toml").exists());
}

#[test]
fn zero_field_fits_with_vanishing_residual() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[system]\nname = \"zero\"\n[edmd]\nm = 500\n");
    let o = koopman(&["fit", "--config", &cfg, "--out", "out"], dir.path());
    assert!(o.status.success());
    let line = stdout(&o).lines().find(|l| l.starts_with("residual_rms")).unwrap().to_string();
    let value: f64 = line.split('=').nth(1).unwrap().trim().parse().unwrap();
    assert!(value < 1e-12, "{line}");
}

#[test]
fn underdetermined_fit_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[edmd]\nm = 5\n");
    let refused = koopman(&["fit", "--config", &cfg, "--out", "out"], dir.path());
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    let forced = koopman(&["fit", "--force", "--config", &cfg, "--out", "out"], dir.path());
    assert!(forced.status.success());
}

#[test]
fn invalid_config_and_figure_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[system]\nname = \"nope\"\n");
    assert!(!koopman(&["check", "--config", &cfg], dir.path()).status.success());
    assert!(!koopman(&["reproduce", "fig9", "--out", "out"], dir.path()).status.success());
}

#[test]
fn reproduce_fig7_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let first = koopman(&["reproduce", "fig7", "--out", "a", "--seed", "3"], dir.path());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(koopman(&["reproduce", "fig7", "--out", "b", "--seed", "3"], dir.path()).status.success());
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let csvs: Vec<_> = names.iter().filter(|n| n.to_string_lossy().ends_with(".csv")).collect();
    assert_eq!(csvs.len(), 2);
    for n in csvs {
        let a = fs::read(dir.path().join("a").join(n)).unwrap();
        let b = fs::read(dir.path().join("b").join(n)).unwrap();
        assert_eq!(a, b, "{n:?} differs");
    }
}
