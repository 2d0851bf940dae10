use std::path::Path;
use std::process::{Command, Output};

use num_complex::Complex64;
use sabra_core::model::{self, ShellParams, ShellState};
use sabra_core::sim;
use sabra_core::stabilization::DECAY_WINDOW;
use serde_json::Value;
use tempfile::TempDir;

fn sabra(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.ini");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_sabra"))
        .current_dir(dir)
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let idx = rd.headers().unwrap().iter().position(|h| h == name).unwrap();
    rd.records().map(|r| r.unwrap()[idx].parse().unwrap()).collect()
}

const SMALL: &str = "[model]\nm = 8\n";

#[test]
fn unknown_key_is_a_config_error() {
    let d = TempDir::new().unwrap();
    let o = sabra(d.path(), "seed = 1\n[model]\nnu = 1\nwarp = 3\n", &["steady"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("line 4") && e.contains("model.warp"), "{e}");

    let o = sabra(d.path(), "[control]\nb1_mask = 1, 17\n", &["lqr"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("control.b1_mask"));

    let o = Command::new(env!("CARGO_BIN_EXE_sabra"))
        .args(["--config", "/nonexistent/run.ini", "steady"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn step_too_large_for_scheme_is_a_config_error() {
    let d = TempDir::new().unwrap();
    let o = sabra(d.path(), "[sim]\nscheme = rk4_explicit\ndt = 1e-3\n", &["simulate"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn emitted_config_parses_back_unchanged() {
    let d = TempDir::new().unwrap();
    let text = "seed = 5\n[model]\nm = 10\nnu = 0.3\n[hinf]\nb2_mask = 2,1\nsign = flipped\n[sim]\ninitial = shell\n";
    let first = sabra(d.path(), text, &["config"]);
    assert_eq!(first.status.code(), Some(0));
    let emitted = String::from_utf8(first.stdout).unwrap();
    let second = sabra(d.path(), &emitted, &["config"]);
    assert_eq!(String::from_utf8(second.stdout).unwrap(), emitted);
    assert!(emitted.contains("b2_mask = 1, 2"));
}

#[test]
fn outputs_are_byte_identical_across_runs_and_jobs() {
    let d = TempDir::new().unwrap();
    let cfg = format!("{SMALL}[control]\ntrials = 6\nradii = 1e-3, 1e-2\n[sim]\nt_end = 0.5\n");
    for (out, jobs) in [("a", "1"), ("b", "2"), ("c", "1")] {
        for cmd in ["simulate", "lqr"] {
            let o = sabra(d.path(), &cfg, &["--out", out, "--jobs", jobs, cmd]);
            assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        }
    }
    for f in ["simulate.csv", "simulate.json", "lqr.csv", "lqr.json"] {
        let a = std::fs::read(d.path().join("a").join(f)).unwrap();
        for other in ["b", "c"] {
            assert_eq!(a, std::fs::read(d.path().join(other).join(f)).unwrap(), "{f} differs in {other}");
        }
    }
    let other_seed = sabra(d.path(), &cfg, &["--out", "s", "--seed", "9", "simulate"]);
    assert_eq!(other_seed.status.code(), Some(0));
    assert_ne!(
        std::fs::read(d.path().join("a/simulate.csv")).unwrap(),
        std::fs::read(d.path().join("s/simulate.csv")).unwrap()
    );
}

fn manufactured(d: &Path) -> ShellState {
    let p = ShellParams::default().with_m(8).unwrap();
    let g = ShellState::from_vec(
        (1..=8)
            .map(|n| Complex64::new(0.3 / n as f64, -0.2 / (n * n) as f64))
            .collect(),
    )
    .unwrap();
    // f = nu A g + B(g, g)
    let f = model::apply_a(&p, &g, 1.0)
        .unwrap()
        .scale(p.nu())
        .add(&model::bilinear_b(&p, &g, &g).unwrap());
    let mut text = String::from("n,re,im\n");
    for (i, z) in f.amps().iter().enumerate() {
        text.push_str(&format!("{},{},{}\n", i + 1, z.re, z.im));
    }
    std::fs::write(d.join("forcing.csv"), text).unwrap();
    g
}

#[test]
fn steady_recovers_manufactured_solution() {
    let d = TempDir::new().unwrap();
    let g = manufactured(d.path());
    let o = sabra(d.path(), &format!("{SMALL}[forcing]\nkind = file\nfile = forcing.csv\n"), &["--out", "o", "steady"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = json(d.path().join("o/steady.json"));
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["status"], "ok");
    let r = &v["result"]["u_e"];
    for (n, z) in g.amps().iter().enumerate() {
        let re = r["re"][n].as_f64().unwrap();
        let im = r["im"][n].as_f64().unwrap();
        assert!((re - z.re).abs() < 1e-10 && (im - z.im).abs() < 1e-10, "shell {}", n + 1);
    }
}

#[test]
fn unconverged_steady_state_exits_3_with_flagged_report() {
    let d = TempDir::new().unwrap();
    manufactured(d.path());
    let cfg = format!("{SMALL}[forcing]\nkind = file\nfile = forcing.csv\n[control]\nmax_iter = 1\ntolerance = 1e-15\n");
    let o = sabra(d.path(), &cfg, &["--out", "o", "steady"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(json(d.path().join("o/steady.json"))["status"], "not_converged");
}

#[test]
fn gamma_without_disturbance_channel_is_zero() {
    let d = TempDir::new().unwrap();
    let o = sabra(d.path(), &format!("{SMALL}[hinf]\nb2_mask = none\n"), &["--out", "o", "gamma"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = &json(d.path().join("o/gamma.json"))["result"];
    assert_eq!(r["gamma_star"].as_f64(), Some(0.0));
    assert_eq!(r["gamma0"].as_f64(), Some(0.0));
    assert_eq!(r["disturbance"], false);
}

#[test]
fn spectrum_at_rest_is_the_dissipation() {
    let d = TempDir::new().unwrap();
    let o = sabra(d.path(), &format!("{SMALL}[forcing]\nkind = zero\n"), &["--out", "o", "spectrum"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = &json(d.path().join("o/spectrum.json"))["result"];
    let re: Vec<f64> = r["eigenvalues"].as_array().unwrap().iter().map(|z| z[0].as_f64().unwrap()).collect();
    let expect: Vec<f64> = (1..=8).flat_map(|n| [4f64.powi(n), 4f64.powi(n)]).collect();
    assert_eq!(re.len(), 16);
    for (a, b) in re.iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-9 * b, "{a} vs {b}");
    }
    // beta = 10 leaves the first shell slow
    assert_eq!(r["n_slow"], 2);
}

#[test]
fn simulate_reports_the_fitted_decay_rate() {
    let d = TempDir::new().unwrap();
    let cfg = format!("{SMALL}[forcing]\nkind = zero\n[sim]\nt_end = 7\nrecord_every = 10\ninitial = shell\ninitial_shell = 1\n");
    let o = sabra(d.path(), &cfg, &["--out", "o", "simulate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = &json(d.path().join("o/simulate.json"))["result"];
    let rate = r["decay_rate"].as_f64().unwrap();
    let csv = d.path().join("o/simulate.csv");
    let (fit, _) = sim::fit_decay_rate_series(&column(&csv, "t"), &column(&csv, "abs_u"), DECAY_WINDOW).unwrap();
    assert!((rate - fit).abs() <= 1e-9, "{rate} vs {fit}");
    assert!((rate - 4.0).abs() < 1e-6);
}

#[test]
fn flipped_sign_diverges_without_failing() {
    let d = TempDir::new().unwrap();
    let o = sabra(d.path(), &format!("{SMALL}[hinf]\nsign = flipped\n"), &["--out", "o", "hinf"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = json(d.path().join("o/hinf.json"));
    assert_eq!(v["status"], "diverged");
    assert!(v["result"]["loop_margin_flipped"].as_f64().unwrap() < 0.0);
    assert!(v["result"]["loop_margin_derived"].as_f64().unwrap() > 0.0);
    // the partial record is still written
    assert!(column(&d.path().join("o/hinf.csv"), "t").len() > 1);

    let o = sabra(d.path(), SMALL, &["--out", "p", "hinf"]);
    assert_eq!(o.status.code(), Some(0));
    let v = json(d.path().join("p/hinf.json"));
    assert_eq!(v["status"], "ok");
    assert_eq!(v["result"]["attenuation"]["pass"], true);
}
