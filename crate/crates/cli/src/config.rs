//! Sectioned `key = value` run configuration.
//!
//! Keys before the first section header are top-level (only `seed`). Lists
//! are comma separated. Every error names the offending key and its line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sabra_core::hinf::FeedbackSign;
use sabra_core::riccati::StateWeight;
use sabra_core::sim::Scheme;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Res<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    All,
    Shells(Vec<usize>),
}

impl Mask {
    pub fn shells(&self) -> Option<&[usize]> {
        match self {
            Mask::All => None,
            Mask::Shells(s) => Some(s),
        }
    }

    fn emit(&self) -> String {
        match self {
            Mask::All => "all".into(),
            Mask::Shells(s) if s.is_empty() => "none".into(),
            Mask::Shells(s) => join(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Forcing {
    Zero,
    Single { shell: usize, amplitude: f64, phase: f64 },
    /// CSV with rows `n,re,im`.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Initial {
    Zero,
    Shell { shell: usize, amplitude: f64 },
    /// Steady state plus a smooth random deviation of the given size.
    Perturbed { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Level {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub a: f64,
    pub b: f64,
    pub lambda: f64,
    pub k0: f64,
    pub nu: f64,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub beta: f64,
    pub b1_mask: Mask,
    pub weight: StateWeight,
    pub tolerance: f64,
    pub max_iter: usize,
    pub radii: Vec<f64>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hinf {
    pub gamma: Level,
    pub gamma_factor: f64,
    pub b2_mask: Mask,
    pub step: f64,
    pub structure_step: f64,
    pub horizon: Level,
    pub sign: FeedbackSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sim {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
    pub tolerance: f64,
    pub initial: Initial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub dir: PathBuf,
    pub csv: bool,
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: Model,
    pub forcing: Forcing,
    pub control: Control,
    pub hinf: Hinf,
    pub sim: Sim,
    pub output: Output,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 20240917,
            model: Model {
                a: 1.0,
                b: -0.5,
                lambda: 2.0,
                k0: 1.0,
                nu: 1.0,
                m: 16,
            },
            forcing: Forcing::Single {
                shell: 1,
                amplitude: 100.0,
                phase: 0.0,
            },
            control: Control {
                beta: 10.0,
                b1_mask: Mask::All,
                weight: StateWeight::Enstrophy,
                tolerance: 1e-11,
                max_iter: 60,
                radii: vec![1e-3, 1e-2, 1e-1],
                trials: 20,
            },
            hinf: Hinf {
                gamma: Level::Auto,
                gamma_factor: 1.25,
                b2_mask: Mask::All,
                step: 1e-3,
                structure_step: 2.5e-4,
                horizon: Level::Auto,
                sign: FeedbackSign::Derived,
            },
            sim: Sim {
                scheme: Scheme::EtdRk2,
                dt: 1e-3,
                t_end: 1.0,
                record_every: 10,
                tolerance: 1e-8,
                initial: Initial::Perturbed { radius: 1e-3 },
            },
            output: Output {
                dir: PathBuf::from("out"),
                csv: true,
                json: true,
            },
        }
    }
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

/// Raw `section -> key -> entry` table.
struct Table {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

const SECTIONS: [&str; 7] = ["", "model", "forcing", "control", "hinf", "sim", "output"];

impl Table {
    fn parse(text: &str) -> Res<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        sections.insert(String::new(), BTreeMap::new());
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split(['#', ';']).next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError(format!("line {line}: unterminated section header '{body}'")))?
                    .trim()
                    .to_string();
                if !SECTIONS.contains(&name.as_str()) || name.is_empty() {
                    return Err(ConfigError(format!("line {line}: unknown section [{name}]")));
                }
                if sections.contains_key(&name) {
                    return Err(ConfigError(format!("line {line}: section [{name}] repeated")));
                }
                sections.insert(name.clone(), BTreeMap::new());
                current = name;
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {line}: expected 'key = value', got '{body}'")))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError(format!("line {line}: empty key")));
            }
            let sec = sections.get_mut(&current).expect("section inserted");
            if let Some(prev) = sec.get(&key) {
                return Err(ConfigError(format!(
                    "line {line}: key '{}' already set on line {}",
                    qualified(&current, &key),
                    prev.line
                )));
            }
            sec.insert(
                key,
                Entry {
                    value: value.trim().to_string(),
                    line,
                    used: false,
                },
            );
        }
        Ok(Table { sections })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        let e = self.sections.get_mut(section)?.get_mut(key)?;
        e.used = true;
        Some((e.value.clone(), e.line))
    }

    fn get<T>(&mut self, section: &str, key: &str, default: T, parse: impl Fn(&str) -> Option<T>, expect: &str) -> Res<T> {
        match self.take(section, key) {
            None => Ok(default),
            Some((v, line)) => parse(&v).ok_or_else(|| {
                ConfigError(format!("line {line}: key '{}': expected {expect}, got '{v}'", qualified(section, key)))
            }),
        }
    }

    fn line_of(&self, section: &str, key: &str) -> Option<usize> {
        self.sections.get(section)?.get(key).map(|e| e.line)
    }

    fn unused(&self) -> Option<ConfigError> {
        for (s, keys) in &self.sections {
            for (k, e) in keys {
                if !e.used {
                    return Some(ConfigError(format!("line {}: unknown key '{}'", e.line, qualified(s, k))));
                }
            }
        }
        None
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn float(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

fn positive(s: &str) -> Option<f64> {
    float(s).filter(|&x| x > 0.0)
}

fn uint(s: &str) -> Option<usize> {
    s.parse().ok()
}

fn level(s: &str) -> Option<Level> {
    if s == "auto" {
        Some(Level::Auto)
    } else {
        positive(s).map(Level::Fixed)
    }
}

fn mask(s: &str) -> Option<Mask> {
    match s {
        "all" => Some(Mask::All),
        "none" => Some(Mask::Shells(vec![])),
        _ => {
            let mut v: Vec<usize> = s.split(',').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
            v.sort_unstable();
            v.dedup();
            Some(Mask::Shells(v))
        }
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn weight_name(w: StateWeight) -> &'static str {
    match w {
        StateWeight::Identity => "identity",
        StateWeight::Enstrophy => "enstrophy",
    }
}

fn sign_name(s: FeedbackSign) -> &'static str {
    match s {
        FeedbackSign::Derived => "derived",
        FeedbackSign::Flipped => "flipped",
    }
}

fn level_text(l: Level) -> String {
    match l {
        Level::Auto => "auto".into(),
        Level::Fixed(x) => x.to_string(),
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Res<Self> {
        let mut t = Table::parse(text)?;
        let d = RunConfig::default();
        let seed = t.get("", "seed", d.seed, |s| s.parse().ok(), "an unsigned integer")?;

        let model = Model {
            a: t.get("model", "a", d.model.a, float, "a number")?,
            b: t.get("model", "b", d.model.b, float, "a number")?,
            lambda: t.get("model", "lambda", d.model.lambda, |s| float(s).filter(|&x| x > 1.0), "a number above 1")?,
            k0: t.get("model", "k0", d.model.k0, positive, "a positive number")?,
            nu: t.get("model", "nu", d.model.nu, positive, "a positive number")?,
            m: t.get("model", "m", d.model.m, |s| uint(s).filter(|&m| m >= 4), "an integer >= 4")?,
        };
        let m = model.m;

        let kind = t.get("forcing", "kind", "single".to_string(), |s| Some(s.to_string()), "")?;
        let kind_line = t.line_of("forcing", "kind");
        let forcing = match kind.as_str() {
            "zero" => Forcing::Zero,
            "single" => {
                let Forcing::Single { shell, amplitude, phase } = d.forcing else {
                    unreachable!()
                };
                let shell = t.get("forcing", "shell", shell, |s| uint(s).filter(|&n| n >= 1 && n <= m), &format!("a shell in 1..{m}"))?;
                Forcing::Single {
                    shell,
                    amplitude: t.get("forcing", "amplitude", amplitude, float, "a number")?,
                    phase: t.get("forcing", "phase", phase, float, "a number")?,
                }
            }
            "file" => {
                let (path, line) = t
                    .take("forcing", "file")
                    .ok_or_else(|| ConfigError(format!("line {}: kind = file needs key 'forcing.file'", kind_line.unwrap_or(0))))?;
                let p = base.join(&path);
                if !p.is_file() {
                    return Err(ConfigError(format!("line {line}: key 'forcing.file': no such file '{}'", p.display())));
                }
                Forcing::File(p)
            }
            other => {
                return Err(ConfigError(format!(
                    "line {}: key 'forcing.kind': expected zero|single|file, got '{other}'",
                    kind_line.unwrap_or(0)
                )))
            }
        };

        let in_range = |v: &Mask| match v {
            Mask::All => true,
            Mask::Shells(s) => s.iter().all(|&n| n >= 1 && n <= m),
        };
        let shells_expect = format!("all, none or a list of shells in 1..{m}");
        let control = Control {
            beta: t.get("control", "beta", d.control.beta, float, "a number")?,
            b1_mask: t.get("control", "b1_mask", d.control.b1_mask, |s| mask(s).filter(in_range), &shells_expect)?,
            weight: t.get(
                "control",
                "weight",
                d.control.weight,
                |s| match s {
                    "identity" => Some(StateWeight::Identity),
                    "enstrophy" => Some(StateWeight::Enstrophy),
                    _ => None,
                },
                "identity|enstrophy",
            )?,
            tolerance: t.get("control", "tolerance", d.control.tolerance, positive, "a positive number")?,
            max_iter: t.get("control", "max_iter", d.control.max_iter, |s| uint(s).filter(|&n| n > 0), "a positive integer")?,
            radii: t.get(
                "control",
                "radii",
                d.control.radii,
                |s| s.split(',').map(|x| positive(x.trim())).collect::<Option<Vec<_>>>().filter(|v| !v.is_empty()),
                "a list of positive numbers",
            )?,
            trials: t.get("control", "trials", d.control.trials, |s| uint(s).filter(|&n| n > 0), "a positive integer")?,
        };

        let hinf = Hinf {
            gamma: t.get("hinf", "gamma", d.hinf.gamma, level, "auto or a positive number")?,
            gamma_factor: t.get("hinf", "gamma_factor", d.hinf.gamma_factor, |s| float(s).filter(|&x| x > 1.0), "a number above 1")?,
            b2_mask: t.get("hinf", "b2_mask", d.hinf.b2_mask, |s| mask(s).filter(in_range), &shells_expect)?,
            step: t.get("hinf", "step", d.hinf.step, positive, "a positive number")?,
            structure_step: t.get("hinf", "structure_step", d.hinf.structure_step, positive, "a positive number")?,
            horizon: t.get("hinf", "horizon", d.hinf.horizon, level, "auto or a positive number")?,
            sign: t.get("hinf", "sign", d.hinf.sign, |s| s.parse().ok(), "derived|flipped")?,
        };

        let init_kind = t.get("sim", "initial", "perturbed".to_string(), |s| Some(s.to_string()), "")?;
        let init_line = t.line_of("sim", "initial");
        let sim_initial = match init_kind.as_str() {
            "zero" => Initial::Zero,
            "shell" => Initial::Shell {
                shell: t.get("sim", "initial_shell", 1, |s| uint(s).filter(|&n| n >= 1 && n <= m), &format!("a shell in 1..{m}"))?,
                amplitude: t.get("sim", "initial_amplitude", 1.0, float, "a number")?,
            },
            "perturbed" => Initial::Perturbed {
                radius: t.get("sim", "initial_radius", 1e-3, |s| float(s).filter(|&x| x >= 0.0), "a non-negative number")?,
            },
            other => {
                return Err(ConfigError(format!(
                    "line {}: key 'sim.initial': expected zero|shell|perturbed, got '{other}'",
                    init_line.unwrap_or(0)
                )))
            }
        };
        let sim = Sim {
            scheme: t.get("sim", "scheme", d.sim.scheme, |s| s.parse().ok(), "imex_cn_ab2|etd_rk2|rk4_explicit")?,
            dt: t.get("sim", "dt", d.sim.dt, positive, "a positive number")?,
            t_end: t.get("sim", "t_end", d.sim.t_end, positive, "a positive number")?,
            record_every: t.get("sim", "record_every", d.sim.record_every, |s| uint(s).filter(|&n| n > 0), "a positive integer")?,
            tolerance: t.get("sim", "tolerance", d.sim.tolerance, positive, "a positive number")?,
            initial: sim_initial,
        };

        let formats = t.get(
            "output",
            "formats",
            vec!["csv".to_string(), "json".to_string()],
            |s| {
                let v: Vec<String> = s.split(',').map(|x| x.trim().to_string()).collect();
                v.iter().all(|x| x == "csv" || x == "json").then_some(v)
            },
            "a list drawn from csv, json",
        )?;
        let output = Output {
            dir: t.get("output", "dir", d.output.dir, |s| (!s.is_empty()).then(|| PathBuf::from(s)), "a directory")?,
            csv: formats.iter().any(|x| x == "csv"),
            json: formats.iter().any(|x| x == "json"),
        };

        if let Some(e) = t.unused() {
            return Err(e);
        }
        Ok(RunConfig {
            seed,
            model,
            forcing,
            control,
            hinf,
            sim,
            output,
        })
    }

    pub fn load(path: &Path) -> Res<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Full configuration text; parsing it gives back an equal value.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let m = &self.model;
        let _ = write!(
            s,
            "\n[model]\na = {}\nb = {}\nlambda = {}\nk0 = {}\nnu = {}\nm = {}\n",
            m.a, m.b, m.lambda, m.k0, m.nu, m.m
        );
        s.push_str("\n[forcing]\n");
        match &self.forcing {
            Forcing::Zero => s.push_str("kind = zero\n"),
            Forcing::Single { shell, amplitude, phase } => {
                let _ = write!(s, "kind = single\nshell = {shell}\namplitude = {amplitude}\nphase = {phase}\n");
            }
            Forcing::File(p) => {
                let _ = write!(s, "kind = file\nfile = {}\n", p.display());
            }
        }
        let c = &self.control;
        let _ = write!(
            s,
            "\n[control]\nbeta = {}\nb1_mask = {}\nweight = {}\ntolerance = {}\nmax_iter = {}\nradii = {}\ntrials = {}\n",
            c.beta,
            c.b1_mask.emit(),
            weight_name(c.weight),
            c.tolerance,
            c.max_iter,
            join(&c.radii),
            c.trials
        );
        let h = &self.hinf;
        let _ = write!(
            s,
            "\n[hinf]\ngamma = {}\ngamma_factor = {}\nb2_mask = {}\nstep = {}\nstructure_step = {}\nhorizon = {}\nsign = {}\n",
            level_text(h.gamma),
            h.gamma_factor,
            h.b2_mask.emit(),
            h.step,
            h.structure_step,
            level_text(h.horizon),
            sign_name(h.sign)
        );
        let sm = &self.sim;
        let _ = write!(
            s,
            "\n[sim]\nscheme = {}\ndt = {}\nt_end = {}\nrecord_every = {}\ntolerance = {}\n",
            sm.scheme.name(),
            sm.dt,
            sm.t_end,
            sm.record_every,
            sm.tolerance
        );
        match sm.initial {
            Initial::Zero => s.push_str("initial = zero\n"),
            Initial::Shell { shell, amplitude } => {
                let _ = write!(s, "initial = shell\ninitial_shell = {shell}\ninitial_amplitude = {amplitude}\n");
            }
            Initial::Perturbed { radius } => {
                let _ = write!(s, "initial = perturbed\ninitial_radius = {radius}\n");
            }
        }
        let mut formats = vec![];
        if self.output.csv {
            formats.push("csv");
        }
        if self.output.json {
            formats.push("json");
        }
        let _ = write!(s, "\n[output]\ndir = {}\nformats = {}\n", self.output.dir.display(), formats.join(", "));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Res<RunConfig> {
        RunConfig::parse(text, Path::new("."))
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let text = "seed = 7\n[model]\nm = 8\nnu = 0.125\n[control]\nb1_mask = 3, 1\nradii = 1e-4, 0.3\nweight = identity\n\
                    [hinf]\ngamma = 2.5\nb2_mask = none\nsign = flipped\nhorizon = 12\n[sim]\nscheme = rk4_explicit\n\
                    initial = shell\ninitial_shell = 2\n[output]\nformats = json\n";
        let a = parse(text).unwrap();
        let b = parse(&a.emit()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.emit(), b.emit());
        assert_eq!(a.control.b1_mask, Mask::Shells(vec![1, 3]));
        assert_eq!(parse(&RunConfig::default().emit()).unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_name_key_and_line() {
        let e = parse("[model]\nnu = fast\n").unwrap_err().0;
        assert!(e.contains("line 2") && e.contains("model.nu"), "{e}");
        let e = parse("[model]\nm = 8\n[control]\nb1_mask = 1, 9\n").unwrap_err().0;
        assert!(e.contains("line 4") && e.contains("control.b1_mask"), "{e}");
        let e = parse("\n[sim]\nsteps = 3\n").unwrap_err().0;
        assert!(e.contains("line 3") && e.contains("sim.steps"), "{e}");
        let e = parse("[sim]\ndt = 1\ndt = 2\n").unwrap_err().0;
        assert!(e.contains("line 3") && e.contains("sim.dt"), "{e}");
        let e = parse("[forcing]\nkind = file\nfile = missing.csv\n").unwrap_err().0;
        assert!(e.contains("line 3") && e.contains("forcing.file"), "{e}");
        assert!(parse("[plot]\n").unwrap_err().0.contains("line 1"));
        assert!(parse("[model]\nm 8\n").unwrap_err().0.contains("line 2"));
    }

    #[test]
    fn comments_are_ignored() {
        let c = parse("# run\nseed = 3 ; inline\n[model]\nm = 6 # shells\n").unwrap();
        assert_eq!((c.seed, c.model.m), (3, 6));
    }
}
