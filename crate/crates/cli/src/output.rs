use std::io::Write;
use std::path::{Path, PathBuf};

use sabra_core::model::{self, ShellParams, Trajectory};
use serde::Serialize;
use tempfile::NamedTempFile;

pub const SCHEMA_VERSION: u32 = 1;

/// Output directory; every file is written to a temporary sibling and
/// renamed into place.
pub struct Sink {
    dir: PathBuf,
    csv: bool,
    json: bool,
    pub written: Vec<PathBuf>,
}

impl Sink {
    pub fn new(dir: &Path, csv: bool, json: bool) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Sink {
            dir: dir.to_path_buf(),
            csv,
            json,
            written: vec![],
        })
    }

    fn atomic(&mut self, name: &str, body: impl FnOnce(&mut NamedTempFile) -> std::io::Result<()>) -> std::io::Result<()> {
        let target = self.dir.join(name);
        let mut tmp = NamedTempFile::new_in(&self.dir)?;
        body(&mut tmp)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&target).map_err(|e| e.error)?;
        self.written.push(target);
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, command: &str, status: &str, seed: u64, result: &T) -> std::io::Result<()> {
        if !self.json {
            return Ok(());
        }
        let doc = Envelope {
            schema_version: SCHEMA_VERSION,
            command,
            status,
            seed,
            result,
        };
        let text = serde_json::to_string_pretty(&doc).map_err(std::io::Error::other)?;
        self.atomic(&format!("{command}.json"), |f| {
            f.write_all(text.as_bytes())?;
            f.write_all(b"\n")
        })
    }

    /// Columns `t, abs_u, v_norm, re_u_n, im_u_n` for every shell.
    pub fn trajectory(&mut self, name: &str, params: &ShellParams, traj: &Trajectory) -> std::io::Result<()> {
        if !self.csv {
            return Ok(());
        }
        let m = params.m();
        self.atomic(&format!("{name}.csv"), |f| {
            let mut w = csv::Writer::from_writer(f);
            let mut header = vec!["t".to_string(), "abs_u".into(), "v_norm".into()];
            for n in 1..=m {
                header.push(format!("re_u_{n}"));
                header.push(format!("im_u_{n}"));
            }
            w.write_record(&header)?;
            for (t, u) in traj.times.iter().zip(&traj.states) {
                let v = model::norm(params, u, 1.0).map_err(std::io::Error::other)?;
                let mut row = vec![t.to_string(), u.h_norm().to_string(), v.to_string()];
                for z in u.amps() {
                    row.push(z.re.to_string());
                    row.push(z.im.to_string());
                }
                w.write_record(&row)?;
            }
            w.flush()
        })
    }
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    schema_version: u32,
    command: &'a str,
    status: &'a str,
    seed: u64,
    result: &'a T,
}
