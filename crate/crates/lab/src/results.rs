//! The append-only results CSV shared by all experiment cells.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{IoContext, LabError, Result};

pub const HEADER: &str = "experiment,config_hash,metric,solver,nfe,channels,collection,value,stderr,seed";

/// One measured quantity. `solver` is `-` and `nfe` 0 for metrics that do
/// not involve sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub config_hash: String,
    pub metric: String,
    pub solver: String,
    pub nfe: usize,
    pub channels: u32,
    pub collection: String,
    pub value: f64,
    pub stderr: f64,
    pub seed: u64,
}

impl fmt::Display for ResultRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.config_hash,
            self.metric,
            self.solver,
            self.nfe,
            self.channels,
            self.collection,
            self.value,
            self.stderr,
            self.seed
        )
    }
}

impl ResultRow {
    fn parse(line: &str, origin: &Path, lineno: usize) -> Result<Self> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 10 {
            return Err(LabError::parse(
                origin,
                lineno,
                format!("expected 10 fields, got {}", f.len()),
            ));
        }
        fn num<T: std::str::FromStr>(s: &str, what: &str, origin: &Path, lineno: usize) -> Result<T> {
            s.parse()
                .map_err(|_| LabError::parse(origin, lineno, format!("bad {what} {s:?}")))
        }
        Ok(Self {
            experiment: f[0].into(),
            config_hash: f[1].into(),
            metric: f[2].into(),
            solver: f[3].into(),
            nfe: num(f[4], "nfe", origin, lineno)?,
            channels: num(f[5], "channels", origin, lineno)?,
            collection: f[6].into(),
            value: num(f[7], "value", origin, lineno)?,
            stderr: num(f[8], "stderr", origin, lineno)?,
            seed: num(f[9], "seed", origin, lineno)?,
        })
    }
}

pub fn render(rows: &[ResultRow]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        s.push_str(&format!("{r}\n"));
    }
    s
}

pub fn parse(text: &str, origin: &Path) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, h)) if h.trim() == HEADER => {}
        Some((i, _)) => return Err(LabError::parse(origin, i + 1, format!("expected header {HEADER}"))),
    }
    lines.map(|(i, l)| ResultRow::parse(l, origin, i + 1)).collect()
}

pub fn read(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).at(path)?;
    parse(&text, path)
}

/// Appends `rows` under an exclusive file lock unless rows for
/// `config_hash` are already present, in which case those are returned and
/// nothing is written. Returns `(rows for the hash, whether we wrote)`.
pub fn append_unless_present(path: &Path, config_hash: &str, rows: &[ResultRow]) -> Result<(Vec<ResultRow>, bool)> {
    let mut file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)
        .at(path)?;
    file.lock().at(path)?;
    let out = append_locked(&mut file, path, config_hash, rows);
    file.unlock().at(path)?;
    out
}

fn append_locked(
    file: &mut File,
    path: &Path,
    config_hash: &str,
    rows: &[ResultRow],
) -> Result<(Vec<ResultRow>, bool)> {
    let mut text = String::new();
    file.seek(SeekFrom::Start(0)).at(path)?;
    file.read_to_string(&mut text).at(path)?;
    let existing: Vec<ResultRow> = parse(&text, path)?
        .into_iter()
        .filter(|r| r.config_hash == config_hash)
        .collect();
    if !existing.is_empty() {
        return Ok((existing, false));
    }
    let mut chunk = String::new();
    if text.trim().is_empty() {
        chunk.push_str(HEADER);
        chunk.push('\n');
    } else if !text.ends_with('\n') {
        chunk.push('\n');
    }
    for r in rows {
        chunk.push_str(&format!("{r}\n"));
    }
    // One write call per batch keeps concurrent appenders line-atomic.
    file.write_all(chunk.as_bytes()).at(path)?;
    file.flush().at(path)?;
    Ok((rows.to_vec(), true))
}

/// Rows for `config_hash` already in the file, if it exists.
pub fn rows_for(path: &Path, config_hash: &str) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read(path)?
        .into_iter()
        .filter(|r| r.config_hash == config_hash)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(hash: &str, v: f64) -> ResultRow {
        ResultRow {
            experiment: "e".into(),
            config_hash: hash.into(),
            metric: "w2".into(),
            solver: "euler".into(),
            nfe: 4,
            channels: 12,
            collection: "offline".into(),
            value: v,
            stderr: 0.01,
            seed: 3,
        }
    }

    #[test]
    fn append_is_idempotent_per_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let (_, wrote) = append_unless_present(&p, "a", &[row("a", 0.1), row("a", 0.2)]).unwrap();
        assert!(wrote);
        let (got, wrote) = append_unless_present(&p, "a", &[row("a", 9.0)]).unwrap();
        assert!(!wrote);
        assert_eq!(got, vec![row("a", 0.1), row("a", 0.2)]);
        append_unless_present(&p, "b", &[row("b", 1.0 / 3.0)]).unwrap();
        let all = read(&p).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[2].value, 1.0 / 3.0);
        assert_eq!(fs::read_to_string(&p).unwrap().matches(HEADER).count(), 1);
    }

    #[test]
    fn malformed_rows_report_the_line() {
        let text = format!("{HEADER}\n{}\ne,h,w2,euler,x,1,o,1,0,0\n", row("a", 1.0));
        let e = parse(&text, Path::new("r.csv")).unwrap_err();
        assert!(matches!(e, LabError::Parse { line: 3, .. }), "{e}");
        let e = parse("nope\n", Path::new("r.csv")).unwrap_err();
        assert!(matches!(e, LabError::Parse { line: 1, .. }), "{e}");
    }
}
