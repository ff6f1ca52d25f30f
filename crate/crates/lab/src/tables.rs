//! Point tables and trajectory CSV files.
//!
//! A point table has a header `x0,x1,...` with an optional trailing `code`
//! column, then one row per point. Floats use Rust's shortest round-trip
//! formatting, so reading a written table gives back identical bits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use qac_core::flows::FiniteDataset;
use qac_core::samplers::TrajectoryRecord;

use crate::error::{IoContext, LabError, Result};

pub fn point_table(data: &FiniteDataset) -> String {
    let dim = data.dim();
    let mut s = (0..dim).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    if data.codes().is_some() {
        s.push_str(",code");
    }
    s.push('\n');
    for i in 0..data.len() {
        let row = data.point(i).iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        s.push_str(&row);
        if let Some(c) = data.code(i) {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_point_table(text: &str, origin: &Path) -> Result<FiniteDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| LabError::parse(origin, 1, "empty point table"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_code = cols.last() == Some(&"code");
    let dim = cols.len() - usize::from(has_code);
    if dim == 0 || cols[..dim].iter().enumerate().any(|(j, c)| *c != format!("x{j}")) {
        return Err(LabError::parse(
            origin,
            1,
            "header must be x0,x1,... with an optional code column",
        ));
    }
    let mut points = Vec::new();
    let mut codes = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(LabError::parse(
                origin,
                i + 1,
                format!("expected {} fields, got {}", cols.len(), fields.len()),
            ));
        }
        for f in &fields[..dim] {
            let v: f64 = f
                .parse()
                .map_err(|_| LabError::parse(origin, i + 1, format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(LabError::parse(origin, i + 1, "non-finite coordinate"));
            }
            points.push(v);
        }
        if has_code {
            codes.push(
                fields[dim]
                    .parse()
                    .map_err(|_| LabError::parse(origin, i + 1, format!("bad code {:?}", fields[dim])))?,
            );
        }
    }
    let data = FiniteDataset::new(dim, points).map_err(|e| LabError::parse(origin, 1, e.to_string()))?;
    Ok(if has_code { data.with_codes(codes)? } else { data })
}

pub fn write_point_table(data: &FiniteDataset, path: &Path) -> Result<()> {
    fs::write(path, point_table(data)).at(path)
}

pub fn read_point_table(path: &Path) -> Result<FiniteDataset> {
    let text = fs::read_to_string(path).at(path)?;
    parse_point_table(&text, path)
}

/// `sample,step,t,x0,...`: every grid state of every row.
pub fn trajectory_csv(record: &TrajectoryRecord, dim: usize) -> String {
    let mut s = String::from("sample,step,t");
    for j in 0..dim {
        let _ = write!(s, ",x{j}");
    }
    s.push('\n');
    let rows = record.states.first().map_or(0, |b| b.len() / dim);
    for r in 0..rows {
        for (k, (t, batch)) in record.times.iter().zip(&record.states).enumerate() {
            let _ = write!(s, "{r},{k},{t}");
            for x in &batch[r * dim..(r + 1) * dim] {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
    }
    s
}

/// Trajectory rows grouped by sample: `(sample, [(t, point)])`.
pub type Trajectories = Vec<(usize, Vec<(f64, Vec<f64>)>)>;

pub fn parse_trajectory_csv(text: &str, origin: &Path) -> Result<Trajectories> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| LabError::parse(origin, 1, "empty trajectory file"))?;
    let width = header.split(',').count();
    if !header.starts_with("sample,step,t,") || width < 4 {
        return Err(LabError::parse(origin, 1, "header must start with sample,step,t,x0"));
    }
    let mut out: Trajectories = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != width {
            return Err(LabError::parse(
                origin,
                i + 1,
                format!("expected {width} fields, got {}", f.len()),
            ));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| LabError::parse(origin, i + 1, format!("bad number {s:?}")))
        };
        let sample: usize = f[0]
            .parse()
            .map_err(|_| LabError::parse(origin, i + 1, format!("bad sample index {:?}", f[0])))?;
        let t = num(f[2])?;
        let x = f[3..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        match out.last_mut() {
            Some((s, pts)) if *s == sample => pts.push((t, x)),
            _ => out.push((sample, vec![(t, x)])),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_table_round_trip_is_bit_exact() {
        let d = FiniteDataset::new(2, vec![0.1, -2.5e-300, 1.0 / 3.0, 7.0])
            .unwrap()
            .with_codes(vec![3, 0])
            .unwrap();
        let back = parse_point_table(&point_table(&d), Path::new("t")).unwrap();
        assert_eq!(back, d);
        let plain = d.clone().without_codes();
        assert_eq!(parse_point_table(&point_table(&plain), Path::new("t")).unwrap(), plain);
    }

    #[test]
    fn malformed_tables_report_the_line() {
        let e = parse_point_table("x0,x1\n1,2\n3\n", Path::new("t")).unwrap_err();
        assert!(matches!(e, LabError::Parse { line: 3, .. }), "{e}");
        let e = parse_point_table("x0,x1\n1,abc\n", Path::new("t")).unwrap_err();
        assert!(matches!(e, LabError::Parse { line: 2, .. }), "{e}");
        assert!(parse_point_table("a,b\n1,2\n", Path::new("t")).is_err());
    }

    #[test]
    fn trajectory_round_trip() {
        let rec = TrajectoryRecord {
            times: vec![1.0, 0.5, 0.0],
            states: vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 1.0, 1.5, 2.0], vec![0.0; 4]],
            velocities: vec![None, None, None],
            nfe: 2,
        };
        let parsed = parse_trajectory_csv(&trajectory_csv(&rec, 2), Path::new("t")).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].1[0], (1.0, vec![3.0, 4.0]));
        assert_eq!(parsed[1].1[2], (0.0, vec![0.0, 0.0]));
    }
}
