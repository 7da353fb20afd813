use std::fs;
use std::io::Write;
use std::path::Path;

use roughman::lift::SampledPath;
use serde::Serialize;

use crate::CliError;

/// Reads `t,x1,…,xd` rows into a sampled path.
pub fn load_path_csv(path: &Path) -> Result<SampledPath, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    parse_path_csv(&text).map_err(|e| match e {
        CliError::Parse(m) => CliError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_path_csv(text: &str) -> Result<SampledPath, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| CliError::Parse(format!("line 1: {e}")))?.clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(CliError::Parse("empty file: expected header t,x1,...,xd".into()));
    }
    if header.get(0) != Some("t") || header.len() < 2 {
        return Err(CliError::Parse(format!("line 1: header must be t,x1,...,xd, got {:?}", header.iter().collect::<Vec<_>>())));
    }
    for (i, name) in header.iter().enumerate().skip(1) {
        if name != format!("x{i}") {
            return Err(CliError::Parse(format!("line 1: column {} must be x{i}, got {name:?}", i + 1)));
        }
    }
    let d = header.len() - 1;
    let (mut times, mut points) = (Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| CliError::Parse(format!("line {line}: {e}")))?;
        if rec.len() != d + 1 {
            return Err(CliError::Parse(format!("line {line}: expected {} fields, found {}", d + 1, rec.len())));
        }
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| CliError::Parse(format!("line {line}: non-numeric or non-finite field")))?;
        if let Some(&prev) = times.last() {
            if !(vals[0] > prev) {
                return Err(CliError::Parse(format!("line {line}: time {} does not increase (previous {prev})", vals[0])));
            }
        }
        times.push(vals[0]);
        points.push(vals[1..].to_vec());
    }
    if times.len() < 2 {
        return Err(CliError::Parse("a path needs at least two rows".into()));
    }
    Ok(SampledPath::new(times, points)?)
}

/// 17 significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trace_csv(names: &[String], times: &[f64], points: &[Vec<f64>]) -> String {
    let mut out = String::from("t");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (t, p) in times.iter().zip(points) {
        out.push_str(&fmt_num(*t));
        for v in p {
            out.push(',');
            out.push_str(&fmt_num(*v));
        }
        out.push('\n');
    }
    out
}

pub fn x_names(d: usize, stem: &str) -> Vec<String> {
    (1..=d).map(|i| format!("{stem}{i}")).collect()
}

struct SigFigs;

impl serde_json::ser::Formatter for SigFigs {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        writer.write_all(fmt_num(value).as_bytes())
    }
}

/// JSON with sorted keys and every float at 17 significant digits.
pub fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let v = serde_json::to_value(value).map_err(|e| CliError::Parse(e.to_string()))?;
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigFigs);
    v.serialize(&mut ser).map_err(|e| CliError::Parse(e.to_string()))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Gnuplot stub plotting every column of `csv` against `t`.
pub fn gnuplot_script(csv: &str, columns: usize) -> String {
    let mut s = format!("set datafile separator ','\nset key autotitle columnhead\nplot '{csv}' using 1:2 with lines");
    for c in 3..=columns + 1 {
        s.push_str(&format!(", '' using 1:{c} with lines"));
    }
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_rows_make_two_segments() {
        let p = parse_path_csv("t,x1,x2\n0,0,0\n0.5,1,0\n1,1,1\n").unwrap();
        assert_eq!(p.segments(), 2);
    }

    #[test]
    fn empty_and_malformed_inputs() {
        assert!(matches!(parse_path_csv(""), Err(CliError::Parse(_))));
        let err = parse_path_csv("t,x1\n0,1\n0.5,oops\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse_path_csv("t,x1\n0,1\n0,2\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(parse_path_csv("s,x1\n0,1\n1,2\n").is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let times = vec![0.0, 0.1, 1.0 / 3.0];
        let pts = vec![vec![std::f64::consts::PI, -1e-300], vec![2.0f64.sqrt(), 1e300], vec![-0.0, 5e-324]];
        let text = trace_csv(&x_names(2, "x"), &times, &pts);
        let back = parse_path_csv(&text).unwrap();
        assert_eq!(back.times(), &times[..]);
        for (a, b) in back.points().iter().zip(&pts) {
            for (u, v) in a.iter().zip(b) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn json_floats_carry_seventeen_digits() {
        let s = to_json(&serde_json::json!({"b": 0.5, "a": [1.0]})).unwrap();
        assert!(s.contains("5.0000000000000000e-1"));
        assert!(s.find("\"a\"").unwrap() < s.find("\"b\"").unwrap());
    }
}
