use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::dataset::{Dataset, Oracle};
use crate::denoiser::CausalMasks;
use crate::error::{Error, Result};

/// Column roles for [`load_csv`]. An empty `covariates` list selects every
/// column other than the treatment and outcome, in file order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub covariates: Vec<String>,
    pub treatment: String,
    pub outcome: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            covariates: Vec::new(),
            treatment: "a".into(),
            outcome: "y".into(),
        }
    }
}

fn parse_err(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Reads a header-first CSV. Lines starting with `#` are skipped. Empty
/// covariate cells become unobserved (`m_o = 0`); an empty outcome cell marks
/// the unit's outcome as unobserved. Rows are numbered from 1 after the header.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(0, "", e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(0, name, "column not found in header"))
    };
    let a_col = find(&schema.treatment)?;
    let y_col = find(&schema.outcome)?;
    let covariates: Vec<String> = if schema.covariates.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != a_col && *i != y_col)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        schema.covariates.clone()
    };
    let x_cols: Vec<usize> = covariates.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let d = x_cols.len();
    if d == 0 {
        return Err(parse_err(0, "", "no covariate columns"));
    }

    let (mut x, mut a, mut y, mut masks) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        let record = record.map_err(|e| parse_err(row, "", e.to_string()))?;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let number = |c: usize| -> Result<f64> {
            let s = cell(c);
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(row, &headers[c], format!("cannot parse '{s}' as a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(row, &headers[c], format!("non-finite value '{s}'")))
            }
        };
        let mut observed = Vec::with_capacity(d);
        for &c in &x_cols {
            if cell(c).is_empty() {
                observed.push(false);
                x.push(0.0);
            } else {
                observed.push(true);
                x.push(number(c)?);
            }
        }
        let av = match cell(a_col) {
            "0" | "0.0" => 0.0,
            "1" | "1.0" => 1.0,
            other => {
                return Err(parse_err(
                    row,
                    &schema.treatment,
                    format!("treatment must be 0 or 1, got '{other}'"),
                ))
            }
        };
        a.push(av);
        let outcome_observed = !cell(y_col).is_empty();
        y.push(if outcome_observed { number(y_col)? } else { 0.0 });
        masks.push(CausalMasks::for_unit(&observed, outcome_observed));
    }
    Dataset::with_masks(x, d, a, y, masks, covariates)
}

fn fmt(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v:?}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serialization(format!("{}: {other:?}", path.display())),
    }
}

fn writer(path: &Path, stamp: Option<&str>) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufWriter::new(file);
    if let Some(s) = stamp {
        writeln!(buf, "# {s}").map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(buf))
}

/// Writes covariates, `a` and `y`; unobserved cells are left empty. `stamp`
/// becomes a leading `#` comment line.
pub fn write_csv(path: &Path, data: &Dataset, stamp: Option<&str>) -> Result<()> {
    let mut w = writer(path, stamp)?;
    let mut header: Vec<String> = data.covariate_names().to_vec();
    header.push("a".into());
    header.push("y".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let d = data.d();
    for i in 0..data.n() {
        let m = &data.masks()[i];
        let mut rec: Vec<String> = data
            .x_row(i)
            .iter()
            .enumerate()
            .map(|(j, &v)| if m.observed[j] == 1.0 { fmt(v) } else { String::new() })
            .collect();
        rec.push(fmt(data.treatment()[i]));
        rec.push(if m.observed[d + 1] == 1.0 {
            fmt(data.outcome()[i])
        } else {
            String::new()
        });
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const ORACLE_COLUMNS: [&str; 10] = [
    "split",
    "row",
    "y0",
    "y1",
    "mu0",
    "mu1",
    "sd0",
    "sd1",
    "true_pi",
    "true_cate",
];

/// Oracle sidecar rows `(split, row, y0, y1, mu0, mu1, sd0, sd1, true_pi, true_cate)`.
pub fn write_oracle_csv(path: &Path, parts: &[(&str, &Oracle)], stamp: Option<&str>) -> Result<()> {
    let mut w = writer(path, stamp)?;
    w.write_record(ORACLE_COLUMNS).map_err(|e| csv_err(path, e))?;
    for (name, o) in parts {
        for i in 0..o.len() {
            let vals = [
                o.y0[i],
                o.y1[i],
                o.mu0[i],
                o.mu1[i],
                o.sd0[i],
                o.sd1[i],
                o.true_pi[i],
                o.true_cate[i],
            ];
            let mut rec = vec![name.to_string(), i.to_string()];
            rec.extend(vals.iter().map(|&v| fmt(v)));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the oracle rows for one split, ordered by `row`.
pub fn load_oracle_csv(path: &Path, split_name: &str) -> Result<Oracle> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let mut rows: Vec<(usize, [f64; 8])> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        let record = record.map_err(|e| parse_err(row, "", e.to_string()))?;
        if record.get(0) != Some(split_name) {
            continue;
        }
        let get = |c: usize| -> Result<&str> {
            record
                .get(c)
                .ok_or_else(|| parse_err(row, ORACLE_COLUMNS[c], "missing cell"))
        };
        let idx: usize = get(1)?.parse().map_err(|_| parse_err(row, "row", "not an index"))?;
        let mut vals = [0.0; 8];
        for (j, v) in vals.iter_mut().enumerate() {
            *v = get(j + 2)?
                .parse()
                .map_err(|_| parse_err(row, ORACLE_COLUMNS[j + 2], "not a number"))?;
        }
        rows.push((idx, vals));
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
        return Err(parse_err(
            0,
            "row",
            format!("rows of split '{split_name}' are not 0..n"),
        ));
    }
    let col = |j: usize| rows.iter().map(|r| r.1[j]).collect::<Vec<f64>>();
    Ok(Oracle {
        y0: col(0),
        y1: col(1),
        mu0: col(2),
        mu1: col(3),
        sd0: col(4),
        sd1: col(5),
        true_pi: col(6),
        true_cate: col(7),
    })
}
