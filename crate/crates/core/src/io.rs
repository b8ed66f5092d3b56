//! CSV readers and writers for datasets, predictions and dense matrices.
//!
//! Dataset files carry the header `output_id,t,y` (time series) or `output_id,x1,...,xp,y`
//! (spatial inputs). Line numbers in errors are 1-based and count the header.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{LfmError, Result};
use crate::model::{Dataset, InputKind, Observation};
use crate::predict::Posterior;

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).flexible(true).from_reader(input)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn csv_error(e: csv::Error) -> LfmError {
    let line = e.position().map_or(0, |p| p.line());
    LfmError::Parse { line, reason: e.to_string() }
}

fn parse_f64(field: &str, name: &str, line: u64) -> Result<f64> {
    field.parse().map_err(|_| LfmError::Parse { line, reason: format!("{name}: cannot parse {field:?} as a number") })
}

/// Inspect a dataset header.
fn header_kind(header: &csv::StringRecord) -> Result<InputKind> {
    let fields: Vec<&str> = header.iter().collect();
    let bad = |reason: String| LfmError::Parse { line: 1, reason };
    if fields.len() < 3 || fields[0] != "output_id" || fields[fields.len() - 1] != "y" {
        return Err(bad(format!("expected header output_id,<inputs>,y; got {:?}", fields.join(","))));
    }
    let inputs = &fields[1..fields.len() - 1];
    if inputs == ["t"] {
        return Ok(InputKind::Time);
    }
    for (k, name) in inputs.iter().enumerate() {
        if *name != format!("x{}", k + 1) {
            return Err(bad(format!("input column {} should be named x{}, got {name:?}", k + 2, k + 1)));
        }
    }
    Ok(InputKind::Space(inputs.len()))
}

/// Read a dataset. When `expected` is given the header must describe that input kind; a fully
/// empty input is then an empty dataset.
pub fn read_dataset<R: Read>(input: R, expected: Option<InputKind>) -> Result<Dataset> {
    let mut rdr = reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(csv_error)?,
        None if expected.is_some() => return Ok(Dataset::default()),
        None => return Err(LfmError::Parse { line: 1, reason: "missing header".into() }),
    };
    let kind = header_kind(&header)?;
    if let Some(want) = expected {
        if want != kind {
            return Err(LfmError::Parse {
                line: 1,
                reason: format!("header describes {} input column(s) of kind {kind:?}, model expects {want:?}", kind.dim()),
            });
        }
    }
    let width = kind.dim() + 2;
    let mut entries = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_error)?;
        let line = line_of(&rec);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() != width {
            return Err(LfmError::Parse { line, reason: format!("expected {width} fields, found {}", rec.len()) });
        }
        let id: usize = rec[0]
            .parse()
            .map_err(|_| LfmError::Parse { line, reason: format!("output_id: {:?} is not a positive integer", &rec[0]) })?;
        if id == 0 {
            return Err(LfmError::Parse { line, reason: "output_id starts at 1".into() });
        }
        let input = (1..width - 1).map(|k| parse_f64(&rec[k], &header[k], line)).collect::<Result<Vec<_>>>()?;
        let y = parse_f64(&rec[width - 1], "y", line)?;
        if let Some(v) = input.iter().chain(std::iter::once(&y)).find(|v| !v.is_finite()) {
            return Err(LfmError::Parse { line, reason: format!("non-finite value {v}") });
        }
        entries.push(Observation::new(id, input, y));
    }
    Ok(Dataset::new(entries))
}

fn input_header(kind: InputKind) -> Vec<String> {
    match kind {
        InputKind::Time => vec!["t".into()],
        InputKind::Space(p) => (1..=p).map(|k| format!("x{k}")).collect(),
    }
}

/// Shortest representation that parses back to the same value.
fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_dataset<W: Write>(data: &Dataset, kind: InputKind, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["output_id".to_string()];
    header.extend(input_header(kind));
    header.push("y".into());
    w.write_record(&header).map_err(csv_error)?;
    for e in data.entries() {
        let mut row = vec![e.output_id.to_string()];
        row.extend(e.input.iter().map(|v| num(*v)));
        row.push(num(e.y));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a predictions file.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub output_id: usize,
    pub input: Vec<f64>,
    pub mean: f64,
    pub var: f64,
    pub lower2sd: f64,
    pub upper2sd: f64,
}

/// Predictions with header `output_id,<inputs>,mean,var,lower2sd,upper2sd`.
pub fn write_predictions<W: Write>(test: &Dataset, kind: InputKind, post: &Posterior, out: W) -> Result<()> {
    if post.mean.len() != test.len() {
        return Err(LfmError::LengthMismatch { expected: test.len(), got: post.mean.len() });
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["output_id".to_string()];
    header.extend(input_header(kind));
    header.extend(["mean", "var", "lower2sd", "upper2sd"].map(String::from));
    w.write_record(&header).map_err(csv_error)?;
    for (i, e) in test.entries().iter().enumerate() {
        let (m, v) = (post.mean[i], post.variance[i]);
        let sd = v.sqrt();
        let mut row = vec![e.output_id.to_string()];
        row.extend(e.input.iter().map(|x| num(*x)));
        row.extend([m, v, m - 2.0 * sd, m + 2.0 * sd].map(num));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Latent-force posterior with header `force,t,mean,var,lower2sd,upper2sd`.
pub fn write_latent_predictions<W: Write>(force_id: usize, times: &[f64], post: &Posterior, out: W, header: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if header {
        w.write_record(["force", "t", "mean", "var", "lower2sd", "upper2sd"]).map_err(csv_error)?;
    }
    for (i, t) in times.iter().enumerate() {
        let (m, v) = (post.mean[i], post.variance[i]);
        let sd = v.sqrt();
        let row = [force_id.to_string(), num(*t), num(m), num(v), num(m - 2.0 * sd), num(m + 2.0 * sd)];
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(input: R) -> Result<Vec<PredictionRow>> {
    let mut rdr = reader(input);
    let mut records = rdr.records();
    let Some(header) = records.next() else {
        return Err(LfmError::Parse { line: 1, reason: "missing header".into() });
    };
    let header = header.map_err(csv_error)?;
    let n = header.len();
    if n < 6 || &header[0] != "output_id" || header.iter().skip(n - 4).ne(["mean", "var", "lower2sd", "upper2sd"]) {
        return Err(LfmError::Parse { line: 1, reason: "not a predictions header".into() });
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_error)?;
        let line = line_of(&rec);
        if rec.len() != n {
            return Err(LfmError::Parse { line, reason: format!("expected {n} fields, found {}", rec.len()) });
        }
        let id = rec[0].parse().map_err(|_| LfmError::Parse { line, reason: "bad output_id".into() })?;
        let vals = (1..n).map(|k| parse_f64(&rec[k], &header[k], line)).collect::<Result<Vec<_>>>()?;
        let m = vals.len();
        rows.push(PredictionRow {
            output_id: id,
            input: vals[..m - 4].to_vec(),
            mean: vals[m - 4],
            var: vals[m - 3],
            lower2sd: vals[m - 2],
            upper2sd: vals[m - 1],
        });
    }
    Ok(rows)
}

/// Single-column time grid with header `t`.
pub fn read_times<R: Read>(input: R) -> Result<Vec<f64>> {
    let mut rdr = reader(input);
    let mut records = rdr.records();
    match records.next() {
        Some(h) => {
            let h = h.map_err(csv_error)?;
            if h.len() != 1 || &h[0] != "t" {
                return Err(LfmError::Parse { line: 1, reason: "expected header t".into() });
            }
        }
        None => return Err(LfmError::Parse { line: 1, reason: "missing header".into() }),
    }
    let mut times = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_error)?;
        let line = line_of(&rec);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() != 1 {
            return Err(LfmError::Parse { line, reason: format!("expected 1 field, found {}", rec.len()) });
        }
        let t = parse_f64(&rec[0], "t", line)?;
        if !(t.is_finite() && t >= 0.0) {
            return Err(LfmError::Parse { line, reason: format!("time {t} must be finite and non-negative") });
        }
        times.push(t);
    }
    Ok(times)
}

/// Dense matrix row-major with header `c0,...,c{n-1}`.
pub fn write_matrix<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record((0..m.ncols()).map(|j| format!("c{j}"))).map_err(csv_error)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| num(*v))).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut rdr = reader(input);
    let mut records = rdr.records();
    let Some(header) = records.next() else {
        return Err(LfmError::Parse { line: 1, reason: "missing header".into() });
    };
    let cols = header.map_err(csv_error)?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in records {
        let rec = rec.map_err(csv_error)?;
        let line = line_of(&rec);
        if rec.len() != cols {
            return Err(LfmError::Parse { line, reason: format!("expected {cols} fields, found {}", rec.len()) });
        }
        for f in rec.iter() {
            data.push(parse_f64(f, "entry", line)?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}
