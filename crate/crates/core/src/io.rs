//! CSV readers and writers.
//!
//! Panels are stored time-major on disk: a header row of series ids, then
//! one row per period whose first cell is the time label. In memory they
//! are `N x T`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::projection::PanelData;

/// Shortest decimal text that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    // Rust's Display for f64 is round-trip exact
    format!("{v}")
}

fn parse_cell(cell: &str, row: usize, column: usize) -> Result<f64> {
    let v: f64 =
        cell.trim().parse().map_err(|_| Error::Parse { row, column, message: format!("'{cell}' is not a number") })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column,
            message: format!("'{cell}' is not finite; missing data is not supported"),
        });
    }
    Ok(v)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Read a time-major panel with a header row and a time-label column.
pub fn read_panel_from<R: Read>(reader: R) -> Result<PanelData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::EmptyPanel("header must hold a time column and at least one series".into()));
    }
    let series_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = series_ids.len();
    let mut time_ids = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // data rows are numbered from 2; row 1 is the header
        let row = i + 2;
        if rec.len() != n + 1 {
            return Err(Error::Parse {
                row,
                column: rec.len(),
                message: format!("expected {} cells, found {}", n + 1, rec.len()),
            });
        }
        time_ids.push(rec[0].to_string());
        for (j, cell) in rec.iter().skip(1).enumerate() {
            values.push(parse_cell(cell, row, j + 2)?);
        }
    }
    if time_ids.is_empty() {
        return Err(Error::EmptyPanel("no data rows".into()));
    }
    // row-major T x N buffer is the column-major layout of the N x T panel
    let x = DMatrix::from_column_slice(n, time_ids.len(), &values);
    PanelData::with_labels(x, Some(series_ids), Some(time_ids))
}

pub fn read_panel(path: impl AsRef<Path>) -> Result<PanelData> {
    let path = path.as_ref();
    read_panel_from(open(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { row, column, message } => {
            Error::Parse { row, column, message: format!("{}: {message}", path.display()) }
        }
        Error::EmptyPanel(m) => Error::EmptyPanel(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn write_panel_to<W: Write>(panel: &PanelData, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string()];
    match &panel.series_ids {
        Some(ids) => header.extend(ids.iter().cloned()),
        None => header.extend((0..panel.n_series()).map(|i| format!("s{i}"))),
    }
    wtr.write_record(&header)?;
    let x = panel.x();
    for t in 0..panel.n_periods() {
        let label = panel.time_ids.as_ref().map_or_else(|| t.to_string(), |ids| ids[t].clone());
        let mut row = vec![label];
        row.extend(x.column(t).iter().map(|&v| fmt_f64(v)));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("panel csv", e))?;
    Ok(())
}

pub fn write_panel(panel: &PanelData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_panel_to(panel, File::create(path).map_err(|e| Error::io(path, e))?)
}

/// Plain numeric matrix, optional header, no label column.
pub fn read_matrix_from<R: Read>(reader: R, has_header: bool) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(has_header).flexible(true).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let offset = if has_header { 2 } else { 1 };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + offset;
        let vals = rec.iter().enumerate().map(|(j, c)| parse_cell(c, row, j + 1)).collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if vals.len() != first.len() {
                return Err(Error::Parse {
                    row,
                    column: vals.len(),
                    message: format!("expected {} cells, found {}", first.len(), vals.len()),
                });
            }
        }
        rows.push(vals);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(Error::EmptyPanel("matrix file has no data".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn read_matrix(path: impl AsRef<Path>, has_header: bool) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    read_matrix_from(open(path)?, has_header).map_err(|e| with_path(e, path))
}

/// Single numeric column (first column of the file), with header.
pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let m = read_matrix(path, true)?;
    Ok(m.column(0).iter().copied().collect())
}

pub fn write_matrix_to<W: Write>(m: &DMatrix<f64>, header: &[String], out: W) -> Result<()> {
    if !header.is_empty() && header.len() != m.ncols() {
        return Err(Error::DimensionMismatch { what: "csv header", expected: m.ncols(), got: header.len() });
    }
    let mut wtr = csv::Writer::from_writer(out);
    if !header.is_empty() {
        wtr.write_record(header)?;
    }
    for row in m.row_iter() {
        wtr.write_record(row.iter().map(|&v| fmt_f64(v)))?;
    }
    wtr.flush().map_err(|e| Error::io("matrix csv", e))?;
    Ok(())
}

pub fn write_matrix(m: &DMatrix<f64>, header: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_matrix_to(m, header, File::create(path).map_err(|e| Error::io(path, e))?)
}

/// Matrix with a leading label column, e.g. factors keyed by period.
pub fn write_labeled_matrix_to<W: Write>(
    m: &DMatrix<f64>,
    label_name: &str,
    labels: &[String],
    header: &[String],
    out: W,
) -> Result<()> {
    if labels.len() != m.nrows() {
        return Err(Error::DimensionMismatch { what: "row labels", expected: m.nrows(), got: labels.len() });
    }
    if header.len() != m.ncols() {
        return Err(Error::DimensionMismatch { what: "csv header", expected: m.ncols(), got: header.len() });
    }
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(std::iter::once(label_name).chain(header.iter().map(String::as_str)))?;
    for (label, row) in labels.iter().zip(m.row_iter()) {
        wtr.write_record(std::iter::once(label.clone()).chain(row.iter().map(|&v| fmt_f64(v))))?;
    }
    wtr.flush().map_err(|e| Error::io("matrix csv", e))?;
    Ok(())
}

pub fn write_labeled_matrix(
    m: &DMatrix<f64>,
    label_name: &str,
    labels: &[String],
    header: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    write_labeled_matrix_to(m, label_name, labels, header, File::create(path).map_err(|e| Error::io(path, e))?)
}

/// `(i, j, value)` rows for every nonzero entry of the upper triangle.
pub fn write_triplets_to<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["i", "j", "value"])?;
    for j in 0..m.ncols() {
        for i in 0..=j.min(m.nrows().saturating_sub(1)) {
            let v = m[(i, j)];
            if v != 0.0 {
                wtr.write_record([i.to_string(), j.to_string(), fmt_f64(v)])?;
            }
        }
    }
    wtr.flush().map_err(|e| Error::io("triplet csv", e))?;
    Ok(())
}

pub fn write_triplets(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_triplets_to(m, File::create(path).map_err(|e| Error::io(path, e))?)
}

/// Inverse of [`write_triplets_to`] for a symmetric `n x n` matrix.
pub fn read_triplets_from<R: Read>(reader: R, n: usize) -> Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut m = DMatrix::zeros(n, n);
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 2;
        if rec.len() != 3 {
            return Err(Error::Parse { row, column: rec.len(), message: "expected i,j,value".into() });
        }
        let idx = |c: usize| -> Result<usize> {
            rec[c].trim().parse::<usize>().ok().filter(|&v| v < n).ok_or_else(|| Error::Parse {
                row,
                column: c + 1,
                message: format!("'{}' is not an index below {n}", &rec[c]),
            })
        };
        let (i, j) = (idx(0)?, idx(1)?);
        let v = parse_cell(&rec[2], row, 3)?;
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_round_trip_is_exact() {
        let text = "time,a,b\n2001,0.1,-3.25e-7\n2002,1e300,2.0000000000000004\n";
        let panel = read_panel_from(text.as_bytes()).unwrap();
        assert_eq!(panel.n_series(), 2);
        assert_eq!(panel.n_periods(), 2);
        // time-major on disk, N x T in memory
        assert_eq!(panel.x()[(1, 0)], -3.25e-7);
        assert_eq!(panel.x()[(0, 1)], 1e300);
        let mut buf = Vec::new();
        write_panel_to(&panel, &mut buf).unwrap();
        let again = read_panel_from(buf.as_slice()).unwrap();
        assert_eq!(again.x(), panel.x());
        assert_eq!(again.time_ids, panel.time_ids);
    }

    #[test]
    fn fmt_is_lossless() {
        for v in [0.1, 1.0 / 3.0, -2.0f64.sqrt(), 1e-310, f64::MAX, 123456789.12345679] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn header_only_is_empty() {
        assert!(matches!(read_panel_from("time,a,b\n".as_bytes()), Err(Error::EmptyPanel(_))));
        assert!(matches!(read_panel_from("".as_bytes()), Err(Error::EmptyPanel(_))));
    }

    #[test]
    fn nan_is_located() {
        let err = read_panel_from("time,a,b\n1,0.5,1\n2,NaN,3\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => assert_eq!((row, column), (3, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_and_text_rejected() {
        assert!(matches!(read_panel_from("time,a,b\n1,0.5\n".as_bytes()), Err(Error::Parse { row: 2, .. })));
        assert!(matches!(read_panel_from("time,a\n1,abc\n".as_bytes()), Err(Error::Parse { row: 2, column: 2, .. })));
    }

    #[test]
    fn triplets_round_trip() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 3.0]);
        let mut buf = Vec::new();
        write_triplets_to(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(read_triplets_from(buf.as_slice(), 3).unwrap(), m);
    }

    #[test]
    fn matrix_round_trip_with_header() {
        let m = DMatrix::from_row_slice(2, 2, &[1.5, -0.25, 1e-9, 7.0]);
        let mut buf = Vec::new();
        write_matrix_to(&m, &["f1".into(), "f2".into()], &mut buf).unwrap();
        assert_eq!(read_matrix_from(buf.as_slice(), true).unwrap(), m);
    }

    #[test]
    fn labeled_matrix_layout() {
        let m = DMatrix::from_row_slice(2, 1, &[0.5, -2.0]);
        let mut buf = Vec::new();
        write_labeled_matrix_to(&m, "t", &["a".into(), "b".into()], &["f1".into()], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,f1\na,0.5\nb,-2\n");
        assert!(write_labeled_matrix_to(&m, "t", &["a".into()], &["f1".into()], Vec::new()).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_panel("/nonexistent/panel.csv").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/panel.csv"));
    }
}
