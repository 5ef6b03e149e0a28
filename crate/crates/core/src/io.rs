//! Numeric CSV tables with a mandatory header row.

use std::path::Path;

use crate::error::{Error, Result};

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_table<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        w.write_record(row.iter().map(|&x| fmt_f64(x))).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table whose header must equal `header`.
pub fn read_table(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    read_impl(path, header, true)
}

/// Reads the leading `header` columns of a table whose header starts with them.
pub fn read_leading_columns(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    read_impl(path, header, false)
}

fn read_impl(path: &Path, header: &[&str], exact: bool) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let got: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_owned).collect();
    let ok = if exact {
        got == header
    } else {
        got.len() >= header.len() && got[..header.len()] == *header
    };
    if !ok {
        return Err(Error::Data(format!(
            "{}: expected header {:?}, found {:?}",
            path.display(),
            header.join(","),
            got.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .take(header.len())
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Data(format!("{}: line {}: unparseable number", path.display(), i + 2)))?;
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("{}: line {}: non-finite value", path.display(), i + 2)));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn formatting_round_trips(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn table_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![vec![0.1, -2.5e-12], vec![1.0 / 3.0, 7.0]];
        write_table(&p, &["a", "b"], rows.clone()).unwrap();
        assert_eq!(read_table(&p, &["a", "b"]).unwrap(), rows);
        assert!(matches!(read_table(&p, &["a", "c"]), Err(Error::Data(_))));
        std::fs::write(&p, "a,b\n1,x\n").unwrap();
        assert!(read_table(&p, &["a", "b"]).unwrap_err().to_string().contains("line 2"));
        std::fs::write(&p, "a,b,c\n1,2,3\n").unwrap();
        assert_eq!(read_leading_columns(&p, &["a", "b"]).unwrap(), vec![vec![1.0, 2.0]]);
        assert!(read_table(&p, &["a", "b"]).is_err());
    }
}
