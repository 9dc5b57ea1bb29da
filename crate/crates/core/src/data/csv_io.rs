use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::SpectralCurve;
use crate::error::{Error, Result};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

/// Writes `label,source_id,x0,…,x{L-1}`; an unlabeled curve has an empty label.
pub fn write_dataset_to<W: Write>(out: W, curves: &[SpectralCurve]) -> Result<()> {
    let len = curves.first().map_or(0, SpectralCurve::len);
    if let Some(c) = curves.iter().find(|c| c.len() != len) {
        return Err(Error::Data(format!(
            "curve `{}` has length {} but the dataset uses {len}",
            c.source_id,
            c.len()
        )));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = vec!["label".to_string(), "source_id".to_string()];
    header.extend((0..len).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut record = Vec::with_capacity(len + 2);
    for c in curves {
        record.clear();
        record.push(c.label.map(|l| l.to_string()).unwrap_or_default());
        record.push(c.source_id.clone());
        record.extend(c.intensities.iter().map(f64::to_string));
        w.write_record(&record).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, curves: &[SpectralCurve]) -> Result<()> {
    write_dataset_to(BufWriter::new(File::create(path)?), curves)
}

pub fn read_dataset_from<R: Read>(input: R, path: &Path) -> Result<Vec<SpectralCurve>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 3 || &header[0] != "label" || &header[1] != "source_id" {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "header must start with `label,source_id,x0`".into(),
        });
    }
    let len = header.len() - 2;
    let mut curves = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let label = match rec[0].trim() {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|e| bad(format!("label `{s}`: {e}")))?),
        };
        let intensities = rec
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<f64>().map_err(|e| bad(format!("value `{v}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if intensities.len() != len {
            return Err(bad(format!("expected {len} values, found {}", intensities.len())));
        }
        curves.push(SpectralCurve::new(intensities, label, &rec[1]));
    }
    Ok(curves)
}

pub fn read_dataset(path: &Path) -> Result<Vec<SpectralCurve>> {
    read_dataset_from(BufReader::new(File::open(path)?), path)
}
