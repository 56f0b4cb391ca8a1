//! File helpers shared by the commands. CSV outputs start with `# key: value`
//! provenance lines; readers skip them.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use in2core::influence::{Hessian, InfluenceRecord};
use in2core::{Error, Result};

pub fn io_err(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingPath(path.to_path_buf())
    } else {
        Error::Io { path: path.to_path_buf(), source: e }
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub type Provenance = Vec<(&'static str, String)>;

/// Writes the provenance block followed by whatever `body` renders.
pub fn write_csv(path: &Path, provenance: &Provenance, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    for (k, v) in provenance {
        buf.extend_from_slice(format!("# {k}: {v}\n").as_bytes());
    }
    body(&mut buf)?;
    write_bytes(path, &buf)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

/// `rank,example_id,influence`, in rank order.
pub fn write_records(path: &Path, provenance: &Provenance, records: &[InfluenceRecord]) -> Result<()> {
    write_csv(path, provenance, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["rank", "example_id", "influence"])?;
        for r in records {
            w.write_record([r.rank.to_string(), r.example_id.clone(), r.influence.to_string()])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))
    })
}

pub fn read_records(path: &Path) -> Result<Vec<InfluenceRecord>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let field = |i: usize| row.get(i).ok_or_else(|| Error::CorruptHeader(format!("{}: short row", path.display())));
        let rank = field(0)?.parse().map_err(|_| Error::CorruptHeader(format!("{}: bad rank `{}`", path.display(), &row[0])))?;
        let influence =
            field(2)?.parse().map_err(|_| Error::CorruptHeader(format!("{}: bad influence `{}`", path.display(), &row[2])))?;
        out.push(InfluenceRecord { example_id: field(1)?.to_string(), influence, rank });
    }
    Ok(out)
}

/// `example_id,e0,e1,...`
pub fn write_embeddings(path: &Path, provenance: &Provenance, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.1.len());
    write_csv(path, provenance, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let mut header = vec!["example_id".to_string()];
        header.extend((0..dim).map(|i| format!("e{i}")));
        w.write_record(&header)?;
        for (id, v) in rows {
            let mut rec = vec![id.clone()];
            rec.extend(v.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))
    })
}

pub fn read_embeddings(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let id = row.get(0).unwrap_or_default().to_string();
        let v = row
            .iter()
            .skip(1)
            .map(|x| x.parse::<f64>().map_err(|_| Error::CorruptHeader(format!("{}: bad value `{x}`", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        out.push((id, v));
    }
    Ok(out)
}

pub fn read_hessian(path: &Path) -> Result<Hessian> {
    let h: Hessian = read_json(path)?;
    Hessian::new(h.dim, h.values)
}
