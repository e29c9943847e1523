use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{MtsDataset, Space};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KMTS";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8 + 4 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    /// One row per timestep, a header of node ids, single channel.
    Csv,
    Kmtsbin,
}

impl DatasetFormat {
    /// Guesses from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(DatasetFormat::Csv),
            "kmtsbin" => Some(DatasetFormat::Kmtsbin),
            _ => None,
        }
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<MtsDataset> {
    match format {
        DatasetFormat::Csv => load_csv(path),
        DatasetFormat::Kmtsbin => load_kmtsbin(path),
    }
}

fn load_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string()
}

fn load_csv(path: &Path) -> Result<MtsDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let node_ids: Vec<String> = reader
        .headers()
        .map_err(|e| load_err(path, format!("bad header: {}", e)))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if node_ids.is_empty() || node_ids.iter().all(|s| s.is_empty()) {
        return Err(load_err(path, "header row with node ids is missing"));
    }
    let width = node_ids.len();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| load_err(path, format!("row {}: {}", row, e)))?;
        if record.len() != width {
            return Err(load_err(
                path,
                format!("row {} has {} cells, header has {}", row, record.len(), width),
            ));
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                load_err(path, format!("row {} column {}: cannot parse {:?}", row, col, cell))
            })?;
            if !v.is_finite() {
                return Err(load_err(path, format!("row {} column {}: non-finite value", row, col)));
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(load_err(path, "no data rows"));
    }
    MtsDataset::new(dataset_name(path), node_ids, 1, 5, values)
}

pub fn save_csv(dataset: &MtsDataset, path: &Path) -> Result<()> {
    if dataset.channels() != 1 {
        return Err(Error::Contract("CSV export supports single-channel datasets".into()));
    }
    if dataset.space() != Space::Raw {
        return Err(Error::Contract("only raw-space datasets are written to disk".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(&dataset.node_ids).map_err(wrap)?;
    for row in dataset.values().chunks(dataset.n_nodes()) {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes the binary panel; values are narrowed to `f32`.
pub fn save_kmtsbin(dataset: &MtsDataset, path: &Path) -> Result<()> {
    if dataset.space() != Space::Raw {
        return Err(Error::Contract("only raw-space datasets are written to disk".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(dataset.t_steps() as u64).to_le_bytes());
    header.extend_from_slice(&(dataset.n_nodes() as u32).to_le_bytes());
    header.extend_from_slice(&(dataset.channels() as u32).to_le_bytes());
    header.extend_from_slice(&dataset.sample_rate_minutes.to_le_bytes());
    let io = |e| Error::io(path, e);
    let mut crc = crc32fast::Hasher::new();
    crc.update(&header);
    w.write_all(&header).map_err(io)?;
    for v in dataset.values() {
        let b = (*v as f32).to_le_bytes();
        crc.update(&b);
        w.write_all(&b).map_err(io)?;
    }
    w.write_all(&crc.finalize().to_le_bytes()).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(())
}

fn load_kmtsbin(path: &Path) -> Result<MtsDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "truncated kmtsbin header".into(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected KMTS".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported kmtsbin version {}", version),
        });
    }
    let t = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[18..22].try_into().unwrap()) as usize;
    let rate = u32::from_le_bytes(bytes[22..26].try_into().unwrap());
    let expected = t
        .checked_mul(n)
        .and_then(|v| v.checked_mul(c))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| load_err(path, "dimension overflow"))?;
    let payload = &bytes[HEADER_LEN..bytes.len().max(HEADER_LEN + 4) - 4];
    if bytes.len() < HEADER_LEN + 4 || payload.len() != expected {
        return Err(Error::Format {
            offset: (HEADER_LEN + payload.len().min(expected)) as u64,
            msg: format!(
                "payload holds {} bytes, header declares {}x{}x{} values ({} bytes)",
                payload.len(),
                t,
                n,
                c,
                expected
            ),
        });
    }
    let body = bytes.len() - 4;
    if crc32fast::hash(&bytes[..body]) != u32::from_le_bytes(bytes[body..].try_into().unwrap()) {
        return Err(Error::Format {
            offset: body as u64,
            msg: "checksum mismatch".into(),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let node_ids = (0..n).map(|i| i.to_string()).collect();
    MtsDataset::new(dataset_name(path), node_ids, c, rate, values)
        .map_err(|e| load_err(path, e.to_string()))
}
