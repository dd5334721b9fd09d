//! Versioned on-disk dataset cache: magic, version, JSON header, label table, image bytes.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Dataset, GroundTruth};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DSTLDATA";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    shape: [usize; 3],
    count: usize,
    factors: Vec<FactorHeader>,
}

#[derive(Serialize, Deserialize)]
struct FactorHeader {
    name: String,
    classes: usize,
    values: Vec<f64>,
}

pub fn write(path: &Path, ds: &Dataset) -> Result<()> {
    let io = |e| Error::io(path, e);
    let header = Header {
        name: ds.name.clone(),
        shape: ds.image_shape(),
        count: ds.len(),
        factors: ds
            .factors
            .iter()
            .map(|f| FactorHeader { name: f.name.clone(), classes: f.classes, values: f.values.clone() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for col in &ds.labels {
        for &c in col {
            w.write_u16::<LittleEndian>(c).map_err(io)?;
        }
    }
    let n = ds.pixels();
    let mut buf = vec![0u8; n];
    for i in 0..ds.len() {
        ds.image_bytes(i, &mut buf);
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read(path: &Path) -> Result<Dataset> {
    let io = |e| Error::io(path, e);
    let file = std::fs::File::open(path).map_err(io)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: not a dataset container", path.display())));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: container version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?;
    let mut labels = Vec::with_capacity(header.factors.len());
    for _ in &header.factors {
        let mut col = vec![0u16; header.count];
        r.read_u16_into::<LittleEndian>(&mut col).map_err(io)?;
        labels.push(col);
    }
    let mut bytes = vec![0u8; header.count * header.shape.iter().product::<usize>()];
    r.read_exact(&mut bytes).map_err(io)?;
    let factors = header
        .factors
        .into_iter()
        .map(|f| GroundTruth { name: f.name, classes: f.classes, values: f.values })
        .collect();
    Dataset::from_bytes(&header.name, header.shape, factors, labels, bytes)
}
