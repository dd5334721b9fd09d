//! Big-endian IDX files as distributed for MNIST and Fashion-MNIST.

use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an image/label file pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxPair {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl IdxPair {
    pub fn count(&self) -> usize {
        self.labels.len()
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    check_len(path, bytes, 4)?;
    let found = BigEndian::read_u32(bytes);
    if found != expected {
        return Err(Error::WrongMagic { path: path.to_path_buf(), expected, found });
    }
    Ok(())
}

pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(path, bytes, IMAGE_MAGIC)?;
    check_len(path, bytes, 16)?;
    let n = BigEndian::read_u32(&bytes[4..]) as usize;
    let rows = BigEndian::read_u32(&bytes[8..]) as usize;
    let cols = BigEndian::read_u32(&bytes[12..]) as usize;
    let end = 16 + n * rows * cols;
    check_len(path, bytes, end)?;
    Ok((n, rows, cols, bytes[16..end].to_vec()))
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(path, bytes, LABEL_MAGIC)?;
    check_len(path, bytes, 8)?;
    let n = BigEndian::read_u32(&bytes[4..]) as usize;
    check_len(path, bytes, 8 + n)?;
    Ok(bytes[8..8 + n].to_vec())
}

pub fn read_pair(images_path: &Path, labels_path: &Path) -> Result<IdxPair> {
    let (n, rows, cols, images) = parse_images(images_path, &read(images_path)?)?;
    let labels = parse_labels(labels_path, &read(labels_path)?)?;
    if n != labels.len() {
        return Err(Error::CountMismatch { images: n, labels: labels.len() });
    }
    Ok(IdxPair { rows, cols, images, labels })
}

pub fn encode_images(rows: usize, cols: usize, images: &[u8]) -> Vec<u8> {
    let n = images.len() / (rows * cols);
    let mut out = vec![0u8; 16];
    BigEndian::write_u32(&mut out[0..], IMAGE_MAGIC);
    BigEndian::write_u32(&mut out[4..], n as u32);
    BigEndian::write_u32(&mut out[8..], rows as u32);
    BigEndian::write_u32(&mut out[12..], cols as u32);
    out.extend_from_slice(images);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; 8];
    BigEndian::write_u32(&mut out[0..], LABEL_MAGIC);
    BigEndian::write_u32(&mut out[4..], labels.len() as u32);
    out.extend_from_slice(labels);
    out
}

pub fn write_pair(images_path: &Path, labels_path: &Path, pair: &IdxPair) -> Result<()> {
    std::fs::write(images_path, encode_images(pair.rows, pair.cols, &pair.images))
        .map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, encode_labels(&pair.labels)).map_err(|e| Error::io(labels_path, e))
}
