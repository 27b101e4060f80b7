//! Single-channel little-endian PFM for individual depth maps.
//!
//! Rows are stored bottom to top as the format prescribes; values are the
//! caller's (normalized depths in this crate).

use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};

/// A row-major `height × width` map, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

pub fn write_pfm<W: Write>(image: &PfmImage, mut out: W) -> Result<()> {
    if image.values.len() != image.width * image.height {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {}×{} map",
            image.values.len(),
            image.height,
            image.width
        )));
    }
    write!(out, "Pf\n{} {}\n-1.0\n", image.width, image.height)?;
    let mut buf = Vec::with_capacity(image.values.len() * 4);
    for row in image.values.chunks(image.width.max(1)).rev() {
        for &v in row {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

fn header_line<R: BufRead>(reader: &mut R) -> Result<String> {
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Err(Error::Format("truncated PFM header".into()));
    }
    Ok(line.trim().to_string())
}

pub fn read_pfm<R: Read>(input: R) -> Result<PfmImage> {
    let mut reader = BufReader::new(input);
    if header_line(&mut reader)? != "Pf" {
        return Err(Error::Format("expected a single-channel `Pf` map".into()));
    }
    let dims = header_line(&mut reader)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (Some(Ok(width)), Some(Ok(height)), None) = (it.next(), it.next(), it.next()) else {
        return Err(Error::Format(format!("bad PFM dimensions `{dims}`")));
    };
    let scale: f64 = header_line(&mut reader)?
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    if scale == 0.0 {
        return Err(Error::Format("PFM scale must be nonzero".into()));
    }
    let little = scale < 0.0;
    let mut bytes = vec![0u8; width * height * 4];
    reader.read_exact(&mut bytes)?;
    let floats: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| {
            let b: [u8; 4] = c.try_into().unwrap();
            (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
        })
        .collect();
    let mut values = Vec::with_capacity(floats.len());
    for row in floats.chunks(width.max(1)).rev() {
        values.extend_from_slice(row);
    }
    Ok(PfmImage { width, height, values })
}
