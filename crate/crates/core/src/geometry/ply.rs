//! Binary little-endian PLY with float32 `x y z` vertices.

use std::io::{BufRead, BufReader, Read, Write};

use super::PointCloud;
use crate::error::{Error, Result};

pub fn write_ply<W: Write>(cloud: &PointCloud, mut out: W) -> Result<()> {
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )?;
    let mut buf = Vec::with_capacity(cloud.len() * 12);
    for p in &cloud.points {
        for c in p {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads the files produced by [`write_ply`].
pub fn read_ply<R: Read>(input: R) -> Result<PointCloud> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    let mut count = None;
    let mut properties = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("PLY header not terminated".into()));
        }
        let trimmed = line.trim();
        if first {
            if trimmed != "ply" {
                return Err(Error::Format("missing PLY magic".into()));
            }
            first = false;
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        match parts.next() {
            Some("format") => {
                if parts.next() != Some("binary_little_endian") {
                    return Err(Error::Format("only binary_little_endian PLY is supported".into()));
                }
            }
            Some("element") => {
                if parts.next() == Some("vertex") {
                    count = parts.next().and_then(|n| n.parse::<usize>().ok());
                }
            }
            Some("property") => {
                let ty = parts.next().unwrap_or_default().to_string();
                let name = parts.next().unwrap_or_default().to_string();
                properties.push((ty, name));
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let expected = [("float", "x"), ("float", "y"), ("float", "z")];
    let layout_ok = properties.len() == 3
        && properties
            .iter()
            .zip(expected)
            .all(|((t, n), (et, en))| t == et && n == en);
    if !layout_ok {
        return Err(Error::Format("expected float x, y, z vertex properties".into()));
    }
    let count = count.ok_or_else(|| Error::Format("missing vertex count".into()))?;
    let mut bytes = vec![0u8; count * 12];
    reader.read_exact(&mut bytes)?;
    let points = bytes
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2)]
        })
        .collect();
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_header_and_payload() {
        let cloud = PointCloud::new(vec![[0.5, -1.0, 2.0], [0.0, 0.25, 3.0]]).unwrap();
        let mut buf = Vec::new();
        write_ply(&cloud, &mut buf).unwrap();
        let header_end = buf.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(buf.len() - header_end, 24);
        assert!(std::str::from_utf8(&buf[..header_end]).unwrap().contains("element vertex 2"));
        assert_eq!(read_ply(&buf[..]).unwrap(), cloud);
    }

    #[test]
    fn rejects_ascii() {
        let text = b"ply\nformat ascii 1.0\nend_header\n";
        assert!(read_ply(&text[..]).is_err());
    }
}
