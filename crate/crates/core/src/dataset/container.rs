//! Binary container for sets of multi-view depth maps.
//!
//! Layout: `"MVDD"`, version `u32`, manifest length `u32`, manifest JSON,
//! then `count` blocks of `N·H·W` little-endian `f32` in index order.
//! When `has_masks` is set, `count·N·H·W` mask bytes (0 or 1) follow.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::camera::{CameraRig, RigFile};
use crate::error::{Error, Result};
use crate::geometry::{DepthMapSet, DepthNormalization, VisibilityMask};

pub const MAGIC: &[u8; 4] = b"MVDD";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    #[serde(rename = "N")]
    pub views: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub near: f64,
    pub far: f64,
    pub rig: RigFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kinds: Vec<String>,
    #[serde(default)]
    pub has_masks: bool,
}

impl Manifest {
    pub fn for_rig(count: usize, rig: &CameraRig, normalization: DepthNormalization) -> Self {
        let k = rig.intrinsics();
        Self {
            count,
            views: rig.len(),
            height: k.height,
            width: k.width,
            near: normalization.near,
            far: normalization.far,
            rig: rig.to_json(),
            seed: None,
            seeds: Vec::new(),
            kinds: Vec::new(),
            has_masks: false,
        }
    }

    fn block_len(&self) -> usize {
        self.views * self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthContainer {
    pub manifest: Manifest,
    pub samples: Vec<DepthMapSet>,
    pub masks: Option<Vec<VisibilityMask>>,
}

impl DepthContainer {
    /// Wraps sets that share one rig; `seeds`/`kinds` stay empty.
    pub fn from_sets(samples: Vec<DepthMapSet>, masks: Option<Vec<VisibilityMask>>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("container needs at least one sample".into()))?;
        let manifest = Manifest::for_rig(samples.len(), &first.rig, first.normalization);
        let c = Self {
            manifest,
            samples,
            masks,
        };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<()> {
        let m = &self.manifest;
        if self.samples.len() != m.count {
            return Err(Error::ShapeMismatch(format!("manifest count {} but {} samples", m.count, self.samples.len())));
        }
        for s in &self.samples {
            if (s.views, s.height, s.width) != (m.views, m.height, m.width) {
                return Err(Error::ShapeMismatch("sample dimensions differ from manifest".into()));
            }
        }
        if let Some(masks) = &self.masks {
            if masks.len() != m.count
                || masks
                    .iter()
                    .any(|k| (k.views, k.height, k.width) != (m.views, m.height, m.width))
            {
                return Err(Error::ShapeMismatch("mask dimensions differ from manifest".into()));
            }
        }
        Ok(())
    }
}

pub fn write_container<W: Write>(container: &DepthContainer, mut out: W) -> Result<()> {
    container.check()?;
    let mut manifest = container.manifest.clone();
    manifest.has_masks = container.masks.is_some();
    let json = serde_json::to_vec(&manifest)?;
    out.write_all(MAGIC)?;
    out.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(manifest.block_len() * 4);
    for s in &container.samples {
        buf.clear();
        for &v in &s.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    if let Some(masks) = &container.masks {
        for m in masks {
            let bytes: Vec<u8> = m.flags.iter().map(|&f| f as u8).collect();
            out.write_all(&bytes)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_container<R: Read>(mut input: R) -> Result<DepthContainer> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an MVDD container".into()));
    }
    let version = read_u32(&mut input)?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let len = read_u32(&mut input)? as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let rig = CameraRig::from_json(&manifest.rig)?;
    let k = rig.intrinsics();
    if (rig.len(), k.height, k.width) != (manifest.views, manifest.height, manifest.width) {
        return Err(Error::Format("manifest dimensions disagree with its rig".into()));
    }
    let normalization = DepthNormalization::new(manifest.near, manifest.far)?;
    let block = manifest.block_len();
    let mut bytes = vec![0u8; block * 4];
    let mut samples = Vec::with_capacity(manifest.count);
    for _ in 0..manifest.count {
        input.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        samples.push(DepthMapSet::new(values, rig.clone(), normalization)?);
    }
    let masks = if manifest.has_masks {
        let mut flags = vec![0u8; block];
        let mut masks = Vec::with_capacity(manifest.count);
        for _ in 0..manifest.count {
            input.read_exact(&mut flags)?;
            masks.push(VisibilityMask {
                flags: flags.iter().map(|&b| b != 0).collect(),
                views: manifest.views,
                height: manifest.height,
                width: manifest.width,
            });
        }
        Some(masks)
    } else {
        None
    };
    Ok(DepthContainer {
        manifest,
        samples,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{fixed_cuboid_rig, Intrinsics};
    use crate::dataset::generate;

    #[test]
    fn round_trip_with_masks() {
        let rig = fixed_cuboid_rig(Intrinsics::centered(6, 5)).truncated(4).unwrap();
        let mut c = generate(2, &rig, 3, &["sphere"]).unwrap();
        let masks: Vec<_> = c.samples.iter().map(|s| VisibilityMask::all(s, true)).collect();
        c.masks = Some(masks);
        let mut buf = Vec::new();
        write_container(&c, &mut buf).unwrap();
        let back = read_container(&buf[..]).unwrap();
        assert!(back.manifest.has_masks);
        assert_eq!(back.masks, c.masks);
        for (a, b) in back.samples.iter().zip(&c.samples) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn payload_size() {
        let rig = fixed_cuboid_rig(Intrinsics::centered(16, 16)).truncated(4).unwrap();
        let c = generate(64, &rig, 7, &["sphere", "box"]).unwrap();
        let mut buf = Vec::new();
        write_container(&c, &mut buf).unwrap();
        let header = 12 + u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        assert_eq!(buf.len() - header, 64 * 4 * 16 * 16 * 4);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(matches!(read_container(&b"XXXX\x01\0\0\0"[..]), Err(Error::Format(_))));
    }
}
