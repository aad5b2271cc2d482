//! `.hmap` map files: a small fixed header followed by raw little-endian
//! `f64` values, channel-major.
//!
//! ```text
//! "HMAP1" | nside u32 | ordering u8 (0 = nested) | channels u32
//!         | units length u32 | units utf-8 | payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::healpix::{Resolution, SkyMap};

const MAGIC: &[u8; 5] = b"HMAP1";
const NESTED: u8 = 0;

/// A map together with its unit label.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFile {
    pub map: SkyMap,
    pub units: String,
}

impl MapFile {
    pub fn new(map: SkyMap, units: impl Into<String>) -> Self {
        MapFile { map, units: units.into() }
    }
}

pub fn encode(file: &MapFile) -> Vec<u8> {
    let map = &file.map;
    let units = file.units.as_bytes();
    let mut out = Vec::with_capacity(22 + units.len() + 8 * map.values().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&map.resolution().nside().to_le_bytes());
    out.push(NESTED);
    out.extend_from_slice(&(map.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(units.len() as u32).to_le_bytes());
    out.extend_from_slice(units);
    for v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format { kind: "hmap", path: self.path.to_path_buf(), detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<MapFile> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(5)? != MAGIC {
        return Err(r.err("bad magic"));
    }
    let nside = r.u32()?;
    let ordering = r.take(1)?[0];
    if ordering != NESTED {
        return Err(r.err(format!("unsupported ordering byte {ordering}")));
    }
    let channels = r.u32()? as usize;
    let units_len = r.u32()? as usize;
    let units = std::str::from_utf8(r.take(units_len)?).map_err(|_| r.err("units tag is not utf-8"))?.to_string();
    let res = Resolution::new(nside).map_err(|e| r.err(e.to_string()))?;
    let n = channels.checked_mul(res.n_pixels()).ok_or_else(|| r.err("size overflow"))?;
    let payload = r.take(n.checked_mul(8).ok_or_else(|| r.err("size overflow"))?)?;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let map = SkyMap::new(res, channels, values).map_err(|e| r.err(e.to_string()))?;
    Ok(MapFile { map, units })
}

pub fn save(path: &Path, file: &MapFile) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&encode(file)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<MapFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes, path)
}
