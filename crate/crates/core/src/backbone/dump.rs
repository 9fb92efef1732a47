//! Flat binary dump of precomputed feature maps.
//!
//! Layout: `FMD1`, u32 d, u32 h, u32 w, then records until EOF, each a
//! u32-length-prefixed UTF-8 id followed by d·h·w little-endian f32 values in
//! channel-major order.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3};

use super::FeatureMap;
use crate::{Error, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"FMD1";
pub const HEADER_BYTES: usize = 16;
/// Layer name reported for maps served from a dump (the format stores one layer).
pub const DUMP_LAYER: &str = "dump";

#[derive(Debug, Clone)]
pub struct FeatureDump {
    path: PathBuf,
    shape: (usize, usize, usize),
    ids: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f32>,
}

pub fn is_dump_file(path: &Path) -> bool {
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut magic))
        .map(|_| &magic == DUMP_MAGIC)
        .unwrap_or(false)
}

pub fn write_dump<'a, I>(path: impl AsRef<Path>, maps: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, ArrayView3<'a, f32>)>,
{
    let path = path.as_ref();
    let mut maps = maps.into_iter().peekable();
    let shape = maps
        .peek()
        .map(|(_, m)| m.dim())
        .ok_or_else(|| Error::Empty("no feature maps to dump".into()))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut put = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    put(DUMP_MAGIC)?;
    for v in [shape.0, shape.1, shape.2] {
        put(&(v as u32).to_le_bytes())?;
    }
    for (id, map) in maps {
        if map.dim() != shape {
            return Err(Error::Shape(format!(
                "map `{id}` is {:?}, dump is {shape:?}",
                map.dim()
            )));
        }
        put(&(id.len() as u32).to_le_bytes())?;
        put(id.as_bytes())?;
        for &v in map.as_standard_layout().iter() {
            put(&v.to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

impl FeatureDump {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < HEADER_BYTES || &bytes[..4] != DUMP_MAGIC {
            return Err(bad("missing FMD1 header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let shape = (u32_at(4), u32_at(8), u32_at(12));
        let per_map = shape.0 * shape.1 * shape.2;
        if per_map == 0 {
            return Err(bad(format!("degenerate map shape {shape:?}")));
        }
        let mut ids = Vec::new();
        let mut index = HashMap::new();
        let mut values = Vec::new();
        let mut pos = HEADER_BYTES;
        while pos < bytes.len() {
            if pos + 4 > bytes.len() {
                return Err(bad(format!("truncated record at byte {pos}")));
            }
            let len = u32_at(pos);
            pos += 4;
            let end = pos + len + 4 * per_map;
            if end > bytes.len() {
                return Err(bad(format!("truncated record at byte {pos}")));
            }
            let id = std::str::from_utf8(&bytes[pos..pos + len])
                .map_err(|_| bad(format!("non-UTF-8 id at byte {pos}")))?
                .to_string();
            pos += len;
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(bad(format!("duplicate id `{id}`")));
            }
            ids.push(id);
            values.extend(
                bytes[pos..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            );
            pos = end;
        }
        Ok(Self {
            path: path.to_path_buf(),
            shape,
            ids,
            index,
            values,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn lookup(&self, image_id: &str) -> Result<FeatureMap> {
        let &i = self
            .index
            .get(image_id)
            .ok_or_else(|| Error::NotFound(format!("image `{image_id}` in feature dump")))?;
        let n = self.shape.0 * self.shape.1 * self.shape.2;
        let values = Array3::from_shape_vec(self.shape, self.values[i * n..(i + 1) * n].to_vec())
            .expect("record length checked at open");
        Ok(FeatureMap {
            image_id: image_id.to_string(),
            layer: DUMP_LAYER.to_string(),
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_and_size_matches_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fmd");
        let a = Array3::from_shape_fn((32, 8, 8), |(c, y, x)| (c as f32 - 3.5) * 1e-3 + (y * x) as f32);
        let mut b = a.mapv(|v| -v);
        b[[0, 0, 0]] = f32::MIN_POSITIVE / 2.0; // subnormal survives
        write_dump(&path, [("img_a", a.view()), ("b", b.view())]).unwrap();
        let size = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, HEADER_BYTES + (4 + 5 + 32 * 8 * 8 * 4) + (4 + 1 + 32 * 8 * 8 * 4));
        assert!(is_dump_file(&path));
        let dump = FeatureDump::open(&path).unwrap();
        assert_eq!(dump.ids(), ["img_a", "b"]);
        let ra = dump.lookup("img_a").unwrap().values;
        let rb = dump.lookup("b").unwrap().values;
        assert!(ra.iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(rb.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(matches!(dump.lookup("nope"), Err(Error::NotFound(_))));
    }

    #[test]
    fn truncated_dump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fmd");
        let a = Array3::<f32>::zeros((2, 2, 2));
        write_dump(&path, [("x", a.view())]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(FeatureDump::open(&path), Err(Error::Format { .. })));
    }
}
