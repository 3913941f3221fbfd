//! DBV1 volume files: `"DBV1"`, three little-endian u32 dims, then
//! `nx*ny*nz` little-endian f32 values in x-fastest order.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::{DataError, MetricVolume};

const MAGIC: &[u8; 4] = b"DBV1";
const HEADER_LEN: usize = 16;

/// `foo.dbv` -> `foo.mask.dbv`.
pub fn companion_mask_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned());
    let name = match ext {
        Some(ext) => format!("{stem}.mask.{ext}"),
        None => format!("{stem}.mask"),
    };
    path.with_file_name(name)
}

fn encode(dims: [usize; 3], values: impl ExactSizeIterator<Item = f32>) -> io::Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    buf.extend_from_slice(MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Writes the volume values (not the mask).
pub fn write_volume(volume: &MetricVolume, path: impl AsRef<Path>) -> Result<(), DataError> {
    let bytes = encode(volume.dims(), volume.values().iter().copied())?;
    write_bytes(path.as_ref(), &bytes)
}

/// Writes the mask as a DBV1 file of 0/1 values.
pub fn write_mask(volume: &MetricVolume, path: impl AsRef<Path>) -> Result<(), DataError> {
    let bytes = encode(
        volume.dims(),
        volume.mask().iter().map(|&m| if m { 1.0 } else { 0.0 }),
    )?;
    write_bytes(path.as_ref(), &bytes)
}

fn decode(path: &Path) -> Result<([usize; 3], Vec<f32>), DataError> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => DataError::MissingVolume { path: path.into() },
        _ => DataError::Io(e),
    })?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic { path: path.into() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::TruncatedFile {
            path: path.into(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let n = dims.iter().product::<usize>();
    let expected = HEADER_LEN + 4 * n;
    if bytes.len() < expected {
        return Err(DataError::TruncatedFile {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    let mut values = Vec::with_capacity(n);
    for (index, chunk) in bytes[HEADER_LEN..expected].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DataError::NonFinite {
                path: path.into(),
                index,
            });
        }
        values.push(v);
    }
    Ok((dims, values))
}

/// Reads a volume; the mask comes from the companion `*.mask.dbv` file when
/// it exists, otherwise every voxel is in-mask.
pub fn read_volume(path: impl AsRef<Path>) -> Result<MetricVolume, DataError> {
    let path = path.as_ref();
    let mask_path = companion_mask_path(path);
    let mask = mask_path.exists().then_some(mask_path);
    read_volume_with_mask(path, mask.as_deref())
}

/// Reads a volume with an explicit mask file. Mask voxels are thresholded
/// at 0.5.
pub fn read_volume_with_mask(path: impl AsRef<Path>, mask_path: Option<&Path>) -> Result<MetricVolume, DataError> {
    let path = path.as_ref();
    let (dims, values) = decode(path)?;
    let mask = match mask_path {
        Some(mp) => {
            let (mdims, mvalues) = decode(mp)?;
            if mdims != dims {
                return Err(DataError::InvalidVolume(format!(
                    "{}: mask dims {mdims:?} differ from volume dims {dims:?}",
                    mp.display()
                )));
            }
            mvalues.iter().map(|&m| m >= 0.5).collect()
        }
        None => vec![true; values.len()],
    };
    MetricVolume::new(dims, values, mask)
}
