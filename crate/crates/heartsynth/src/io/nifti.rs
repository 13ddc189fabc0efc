//! Minimal NIfTI-1 reader/writer for `.nii` / `.nii.gz` volumes.
//!
//! Covers exactly what the dataset layout needs: single-file NIfTI-1
//! (`n+1` magic), float32/float64/int16/uint8 payloads, spacing in
//! `pixdim`, optional scale slope/intercept on read. Arrays are exchanged
//! as `[depth, row, col]` with the NIfTI x axis fastest.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;
use thiserror::Error;

use crate::volume::Spacing;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a NIfTI-1 file: {0}")]
    BadMagic(String),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("expected a 3D volume, got dim[0] = {0}")]
    NotThreeDimensional(i16),
    #[error("payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> NiftiError {
    NiftiError::Io { path: path.display().to_string(), source }
}

/// Reads a 3D volume; returns the raw values (slope/intercept applied) and
/// the voxel spacing as `[slice, row, col]` mm.
pub fn read_volume(path: &Path) -> Result<(Array3<f32>, Spacing), NiftiError> {
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated { expected: HEADER_SIZE, got: bytes.len() });
    }
    let magic = &bytes[344..348];
    if !(magic.starts_with(b"n+1") || magic.starts_with(b"ni1")) {
        return Err(NiftiError::BadMagic(path.display().to_string()));
    }
    let ndim = LittleEndian::read_i16(&bytes[40..42]);
    if ndim != 3 {
        return Err(NiftiError::NotThreeDimensional(ndim));
    }
    let nx = LittleEndian::read_i16(&bytes[42..44]) as usize;
    let ny = LittleEndian::read_i16(&bytes[44..46]) as usize;
    let nz = LittleEndian::read_i16(&bytes[46..48]) as usize;
    let datatype = LittleEndian::read_i16(&bytes[70..72]);
    let dx = LittleEndian::read_f32(&bytes[80..84]) as f64;
    let dy = LittleEndian::read_f32(&bytes[84..88]) as f64;
    let dz = LittleEndian::read_f32(&bytes[88..92]) as f64;
    let vox_offset = LittleEndian::read_f32(&bytes[108..112]) as usize;
    let slope = LittleEndian::read_f32(&bytes[112..116]);
    let inter = LittleEndian::read_f32(&bytes[116..120]);

    let n = nx * ny * nz;
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let offset = vox_offset.max(HEADER_SIZE);
    let expected = offset + n * elem;
    if bytes.len() < expected {
        return Err(NiftiError::Truncated { expected, got: bytes.len() });
    }
    let payload = &bytes[offset..offset + n * elem];
    let mut values = vec![0.0f32; n];
    match datatype {
        DT_UINT8 => {
            for (i, &b) in payload.iter().enumerate() {
                values[i] = b as f32;
            }
        }
        DT_INT16 => {
            for i in 0..n {
                values[i] = LittleEndian::read_i16(&payload[2 * i..2 * i + 2]) as f32;
            }
        }
        DT_FLOAT32 => LittleEndian::read_f32_into(payload, &mut values),
        DT_FLOAT64 => {
            for i in 0..n {
                values[i] = LittleEndian::read_f64(&payload[8 * i..8 * i + 8]) as f32;
            }
        }
        _ => unreachable!(),
    }
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    // NIfTI stores x fastest; [nz, ny, nx] row-major has the same linear order.
    let data = Array3::from_shape_vec((nz, ny, nx), values).expect("shape covers payload");
    Ok((data, [dz, dy, dx]))
}

/// Writes a float32 volume. A `.gz` suffix selects gzip compression.
pub fn write_volume(path: &Path, data: &Array3<f32>, spacing: Spacing) -> Result<(), NiftiError> {
    let (d, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    let mut bytes = vec![0u8; VOX_OFFSET + d * h * w * 4];
    encode_header(&mut bytes, [d, h, w], spacing, DT_FLOAT32, 32);
    let flat: Vec<f32> = data.iter().copied().collect();
    LittleEndian::write_f32_into(&flat, &mut bytes[VOX_OFFSET..]);
    write_maybe_gz(path, &bytes)
}

/// Writes a label volume as uint8.
pub fn write_labels(path: &Path, labels: &Array3<u8>) -> Result<(), NiftiError> {
    write_labels_with_spacing(path, labels, [1.0, 1.0, 1.0])
}

pub fn write_labels_with_spacing(
    path: &Path,
    labels: &Array3<u8>,
    spacing: Spacing,
) -> Result<(), NiftiError> {
    let (d, h, w) = (labels.shape()[0], labels.shape()[1], labels.shape()[2]);
    let mut bytes = vec![0u8; VOX_OFFSET + d * h * w];
    encode_header(&mut bytes, [d, h, w], spacing, DT_UINT8, 8);
    for (i, &l) in labels.iter().enumerate() {
        bytes[VOX_OFFSET + i] = l;
    }
    write_maybe_gz(path, &bytes)
}

/// Reads a uint8 label volume (rounds if stored as floats).
pub fn read_labels(path: &Path) -> Result<Array3<u8>, NiftiError> {
    let (data, _) = read_volume(path)?;
    Ok(data.mapv(|v| v.round().clamp(0.0, 255.0) as u8))
}

fn encode_header(bytes: &mut [u8], dims: [usize; 3], spacing: Spacing, datatype: i16, bitpix: i16) {
    LittleEndian::write_i32(&mut bytes[0..4], 348);
    LittleEndian::write_i16(&mut bytes[40..42], 3);
    LittleEndian::write_i16(&mut bytes[42..44], dims[2] as i16); // nx
    LittleEndian::write_i16(&mut bytes[44..46], dims[1] as i16); // ny
    LittleEndian::write_i16(&mut bytes[46..48], dims[0] as i16); // nz
    for k in 48..56 {
        bytes[k] = 0;
    }
    LittleEndian::write_i16(&mut bytes[48..50], 1);
    LittleEndian::write_i16(&mut bytes[50..52], 1);
    LittleEndian::write_i16(&mut bytes[52..54], 1);
    LittleEndian::write_i16(&mut bytes[54..56], 1);
    LittleEndian::write_i16(&mut bytes[70..72], datatype);
    LittleEndian::write_i16(&mut bytes[72..74], bitpix);
    LittleEndian::write_f32(&mut bytes[76..80], 1.0);
    LittleEndian::write_f32(&mut bytes[80..84], spacing[2] as f32); // dx
    LittleEndian::write_f32(&mut bytes[84..88], spacing[1] as f32); // dy
    LittleEndian::write_f32(&mut bytes[88..92], spacing[0] as f32); // dz
    LittleEndian::write_f32(&mut bytes[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut bytes[112..116], 1.0); // scl_slope
    LittleEndian::write_f32(&mut bytes[116..120], 0.0); // scl_inter
    bytes[123] = 2 | 16; // xyzt_units: mm + seconds
    LittleEndian::write_i16(&mut bytes[252..254], 0); // qform
    LittleEndian::write_i16(&mut bytes[254..256], 1); // sform: scaled identity
    LittleEndian::write_f32(&mut bytes[280..284], spacing[2] as f32);
    LittleEndian::write_f32(&mut bytes[300..304], spacing[1] as f32);
    LittleEndian::write_f32(&mut bytes[320..324], spacing[0] as f32);
    bytes[344..348].copy_from_slice(b"n+1\0");
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, NiftiError> {
    let mut f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut head = [0u8; 2];
    use std::io::Seek;
    let n = f.read(&mut head).map_err(|e| io_err(path, e))?;
    f.seek(std::io::SeekFrom::Start(0)).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    if n == 2 && head == [0x1f, 0x8b] {
        GzDecoder::new(f).read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    } else {
        f.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    }
    Ok(bytes)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<(), NiftiError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let gz = path.extension().map(|e| e == "gz").unwrap_or(false);
    if gz {
        let mut enc = GzEncoder::new(f, Compression::default());
        enc.write_all(bytes).map_err(|e| io_err(path, e))?;
        enc.finish().map_err(|e| io_err(path, e))?;
    } else {
        let mut f = f;
        f.write_all(bytes).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
