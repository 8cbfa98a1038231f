//! Reading and writing volumes, curves, frame timing and cohort tables.
//!
//! Volumes come in two formats:
//!
//! * the native pair `<name>.f32raw` (little-endian `f32`, x fastest) plus
//!   `<name>.json` holding geometry, value kind, optional frame timing and a
//!   SHA-256 digest of the payload;
//! * NIfTI-1 single files (`.nii`, `.nii.gz`). Orientation fields are not
//!   interpreted; they can be copied verbatim from an input file to outputs
//!   with [`NiftiOrientation`].

use std::fs::{self, File};
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Frame, FrameGrid, Tac};
use crate::stats::CohortRecord;
use crate::volume::{Dims, LabelVolume, ScalarVolume, Spacing};

pub const RAW_PAYLOAD_EXT: &str = "f32raw";
pub const RAW_HEADER_EXT: &str = "json";

/// `sha256:<hex>` of a byte string.
pub fn sha256_bytes(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

/// `sha256:<hex>` of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|e| Error::io(path, e))?;
    Ok(format!("sha256:{}", hex::encode(hasher.finalize())))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Scalar,
    Label,
}

/// Sidecar header of the native raw format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    #[serde(default)]
    pub origin_mm: Option<[f64; 3]>,
    pub kind: VolumeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<Frame>,
    pub digest: String,
}

/// A volume as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
}

impl Volume {
    pub fn dims(&self) -> Dims {
        match self {
            Volume::Scalar(v) => v.dims(),
            Volume::Label(v) => v.dims(),
        }
    }

    pub fn into_scalar(self) -> ScalarVolume {
        match self {
            Volume::Scalar(v) => v,
            Volume::Label(v) => v.to_scalar(),
        }
    }

    pub fn into_label(self) -> Result<LabelVolume> {
        match self {
            Volume::Scalar(v) => LabelVolume::from_scalar(&v),
            Volume::Label(v) => Ok(v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Raw,
    Nifti,
    NiftiGz,
}

fn format_of(path: &Path) -> Format {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".nii.gz") {
        Format::NiftiGz
    } else if name.ends_with(".nii") {
        Format::Nifti
    } else {
        Format::Raw
    }
}

/// `(header, payload)` paths of a raw volume given either file or the bare stem.
pub fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some(RAW_PAYLOAD_EXT) | Some(RAW_HEADER_EXT) => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with(RAW_HEADER_EXT), with(RAW_PAYLOAD_EXT))
}

/// Reads a raw or NIfTI volume. NIfTI files with an integer data type and
/// no intensity scaling are returned as label volumes when every value fits.
pub fn read_volume(path: &Path) -> Result<Volume> {
    match format_of(path) {
        Format::Raw => read_raw(path).map(|(v, _)| v),
        Format::Nifti | Format::NiftiGz => {
            let mut frames = read_nifti(path)?;
            if frames.frames.len() != 1 {
                return Err(Error::format(
                    path,
                    format!("expected a 3-D volume, found {} frames", frames.frames.len()),
                ));
            }
            let data = frames.frames.pop().unwrap();
            let scalar = ScalarVolume::new(frames.dims, frames.spacing, data)
                .map_err(|e| Error::format(path, e.to_string()))?
                .with_origin(frames.origin);
            if frames.integral {
                if let Ok(labels) = LabelVolume::from_scalar(&scalar) {
                    return Ok(Volume::Label(labels));
                }
            }
            Ok(Volume::Scalar(scalar))
        }
    }
}

pub fn read_scalar_volume(path: &Path) -> Result<ScalarVolume> {
    read_volume(path).map(Volume::into_scalar)
}

pub fn read_label_volume(path: &Path) -> Result<LabelVolume> {
    read_volume(path)?
        .into_label()
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a scalar volume; the format follows the file extension.
pub fn write_scalar_volume(path: &Path, volume: &ScalarVolume) -> Result<()> {
    write_scalar_volume_with(path, volume, None, None)
}

/// As [`write_scalar_volume`], optionally recording frame timing (raw
/// format) or copying orientation fields (NIfTI).
pub fn write_scalar_volume_with(
    path: &Path,
    volume: &ScalarVolume,
    frame: Option<Frame>,
    orientation: Option<&NiftiOrientation>,
) -> Result<()> {
    match format_of(path) {
        Format::Raw => write_raw(
            path,
            volume.dims(),
            volume.spacing(),
            volume.origin(),
            VolumeKind::Scalar,
            frame,
            volume.data(),
        ),
        f => write_nifti(
            path,
            volume.dims(),
            volume.spacing(),
            volume.origin(),
            NiftiPayload::F32(volume.data()),
            orientation,
            f == Format::NiftiGz,
        ),
    }
}

pub fn write_label_volume(path: &Path, volume: &LabelVolume) -> Result<()> {
    write_label_volume_with(path, volume, None)
}

pub fn write_label_volume_with(
    path: &Path,
    volume: &LabelVolume,
    orientation: Option<&NiftiOrientation>,
) -> Result<()> {
    match format_of(path) {
        Format::Raw => {
            let data: Vec<f32> = volume.labels().iter().map(|&l| l as f32).collect();
            write_raw(
                path,
                volume.dims(),
                volume.spacing(),
                None,
                VolumeKind::Label,
                None,
                &data,
            )
        }
        f => write_nifti(
            path,
            volume.dims(),
            volume.spacing(),
            None,
            NiftiPayload::U16(volume.labels()),
            orientation,
            f == Format::NiftiGz,
        ),
    }
}

// ---------------------------------------------------------------- raw format

fn write_raw(
    path: &Path,
    dims: Dims,
    spacing: Spacing,
    origin: Option<[f64; 3]>,
    kind: VolumeKind,
    frame: Option<Frame>,
    data: &[f32],
) -> Result<()> {
    let (header_path, payload_path) = raw_paths(path);
    let mut payload = Vec::with_capacity(data.len() * 4);
    for &v in data {
        payload.write_f32::<LittleEndian>(v).expect("write to Vec");
    }
    let header = VolumeHeader {
        dims,
        spacing_mm: spacing,
        origin_mm: origin,
        kind,
        frame,
        digest: sha256_bytes(&payload),
    };
    fs::write(&payload_path, &payload).map_err(|e| Error::io(&payload_path, e))?;
    write_json(&header_path, &header)
}

/// Reads a raw volume and its header.
pub fn read_raw(path: &Path) -> Result<(Volume, VolumeHeader)> {
    let (header_path, payload_path) = raw_paths(path);
    let header: VolumeHeader = read_json(&header_path)?;
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let n: usize = header.dims.iter().product();
    if payload.len() != n * 4 {
        return Err(Error::format(
            &payload_path,
            format!(
                "payload has {} bytes, dims {:?} need {}",
                payload.len(),
                header.dims,
                n * 4
            ),
        ));
    }
    let digest = sha256_bytes(&payload);
    if digest != header.digest {
        return Err(Error::format(
            &payload_path,
            format!("digest {digest} does not match header {}", header.digest),
        ));
    }
    let mut data = vec![0f32; n];
    LittleEndian::read_f32_into(&payload, &mut data);
    let bad = |e: Error| Error::format(&header_path, e.to_string());
    let scalar = ScalarVolume::new(header.dims, header.spacing_mm, data)
        .map_err(bad)?
        .with_origin(header.origin_mm);
    let volume = match header.kind {
        VolumeKind::Scalar => Volume::Scalar(scalar),
        VolumeKind::Label => Volume::Label(LabelVolume::from_scalar(&scalar).map_err(bad)?),
    };
    Ok((volume, header))
}

// -------------------------------------------------------------------- NIfTI

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;
const ORIENTATION_RANGE: std::ops::Range<usize> = 252..344;

/// The NIfTI-1 qform/sform block (bytes 252..344), kept uninterpreted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NiftiOrientation {
    bytes: Vec<u8>,
    big_endian: bool,
}

impl NiftiOrientation {
    /// Bytes in little-endian order, ready to be written back.
    fn to_little_endian(&self) -> Vec<u8> {
        if !self.big_endian {
            return self.bytes.clone();
        }
        // two i16 codes, then 22 f32 fields, then the 16-byte intent name
        let mut out = self.bytes.clone();
        for chunk in out[..4].chunks_mut(2) {
            chunk.reverse();
        }
        for chunk in out[4..76].chunks_mut(4) {
            chunk.reverse();
        }
        out
    }
}

/// Orientation fields of a NIfTI file, or `None` for other formats.
pub fn read_nifti_orientation(path: &Path) -> Result<Option<NiftiOrientation>> {
    if format_of(path) == Format::Raw {
        return Ok(None);
    }
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::format(path, "file shorter than a NIfTI header"));
    }
    let big_endian = nifti_endianness(path, &bytes)?;
    Ok(Some(NiftiOrientation {
        bytes: bytes[ORIENTATION_RANGE].to_vec(),
        big_endian,
    }))
}

/// Frames of a 3-D or 4-D NIfTI image.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub dims: Dims,
    pub spacing: Spacing,
    pub origin: Option<[f64; 3]>,
    pub frames: Vec<Vec<f32>>,
    /// Integer storage without intensity scaling.
    pub integral: bool,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn nifti_endianness(path: &Path, bytes: &[u8]) -> Result<bool> {
    if LittleEndian::read_i32(&bytes[0..4]) == NIFTI_HEADER_LEN as i32 {
        Ok(false)
    } else if BigEndian::read_i32(&bytes[0..4]) == NIFTI_HEADER_LEN as i32 {
        Ok(true)
    } else {
        Err(Error::format(path, "sizeof_hdr is not 348"))
    }
}

/// Reads a NIfTI-1 file (`.nii` or gzip-compressed `.nii.gz`).
pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::format(path, "file shorter than a NIfTI header"));
    }
    if nifti_endianness(path, &bytes)? {
        parse_nifti::<BigEndian>(path, &bytes)
    } else {
        parse_nifti::<LittleEndian>(path, &bytes)
    }
}

fn parse_nifti<B: ByteOrder>(path: &Path, bytes: &[u8]) -> Result<NiftiImage> {
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::format(path, "missing n+1 magic (only single-file NIfTI-1 is supported)"));
    }
    let mut dim = [0i16; 8];
    B::read_i16_into(&bytes[40..56], &mut dim);
    let ndim = dim[0];
    if !(1..=4).contains(&ndim) {
        return Err(Error::format(path, format!("unsupported dimensionality {ndim}")));
    }
    let size = |k: usize| -> usize {
        if k as i16 <= ndim {
            dim[k].max(1) as usize
        } else {
            1
        }
    };
    if (1..=ndim as usize).any(|k| dim[k] < 1) {
        return Err(Error::format(path, format!("invalid dims {:?}", &dim[1..=ndim as usize])));
    }
    let dims = [size(1), size(2), size(3)];
    let nt = size(4);
    let datatype = B::read_i16(&bytes[70..72]);
    let bitpix = B::read_i16(&bytes[72..74]);
    let mut pixdim = [0f32; 8];
    B::read_f32_into(&bytes[76..108], &mut pixdim);
    let vox_offset = B::read_f32(&bytes[108..112]);
    let slope = B::read_f32(&bytes[112..116]);
    let inter = B::read_f32(&bytes[116..120]);
    let qform_code = B::read_i16(&bytes[252..254]);
    let sform_code = B::read_i16(&bytes[254..256]);

    let (width, integral) = match datatype {
        2 | 256 => (1, true),
        4 | 512 => (2, true),
        8 | 768 => (4, true),
        16 => (4, false),
        64 => (8, false),
        other => return Err(Error::format(path, format!("unsupported NIfTI datatype {other}"))),
    };
    if bitpix as usize != width * 8 {
        return Err(Error::format(path, format!("bitpix {bitpix} does not match datatype {datatype}")));
    }
    let spacing = [
        f64::from(pixdim[1]).abs(),
        f64::from(pixdim[2]).abs(),
        f64::from(pixdim[3]).abs(),
    ];
    let spacing = spacing.map(|s| if s > 0.0 { s } else { 1.0 });
    let origin = if qform_code > 0 {
        let mut q = [0f32; 3];
        B::read_f32_into(&bytes[268..280], &mut q);
        Some(q.map(f64::from))
    } else if sform_code > 0 {
        Some([
            f64::from(B::read_f32(&bytes[292..296])),
            f64::from(B::read_f32(&bytes[308..312])),
            f64::from(B::read_f32(&bytes[324..328])),
        ])
    } else {
        None
    };

    let offset = vox_offset.max(NIFTI_HEADER_LEN as f32) as usize;
    let per_frame: usize = dims.iter().product();
    let needed = per_frame * nt * width;
    let available = bytes.len().saturating_sub(offset);
    if available != needed {
        return Err(Error::format(
            path,
            format!(
                "payload has {available} bytes, dims {dims:?} x {nt} frame(s) of datatype {datatype} need {needed}"
            ),
        ));
    }
    let scaled = slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    let mut cursor = Cursor::new(&bytes[offset..]);
    let mut read_value = || -> std::io::Result<f64> {
        Ok(match datatype {
            2 => f64::from(cursor.read_u8()?),
            256 => f64::from(cursor.read_i8()?),
            4 => f64::from(cursor.read_i16::<B>()?),
            512 => f64::from(cursor.read_u16::<B>()?),
            8 => f64::from(cursor.read_i32::<B>()?),
            768 => f64::from(cursor.read_u32::<B>()?),
            16 => f64::from(cursor.read_f32::<B>()?),
            _ => cursor.read_f64::<B>()?,
        })
    };
    let mut frames = Vec::with_capacity(nt);
    for _ in 0..nt {
        let mut frame = Vec::with_capacity(per_frame);
        for _ in 0..per_frame {
            let mut v = read_value().map_err(|e| Error::io(path, e))?;
            if scaled {
                v = v * f64::from(slope) + f64::from(inter);
            }
            frame.push(v as f32);
        }
        frames.push(frame);
    }
    Ok(NiftiImage {
        dims,
        spacing,
        origin,
        frames,
        integral: integral && !scaled,
    })
}

enum NiftiPayload<'a> {
    F32(&'a [f32]),
    U16(&'a [u16]),
}

fn write_nifti(
    path: &Path,
    dims: Dims,
    spacing: Spacing,
    origin: Option<[f64; 3]>,
    payload: NiftiPayload<'_>,
    orientation: Option<&NiftiOrientation>,
    gzip: bool,
) -> Result<()> {
    let too_big = dims.iter().find(|&&d| d > i16::MAX as usize);
    if let Some(d) = too_big {
        return Err(Error::format(path, format!("dimension {d} exceeds the NIfTI-1 limit")));
    }
    let (datatype, bitpix): (i16, i16) = match payload {
        NiftiPayload::F32(_) => (16, 32),
        NiftiPayload::U16(_) => (512, 16),
    };
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], NIFTI_HEADER_LEN as i32);
    h[38] = b'r'; // regular
    let dim = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    LittleEndian::write_i16_into(&dim, &mut h[40..56]);
    LittleEndian::write_i16(&mut h[70..72], datatype);
    LittleEndian::write_i16(&mut h[72..74], bitpix);
    let pixdim = [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 0.0, 0.0, 0.0, 0.0];
    LittleEndian::write_f32_into(&pixdim, &mut h[76..108]);
    LittleEndian::write_f32(&mut h[108..112], NIFTI_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    h[123] = 2; // xyzt_units: mm
    match orientation {
        Some(o) => h[ORIENTATION_RANGE].copy_from_slice(&o.to_little_endian()),
        None => {
            if let Some(origin) = origin {
                LittleEndian::write_i16(&mut h[252..254], 1);
                let q = origin.map(|v| v as f32);
                LittleEndian::write_f32_into(&q, &mut h[268..280]);
            }
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let mut bytes = h;
    match payload {
        NiftiPayload::F32(data) => {
            for &v in data {
                bytes.write_f32::<LittleEndian>(v).expect("write to Vec");
            }
        }
        NiftiPayload::U16(data) => {
            for &v in data {
                bytes.write_u16::<LittleEndian>(v).expect("write to Vec");
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let result = if gzip {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut file = file;
        file.write_all(&bytes)
    };
    result.map_err(|e| Error::io(path, e))
}

// ------------------------------------------------------------ dynamic series

/// Reads frame timing `{"frames": [{"start_s", "duration_s"}, ...]}`.
pub fn read_frame_timing(path: &Path) -> Result<FrameGrid> {
    read_json(path)
}

pub fn write_frame_timing(path: &Path, grid: &FrameGrid) -> Result<()> {
    write_json(path, grid)
}

fn is_volume_file(path: &Path) -> bool {
    match format_of(path) {
        Format::Nifti | Format::NiftiGz => true,
        Format::Raw => {
            path.extension().and_then(|e| e.to_str()) == Some(RAW_HEADER_EXT)
                && raw_paths(path).1.is_file()
        }
    }
}

/// Reads a dynamic series from a directory holding one volume per frame
/// (raw pairs or NIfTI files, ordered by file name) or a single 4-D NIfTI.
///
/// Timing comes from `timing` when given, otherwise from `timing.json` in
/// the directory, otherwise from the `frame` fields of raw headers.
pub fn read_dynamic_series(dir: &Path, timing: Option<&Path>) -> Result<(Vec<ScalarVolume>, FrameGrid)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_volume_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "no volume files found"));
    }

    let mut frames = Vec::new();
    let mut header_frames = Vec::new();
    if files.len() == 1 && format_of(&files[0]) != Format::Raw {
        let img = read_nifti(&files[0])?;
        for data in img.frames {
            frames.push(ScalarVolume::new(img.dims, img.spacing, data)?.with_origin(img.origin));
        }
    } else {
        for f in &files {
            if format_of(f) == Format::Raw {
                let (v, h) = read_raw(f)?;
                header_frames.push(h.frame);
                frames.push(v.into_scalar());
            } else {
                header_frames.push(None);
                frames.push(read_scalar_volume(f)?);
            }
        }
    }

    let default_timing = dir.join("timing.json");
    let grid = match timing {
        Some(t) => read_frame_timing(t)?,
        None if default_timing.is_file() => read_frame_timing(&default_timing)?,
        None => {
            let from_headers: Option<Vec<Frame>> = header_frames.iter().copied().collect();
            match from_headers {
                Some(f) if !f.is_empty() => FrameGrid::new(f)?,
                _ => {
                    return Err(Error::format(
                        dir,
                        "no frame timing: pass a timing file or store frames in raw headers",
                    ))
                }
            }
        }
    };
    if grid.len() != frames.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            actual: frames.len(),
            context: "volume files vs timing frames",
        });
    }
    let (d0, s0) = (frames[0].dims(), frames[0].spacing());
    if let Some(i) = frames.iter().position(|f| f.dims() != d0 || f.spacing() != s0) {
        return Err(Error::DimensionMismatch(format!(
            "frame {i} geometry differs from frame 0 in {}",
            dir.display()
        )));
    }
    Ok((frames, grid))
}

/// Writes one raw volume per frame (`frame_000.f32raw`, ...) plus `timing.json`.
pub fn write_dynamic_series(dir: &Path, frames: &[ScalarVolume], grid: &FrameGrid) -> Result<()> {
    if frames.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            actual: frames.len(),
            context: "frames vs timing",
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (v, f)) in frames.iter().zip(grid.frames()).enumerate() {
        write_scalar_volume_with(&dir.join(format!("frame_{i:03}")), v, Some(*f), None)?;
    }
    write_frame_timing(&dir.join("timing.json"), grid)
}

// --------------------------------------------------------------------- CSV

/// Column names of a TAC CSV file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TacColumns {
    pub start: String,
    pub duration: String,
    pub value: String,
}

impl Default for TacColumns {
    fn default() -> Self {
        Self {
            start: "frame_start_s".into(),
            duration: "frame_duration_s".into(),
            value: "value_kbq_ml".into(),
        }
    }
}

fn column(path: &Path, headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::format(path, format!("missing column {name}")))
}

fn parse_cell(path: &Path, record: &csv::StringRecord, idx: usize, row: usize) -> Result<f64> {
    let cell = record.get(idx).unwrap_or("").trim();
    cell.parse()
        .map_err(|_| Error::format(path, format!("row {}: cannot parse {cell:?} as a number", row + 1)))
}

/// Reads a TAC; negative values are accepted and mark the curve raw.
pub fn read_tac_csv(path: &Path, columns: &TacColumns) -> Result<Tac> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = reader.headers()?.clone();
    let (cs, cd, cv) = (
        column(path, &headers, &columns.start)?,
        column(path, &headers, &columns.duration)?,
        column(path, &headers, &columns.value)?,
    );
    let mut frames = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        frames.push(Frame {
            start_s: parse_cell(path, &record, cs, row)?,
            duration_s: parse_cell(path, &record, cd, row)?,
        });
        values.push(parse_cell(path, &record, cv, row)?);
    }
    let bad = |e: Error| Error::format(path, e.to_string());
    let grid = FrameGrid::new(frames).map_err(bad)?;
    Tac::from_values(grid, values).map_err(bad)
}

pub fn write_tac_csv(path: &Path, tac: &Tac, columns: &TacColumns) -> Result<()> {
    write_curves_csv(
        path,
        tac.grid(),
        &[(columns.value.as_str(), tac.values())],
        (&columns.start, &columns.duration),
    )
}

/// Writes several curves on one grid as columns next to the frame timing.
pub fn write_curves_csv(
    path: &Path,
    grid: &FrameGrid,
    curves: &[(&str, &[f64])],
    timing_columns: (&str, &str),
) -> Result<()> {
    if let Some((name, c)) = curves.iter().find(|(_, c)| c.len() != grid.len()) {
        return Err(Error::format(
            path,
            format!("curve {name} has {} values for {} frames", c.len(), grid.len()),
        ));
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut header = vec![timing_columns.0.to_string(), timing_columns.1.to_string()];
    header.extend(curves.iter().map(|(n, _)| n.to_string()));
    writer.write_record(&header)?;
    for (i, f) in grid.frames().iter().enumerate() {
        let mut row = vec![f.start_s.to_string(), f.duration_s.to_string()];
        row.extend(curves.iter().map(|(_, c)| c[i].to_string()));
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Reads `subject_id,organ,mse_baseline,mse_multi` rows.
pub fn read_cohort_csv(path: &Path) -> Result<Vec<CohortRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let records = reader
        .deserialize()
        .collect::<std::result::Result<Vec<CohortRecord>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(records)
}

pub fn write_cohort_csv(path: &Path, records: &[CohortRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
