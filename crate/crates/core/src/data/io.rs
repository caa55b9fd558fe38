//! On-disk ingestion: TIFF stacks, `.npy` arrays and the JSON manifest that
//! ties them to an acquisition name.
//!
//! Supported layouts:
//! * a multipage TIFF whose pages alternate channel 0 / channel 1;
//! * one file per channel (multipage TIFF or `.npy` of shape `(n, h, w)` or
//!   `(h, w)`), frames in matching order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};

use super::{ChannelFrameSet, SplitCounts};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default = "default_version")]
    pub version: u32,
    pub name: String,
    pub sources: Vec<SourceEntry>,
    /// Explicit per-split frame counts; when absent the fractions below apply.
    #[serde(default)]
    pub splits: Option<SplitCounts>,
    #[serde(default = "default_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
}

fn default_version() -> u32 {
    MANIFEST_VERSION
}

fn default_fraction() -> f64 {
    0.15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SourceEntry {
    /// Pages alternate channel 0 and channel 1.
    Interleaved { stack: PathBuf },
    /// One file per channel.
    PerChannel { c0: PathBuf, c1: PathBuf },
}

/// Loads a dataset from a manifest (`.json`), a directory holding
/// `manifest.json`, or a single interleaved TIFF stack.
pub fn load_dataset(path: &Path, clip_quantile: Option<f32>) -> Result<ChannelFrameSet> {
    let (manifest, base) = if path.is_dir() {
        let m = path.join("manifest.json");
        (read_manifest(&m)?, path.to_path_buf())
    } else if has_ext(path, &["json"]) {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (read_manifest(path)?, base)
    } else if has_ext(path, &["tif", "tiff"]) {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "stack".into());
        let m = DatasetManifest {
            version: MANIFEST_VERSION,
            name,
            sources: vec![SourceEntry::Interleaved {
                stack: path.file_name().map(PathBuf::from).unwrap_or_default(),
            }],
            splits: None,
            val_fraction: default_fraction(),
            test_fraction: default_fraction(),
        };
        (m, path.parent().map(Path::to_path_buf).unwrap_or_default())
    } else {
        return Err(Error::Format(format!(
            "{}: expected a manifest, a directory or a TIFF stack",
            path.display()
        )));
    };
    let mut fs = load_manifest(&manifest, &base)?;
    if let Some(q) = clip_quantile {
        fs.apply_clip(q)?;
    }
    Ok(fs)
}

/// Superimposed frames of one acquisition: `{"name": ..., "frames": [files]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionManifest {
    pub name: String,
    pub frames: Vec<PathBuf>,
}

/// Loads acquisition frames from a manifest (`.json`) or a single TIFF or
/// `.npy` stack. Returns the acquisition name and its frames.
pub fn load_acquisition(path: &Path) -> Result<(String, Vec<Image>)> {
    if has_ext(path, &["json"]) {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: AcquisitionManifest = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut frames = Vec::new();
        for f in &m.frames {
            frames.extend(read_frames(&base.join(f))?);
        }
        Ok((m.name, frames))
    } else {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "acquisition".into());
        Ok((name, read_frames(path)?))
    }
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "{}: manifest version {} is not supported",
            path.display(),
            m.version
        )));
    }
    Ok(m)
}

fn load_manifest(m: &DatasetManifest, base: &Path) -> Result<ChannelFrameSet> {
    if m.sources.is_empty() {
        return Err(Error::Empty(format!("manifest {} lists no sources", m.name)));
    }
    let mut c0 = Vec::new();
    let mut c1 = Vec::new();
    for src in &m.sources {
        match src {
            SourceEntry::Interleaved { stack } => {
                let path = base.join(stack);
                let pages = read_frames(&path)?;
                if pages.len() % 2 != 0 {
                    return Err(Error::Ingest {
                        frame: path.display().to_string(),
                        reason: format!(
                            "interleaved stack has {} pages, expected an even count",
                            pages.len()
                        ),
                    });
                }
                let mut it = pages.into_iter();
                while let (Some(a), Some(b)) = (it.next(), it.next()) {
                    c0.push(a);
                    c1.push(b);
                }
            }
            SourceEntry::PerChannel { c0: p0, c1: p1 } => {
                let (p0, p1) = (base.join(p0), base.join(p1));
                let a = read_frames(&p0)?;
                let b = read_frames(&p1)?;
                if a.len() != b.len() {
                    return Err(Error::Ingest {
                        frame: format!("{} / {}", p0.display(), p1.display()),
                        reason: format!("channel frame counts differ: {} vs {}", a.len(), b.len()),
                    });
                }
                c0.extend(a);
                c1.extend(b);
            }
        }
    }
    let splits = m
        .splits
        .unwrap_or_else(|| SplitCounts::from_fractions(c0.len(), m.val_fraction, m.test_fraction));
    ChannelFrameSet::new(m.name.clone(), c0, c1, splits)
}

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
        .unwrap_or(false)
}

fn read_frames(path: &Path) -> Result<Vec<Image>> {
    if has_ext(path, &["npy"]) {
        read_npy_stack(path)
    } else if has_ext(path, &["tif", "tiff"]) {
        read_tiff_stack(path)
    } else {
        Err(Error::Format(format!(
            "{}: unsupported array file (expected .tif, .tiff or .npy)",
            path.display()
        )))
    }
}

/// Reads every page of a grayscale TIFF as `f32`.
pub fn read_tiff_stack(path: &Path) -> Result<Vec<Image>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))?.with_limits(Limits::unlimited());
    let mut out = Vec::new();
    loop {
        let (w, h) = dec.dimensions()?;
        let page = out.len();
        let name = || format!("{} page {page}", path.display());
        let data: Vec<f32> = match dec.read_image()? {
            DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
            DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::F32(v) => v,
            DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
            _ => {
                return Err(Error::Ingest {
                    frame: name(),
                    reason: "unsupported sample type".into(),
                })
            }
        };
        let img = Image::new(h as usize, w as usize, data).map_err(|_| Error::Ingest {
            frame: name(),
            reason: "page is not single-channel".into(),
        })?;
        if !img.is_finite() {
            return Err(Error::Ingest {
                frame: name(),
                reason: "non-finite pixel".into(),
            });
        }
        out.push(img);
        if !dec.more_images() {
            break;
        }
        dec.next_image()?;
    }
    Ok(out)
}

/// Writes frames as a multipage `f32` grayscale TIFF.
pub fn write_tiff_stack(path: &Path, frames: &[Image]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file))?;
    for f in frames {
        enc.write_image::<colortype::Gray32Float>(f.width() as u32, f.height() as u32, f.data())?;
    }
    Ok(())
}

/// Writes the frame set as an interleaved stack plus `manifest.json` in `dir`.
pub fn save_dataset(fs: &ChannelFrameSet, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut pages = Vec::with_capacity(2 * fs.len());
    for (a, b) in fs.frames_c0().iter().zip(fs.frames_c1()) {
        pages.push(a.clone());
        pages.push(b.clone());
    }
    write_tiff_stack(&dir.join("frames.tif"), &pages)?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        name: fs.name.clone(),
        sources: vec![SourceEntry::Interleaved {
            stack: "frames.tif".into(),
        }],
        splits: Some(fs.splits()),
        val_fraction: default_fraction(),
        test_fraction: default_fraction(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Minimal reader for little-endian, C-ordered `.npy` arrays of rank 2 or 3.
pub fn read_npy_stack(path: &Path) -> Result<Vec<Image>> {
    let ingest = |reason: String| Error::Ingest {
        frame: path.display().to_string(),
        reason,
    };
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(ingest("missing .npy magic".into()));
    }
    let major = bytes[6];
    let (header_len, offset) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(ingest("truncated header".into()));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        v => return Err(ingest(format!("unsupported .npy version {v}"))),
    };
    let header = std::str::from_utf8(bytes.get(offset..offset + header_len).ok_or_else(|| {
        ingest("truncated header".into())
    })?)
    .map_err(|_| ingest("header is not utf-8".into()))?;
    let descr = npy_field(header, "descr").ok_or_else(|| ingest("no descr".into()))?;
    if npy_field(header, "fortran_order").map(|s| s.trim() == "True") == Some(true) {
        return Err(ingest("fortran-ordered arrays are not supported".into()));
    }
    let shape_src = npy_field(header, "shape").ok_or_else(|| ingest("no shape".into()))?;
    let shape: Vec<usize> = shape_src
        .trim_matches(|c| c == '(' || c == ')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| ingest(format!("bad shape {shape_src}")))?;
    let (n, h, w) = match shape.as_slice() {
        [h, w] => (1, *h, *w),
        [n, h, w] => (*n, *h, *w),
        _ => return Err(ingest(format!("expected rank 2 or 3, got shape {shape:?}"))),
    };
    let body = &bytes[offset + header_len..];
    let descr = descr.trim().trim_matches('\'').trim_matches('"');
    let values: Vec<f32> = match descr {
        "<f4" => le_chunks::<4>(body).map(f32::from_le_bytes).collect(),
        "<f8" => le_chunks::<8>(body).map(|b| f64::from_le_bytes(b) as f32).collect(),
        "<u2" => le_chunks::<2>(body).map(|b| u16::from_le_bytes(b) as f32).collect(),
        "|u1" | "<u1" => body.iter().map(|&b| b as f32).collect(),
        other => return Err(ingest(format!("unsupported dtype {other}"))),
    };
    if values.len() != n * h * w {
        return Err(ingest(format!(
            "expected {} values for shape {shape:?}, found {}",
            n * h * w,
            values.len()
        )));
    }
    let mut frames = Vec::with_capacity(n);
    for (i, chunk) in values.chunks_exact(h * w).enumerate() {
        if chunk.iter().any(|v| !v.is_finite()) {
            return Err(Error::Ingest {
                frame: format!("{} frame {i}", path.display()),
                reason: "non-finite pixel".into(),
            });
        }
        frames.push(Image::new(h, w, chunk.to_vec())?);
    }
    Ok(frames)
}

fn le_chunks<const N: usize>(body: &[u8]) -> impl Iterator<Item = [u8; N]> + '_ {
    body.chunks_exact(N)
        .map(|c| c.try_into().expect("exact chunk"))
}

/// Extracts the raw value text of `key` from a Python-dict style header.
fn npy_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let pat = format!("'{key}':");
    let start = header.find(&pat)? + pat.len();
    let rest = header[start..].trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else {
        rest.find(',').unwrap_or(rest.len())
    };
    Some(&rest[..end])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, SynthConfig};

    fn write_npy_f32(path: &Path, shape: &[usize], values: &[f32]) {
        let shape_txt = match shape {
            [h, w] => format!("({h}, {w})"),
            [n, h, w] => format!("({n}, {h}, {w})"),
            _ => unreachable!(),
        };
        let mut header =
            format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_txt}, }}");
        while (10 + header.len() + 1) % 64 != 0 {
            header.push(' ');
        }
        header.push('\n');
        let mut bytes = b"\x93NUMPY\x01\x00".to_vec();
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn save_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let fs = synthesize_dataset(&SynthConfig {
            frames_per_split: SplitCounts {
                train: 2,
                val: 1,
                test: 1,
            },
            ..SynthConfig::default()
        })
        .unwrap();
        save_dataset(&fs, dir.path()).unwrap();
        let back = load_dataset(dir.path(), None).unwrap();
        assert_eq!(back, fs);
    }

    #[test]
    fn npy_per_channel_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f32> = (0..2 * 3 * 4).map(|v| v as f32).collect();
        write_npy_f32(&dir.path().join("a.npy"), &[2, 3, 4], &vals);
        write_npy_f32(&dir.path().join("b.npy"), &[2, 3, 4], &vals);
        let manifest = r#"{"name": "acq1", "sources": [{"c0": "a.npy", "c1": "b.npy"}],
                           "splits": {"train": 1, "val": 0, "test": 1}}"#;
        std::fs::write(dir.path().join("m.json"), manifest).unwrap();
        let fs = load_dataset(&dir.path().join("m.json"), None).unwrap();
        assert_eq!(fs.name, "acq1");
        assert_eq!(fs.len(), 2);
        assert_eq!(fs.frame(1).0.get(0, 0), 12.0);
    }

    #[test]
    fn channel_count_mismatch_is_an_ingest_error() {
        let dir = tempfile::tempdir().unwrap();
        write_npy_f32(&dir.path().join("a.npy"), &[2, 2, 2], &[1.0; 8]);
        write_npy_f32(&dir.path().join("b.npy"), &[1, 2, 2], &[1.0; 4]);
        std::fs::write(
            dir.path().join("m.json"),
            r#"{"name": "x", "sources": [{"c0": "a.npy", "c1": "b.npy"}]}"#,
        )
        .unwrap();
        let err = load_dataset(&dir.path().join("m.json"), None).unwrap_err();
        assert!(matches!(err, Error::Ingest { .. }), "{err}");
    }

    #[test]
    fn nan_pixel_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let mut vals = vec![1.0f32; 8];
        vals[6] = f32::NAN;
        write_npy_f32(&dir.path().join("a.npy"), &[2, 2, 2], &vals);
        let err = read_npy_stack(&dir.path().join("a.npy")).unwrap_err();
        assert!(err.to_string().contains("frame 1"), "{err}");
    }

    #[test]
    fn unreadable_file() {
        let err = load_dataset(Path::new("/nonexistent/stack.tif"), None).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn clip_on_load_caps_at_train_quantile() {
        let dir = tempfile::tempdir().unwrap();
        let fs = synthesize_dataset(&SynthConfig::default()).unwrap();
        save_dataset(&fs, dir.path()).unwrap();
        let raw = load_dataset(dir.path(), None).unwrap();
        assert_eq!(raw, fs);
        let clipped = load_dataset(dir.path(), Some(0.995)).unwrap();
        let thr = clipped.clip_threshold().unwrap();
        let mut pooled: Vec<f32> = fs
            .split_indices(crate::data::Split::Train)
            .flat_map(|i| {
                let (a, b) = fs.frame(i);
                a.data().iter().chain(b.data()).copied().collect::<Vec<_>>()
            })
            .collect();
        pooled.sort_by(f32::total_cmp);
        let rank = (0.995 * pooled.len() as f64).ceil() as usize;
        assert_eq!(thr, pooled[rank - 1]);
        let max = clipped
            .frames_c0()
            .iter()
            .chain(clipped.frames_c1())
            .map(|f| f.min_max().1)
            .fold(f32::MIN, f32::max);
        assert_eq!(max, thr);
    }
}
