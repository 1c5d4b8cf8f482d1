//! On-disk dataset layout: a TOML manifest plus per-frame PNG/PFM/text files.
//!
//! Every file is recorded with its byte length, SHA-256 and a short digest
//! per 512-byte block, so damage can be located to a byte range.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SceneSpec;
use crate::error::{Error, Result};
use crate::imageio::{decode_pfm, decode_png_gray, decode_png_rgb, encode_pfm, encode_png_gray, encode_png_rgb, read_bytes, write_bytes};
use crate::semantics::ClassTable;
use crate::types::{Camera, DepthSample, FrameSample};

pub const MANIFEST_NAME: &str = "manifest.toml";
pub const FORMAT_VERSION: u32 = 1;
const BLOCK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub class_table: ClassTable,
    pub frames: Vec<FrameSample>,
}

impl Dataset {
    pub fn validate(&self) -> Vec<String> {
        let mut v = self.class_table.validate();
        for f in &self.frames {
            v.extend(f.validate(self.class_table.len()));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
    /// First 8 bytes (hex) of the SHA-256 of each 512-byte block.
    pub blocks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub index: usize,
    pub t: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub near: f64,
    pub far: f64,
    pub rgb: FileRecord,
    pub semantic: FileRecord,
    pub depth: FileRecord,
    pub lidar: FileRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Frame `i` has `t = i / time_denominator`.
    pub time_denominator: usize,
    pub classes: ClassTable,
    pub frames: Vec<FrameRecord>,
    pub spec: SceneSpec,
}

fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn record(dir: &Path, rel: String, bytes: &[u8]) -> Result<FileRecord> {
    write_bytes(&dir.join(&rel), bytes)?;
    Ok(FileRecord {
        path: rel,
        bytes: bytes.len() as u64,
        sha256: digest_hex(bytes),
        blocks: bytes.chunks(BLOCK).map(|b| hex::encode(&Sha256::digest(b)[..8])).collect(),
    })
}

/// Reads a file and checks it against its manifest record.
fn checked_read(dir: &Path, rec: &FileRecord) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(&rec.path);
    if !path.exists() {
        return Err(Error::format(&path, "file referenced by the manifest is missing"));
    }
    let bytes = read_bytes(&path)?;
    let declared = rec.bytes as usize;
    if bytes.len() < declared {
        return Err(Error::format(
            &path,
            format!("truncated: file ends at byte offset {}, manifest declares {declared} bytes", bytes.len()),
        ));
    }
    if bytes.len() > declared {
        return Err(Error::format(
            &path,
            format!("unexpected data after byte offset {declared} ({} bytes total)", bytes.len()),
        ));
    }
    if digest_hex(&bytes) != rec.sha256 {
        let bad = bytes
            .chunks(BLOCK)
            .zip(&rec.blocks)
            .position(|(b, want)| hex::encode(&Sha256::digest(b)[..8]) != *want);
        let msg = match bad {
            Some(i) => format!(
                "corrupt data between byte offsets {} and {}",
                i * BLOCK,
                ((i + 1) * BLOCK).min(bytes.len())
            ),
            None => "checksum mismatch".to_string(),
        };
        return Err(Error::format(&path, msg));
    }
    Ok((path, bytes))
}

fn lidar_text(samples: &[DepthSample]) -> String {
    let mut s = String::from("# u v depth\n");
    for d in samples {
        s.push_str(&format!("{} {} {}\n", d.u, d.v, d.depth));
    }
    s
}

fn parse_lidar(text: &str, path: &Path) -> Result<Vec<DepthSample>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(path, format!("line {}: expected `u v depth`", ln + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(DepthSample {
            u: f[0].parse().map_err(|_| bad())?,
            v: f[1].parse().map_err(|_| bad())?,
            depth: f[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Writes `data` under `dir` and returns the manifest path.
pub fn save(data: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(data.frames.len());
    for f in &data.frames {
        let (w, h) = (f.camera.width, f.camera.height);
        let c = &f.camera;
        let i = f.index;
        frames.push(FrameRecord {
            index: i,
            t: f.t,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: std::array::from_fn(|k| c.rotation[(k / 3, k % 3)]),
            translation: [c.translation.x, c.translation.y, c.translation.z],
            near: c.near,
            far: c.far,
            rgb: record(dir, format!("frames/rgb_{i:03}.png"), &encode_png_rgb(&f.image))?,
            semantic: record(dir, format!("frames/sem_{i:03}.png"), &encode_png_gray(w, h, &f.semantic))?,
            depth: record(dir, format!("frames/depth_{i:03}.pfm"), &encode_pfm(w, h, &f.dense_depth))?,
            lidar: record(dir, format!("frames/lidar_{i:03}.txt"), lidar_text(&f.depth).as_bytes())?,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: data.spec.seed,
        width: data.spec.width,
        height: data.spec.height,
        time_denominator: data.frames.len().saturating_sub(1).max(1),
        classes: data.class_table.clone(),
        frames,
        spec: data.spec.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::config(format!("manifest: {e}")))?;
    let path = dir.join(MANIFEST_NAME);
    write_bytes(&path, text.as_bytes())?;
    Ok(path)
}

/// Loads a dataset from its manifest (or from the directory holding it).
pub fn load(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(&manifest_path, format!("unsupported format version {}", m.format_version)));
    }
    let problems = m.classes.validate();
    if !problems.is_empty() {
        return Err(Error::format(&manifest_path, problems.join("; ")));
    }
    let mut frames = Vec::with_capacity(m.frames.len());
    for r in &m.frames {
        let (w, h) = (m.width, m.height);
        let (p, b) = checked_read(&dir, &r.rgb)?;
        let image = decode_png_rgb(&b, &p)?;
        if (image.width, image.height) != (w, h) {
            return Err(Error::format(&p, format!("image is {}x{}, manifest says {w}x{h}", image.width, image.height)));
        }
        let (p, b) = checked_read(&dir, &r.semantic)?;
        let (sw, sh, semantic) = decode_png_gray(&b, &p)?;
        if (sw, sh) != (w, h) {
            return Err(Error::format(&p, format!("semantic map is {sw}x{sh}, manifest says {w}x{h}")));
        }
        let (p, b) = checked_read(&dir, &r.depth)?;
        let (dw, dh, dense_depth) = decode_pfm(&b, &p)?;
        if (dw, dh) != (w, h) {
            return Err(Error::format(&p, format!("depth map is {dw}x{dh}, manifest says {w}x{h}")));
        }
        let (p, b) = checked_read(&dir, &r.lidar)?;
        let text = String::from_utf8(b).map_err(|_| Error::format(&p, "lidar file is not utf-8"))?;
        let depth = parse_lidar(&text, &p)?;
        let rotation = Matrix3::from_row_slice(&r.rotation);
        let camera = Camera {
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            rotation,
            translation: Vector3::from(r.translation),
            width: w,
            height: h,
            near: r.near,
            far: r.far,
        };
        let frame = FrameSample {
            index: r.index,
            image,
            semantic,
            depth,
            dense_depth,
            camera,
            t: r.t,
        };
        let problems = frame.validate(m.classes.len());
        if !problems.is_empty() {
            return Err(Error::format(&manifest_path, problems.join("; ")));
        }
        frames.push(frame);
    }
    Ok(Dataset {
        spec: m.spec,
        class_table: m.classes,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate, CameraSpec};

    fn small() -> Dataset {
        generate(&SceneSpec {
            frames: 4,
            width: 24,
            height: 24,
            camera: CameraSpec {
                fx: 18.0,
                ..Default::default()
            },
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let m = save(&d, dir.path()).unwrap();
        let back = load(&m).unwrap();
        assert_eq!(back, d);
        assert_eq!(load(dir.path()).unwrap(), d);
    }

    #[test]
    fn missing_frame_named() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save(&d, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("frames/sem_002.png")).unwrap();
        let msg = load(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("sem_002.png") && msg.contains("missing"), "{msg}");
    }

    #[test]
    fn truncated_and_corrupted_files_report_offsets() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save(&d, dir.path()).unwrap();
        let f = dir.path().join("frames/rgb_001.png");
        let bytes = std::fs::read(&f).unwrap();
        std::fs::write(&f, &bytes[..bytes.len() - 10]).unwrap();
        let msg = load(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("rgb_001.png") && msg.contains(&format!("offset {}", bytes.len() - 10)), "{msg}");

        for at in [0, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[at] ^= 0x40;
            std::fs::write(&f, &b).unwrap();
            let msg = load(dir.path()).unwrap_err().to_string();
            let start = at / BLOCK * BLOCK;
            assert!(msg.contains(&format!("byte offsets {start} and")), "{msg}");
        }
    }
}
