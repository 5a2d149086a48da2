//! On-disk sequence format. See `docs/sequence-format.md`.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, PointFrame, Pose2};
use crate::model::ModelConfig;
use crate::synth::{ScenarioClass, SeqFrame, Sequence};

pub const FRAME_MAGIC: &[u8; 4] = b"FTF1";
pub const FORMAT_NAME: &str = "flowtrack-sequence";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub format: String,
    pub version: u32,
    pub id: String,
    pub class: ScenarioClass,
    pub seed: u64,
    pub frames: usize,
    /// `(w, l, h)` of the tracked object, meters.
    pub target_size: [f64; 3],
    pub grid_hint: GridHint,
}

/// Suggested search grid for consumers that do not bring their own.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHint {
    pub cells: usize,
    pub cell_size: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl GridHint {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        GridHint {
            cells: cfg.grid_cells,
            cell_size: cfg.cell_size,
            z_min: cfg.z_range.0,
            z_max: cfg.z_range.1,
        }
    }
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.bin"))
}

/// Encode one frame record.
pub fn encode_frame(f: &SeqFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 + 80 + 8 + 12 * f.frame.points.len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&f.frame.timestamp.to_le_bytes());
    let p = f.frame.ego_pose;
    let b = f.gt_box;
    for v in [p.x, p.y, p.yaw] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in b.center.iter().chain(&b.size).chain(std::iter::once(&b.yaw)) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(f.target_points as u32).to_le_bytes());
    out.extend_from_slice(&(f.frame.points.len() as u32).to_le_bytes());
    for q in &f.frame.points {
        for v in q {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let s = self.buf.get(self.pos..end).ok_or_else(|| {
            Error::Format(format!("{}: truncated at byte {} (length {})", self.what, self.pos, self.buf.len()))
        })?;
        self.pos = end;
        Ok(s.try_into().expect("slice length"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
}

/// Decode one frame record; `what` names the source in error messages.
pub fn decode_frame(buf: &[u8], what: &str) -> Result<SeqFrame> {
    let mut c = Cursor { buf, pos: 0, what };
    if &c.take::<4>()? != FRAME_MAGIC {
        return Err(Error::Format(format!("{what}: bad magic, expected FTF1")));
    }
    let timestamp = u64::from_le_bytes(c.take()?);
    let ego_pose = Pose2 {
        x: c.f64()?,
        y: c.f64()?,
        yaw: c.f64()?,
    };
    let mut b = [0.0; 7];
    for v in &mut b {
        *v = c.f64()?;
    }
    let target_points = c.u32()? as usize;
    let n = c.u32()? as usize;
    if target_points > n {
        return Err(Error::Format(format!("{what}: {target_points} target points but only {n} points")));
    }
    if buf.len() - c.pos != 12 * n {
        return Err(Error::Format(format!(
            "{what}: expected {} point bytes, found {}",
            12 * n,
            buf.len() - c.pos
        )));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut q = [0.0; 3];
        for v in &mut q {
            *v = f32::from_le_bytes(c.take()?) as f64;
        }
        points.push(q);
    }
    Ok(SeqFrame {
        frame: PointFrame {
            points,
            ego_pose,
            timestamp,
        },
        gt_box: Box3D {
            center: [b[0], b[1], b[2]],
            size: [b[3], b[4], b[5]],
            yaw: b[6],
        },
        target_points,
    })
}

pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = SequenceMeta {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        id: seq.id.clone(),
        class: seq.class,
        seed: seq.seed,
        frames: seq.frames.len(),
        target_size: seq.frames.first().map_or([0.0; 3], |f| f.gt_box.size),
        grid_hint: GridHint::from_model(&ModelConfig::desk()),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("meta.json"), json + "\n")?;
    for (t, f) in seq.frames.iter().enumerate() {
        let mut w = BufWriter::new(fs::File::create(frame_path(dir, t))?);
        w.write_all(&encode_frame(f))?;
        w.flush()?;
    }
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path)?;
    let meta: SequenceMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    if meta.format != FORMAT_NAME || meta.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format {} v{}",
            meta_path.display(),
            meta.format,
            meta.version
        )));
    }
    let mut frames = Vec::with_capacity(meta.frames);
    for t in 0..meta.frames {
        let path = frame_path(dir, t);
        let mut buf = Vec::new();
        fs::File::open(&path)?.read_to_end(&mut buf)?;
        frames.push(decode_frame(&buf, &path.display().to_string())?);
    }
    Ok(Sequence {
        id: meta.id,
        class: meta.class,
        seed: meta.seed,
        frames,
    })
}

/// Write each sequence into `out/<id>/`.
pub fn save_dataset(seqs: &[Sequence], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    for s in seqs {
        save_sequence(s, &out.join(&s.id))?;
    }
    Ok(())
}

/// Load every sequence directory under `dir`, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format(format!("{}: no sequences found", dir.display())));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sequence, ScenarioConfig};

    #[test]
    fn frame_round_trip() {
        let seq = generate_sequence(&ScenarioConfig::sample(ScenarioClass::Turning, 9, 3)).unwrap();
        for f in &seq.frames {
            let back = decode_frame(&encode_frame(f), "mem").unwrap();
            assert_eq!(&back, f);
        }
    }

    #[test]
    fn truncated_frame_is_rejected() {
        let seq = generate_sequence(&ScenarioConfig::clean(1, 1)).unwrap();
        let bytes = encode_frame(&seq.frames[0]);
        let err = decode_frame(&bytes[..bytes.len() - 5], "cut").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_frame(&bad, "magic").is_err());
    }
}
