//! Dataset ingestion: WAV and PNM readers/writers, bilinear resizing and the
//! tab-delimited manifest format.
//!
//! Readers reject unsupported encodings instead of coercing them: WAV must be
//! linear PCM, 16-bit, mono, little-endian; PNM must be binary P5 or P6 with
//! maxval 255.
//!
//! Manifest format, tab-delimited with `#` comments:
//!
//! ```text
//! classes <TAB> name0 <TAB> name1 ...
//! face <TAB> id <TAB> path <TAB> subject
//! utterance <TAB> id <TAB> path <TAB> subject
//! speaking-frame <TAB> frame_id <TAB> timestamp <TAB> utterance_id
//!                <TAB> truth_face_id|- <TAB> face_id[,face_id...]
//! ```
//!
//! Paths are relative to the manifest's directory. Referential integrity and
//! class membership are validated at load time; duplicate frame ids are
//! accepted (a frame holds several candidate faces).

pub mod synth;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// WAV
// ---------------------------------------------------------------------------

/// Reads a RIFF/WAVE file holding linear PCM, 16-bit, mono, little-endian.
/// Samples are normalized by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::UnsupportedFormat(
            "missing RIFF/WAVE header".into(),
        ));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Parse("chunk overruns the file".into()))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Parse("fmt chunk too short".into()));
                }
                let b = &bytes[body_start..body_end];
                fmt = Some((
                    u16::from_le_bytes([b[0], b[1]]),
                    u16::from_le_bytes([b[2], b[3]]),
                    u32::from_le_bytes([b[4], b[5], b[6], b[7]]),
                    u16::from_le_bytes([b[14], b[15]]),
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }
    let (format_tag, channels, sample_rate, bits) =
        fmt.ok_or_else(|| Error::Parse("missing fmt chunk".into()))?;
    if format_tag != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "format tag {format_tag}, only PCM (1) is supported"
        )));
    }
    if channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{channels} channels, only mono is supported"
        )));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{bits} bits per sample, only 16 is supported"
        )));
    }
    let data = data.ok_or_else(|| Error::Parse("missing data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(Error::Parse("data chunk has an odd byte count".into()));
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Writes a waveform as PCM16 mono. Samples quantize by round(v * 32768)
/// clamped to the i16 range, so a write-read round trip stays within 1/32768.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let data_len = (w.len() * 2) as u32;
    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len).to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?;
    out.write_all(&w.sample_rate().to_le_bytes())?;
    out.write_all(&(w.sample_rate() * 2).to_le_bytes())?;
    out.write_all(&2u16.to_le_bytes())?;
    out.write_all(&16u16.to_le_bytes())?;
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;
    for &s in w.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.write_all(&q.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// PNM (binary P5 / P6, maxval 255)
// ---------------------------------------------------------------------------

/// Reads a binary PGM (P5) or PPM (P6) with maxval 255. Gray images come back
/// as 1xHxW, color as 3xHxW (channel-planar), values scaled to [0, 1].
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    parse_pnm(&bytes)
}

fn parse_pnm(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(0..2) {
        Some(b"P5") => 1usize,
        Some(b"P6") => 3usize,
        Some(other) => {
            return Err(Error::UnsupportedFormat(format!(
                "magic {:?}, only binary P5/P6 are supported",
                String::from_utf8_lossy(other)
            )))
        }
        None => return Err(Error::Parse("file shorter than a PNM magic".into())),
    };
    let mut pos = 2usize;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        *field = next_header_int(bytes, &mut pos)?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {maxval}, only 255 is supported"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Parse("zero image extent".into()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let expected = width * height * channels;
    let payload = bytes
        .get(pos..pos + expected)
        .ok_or_else(|| Error::Parse(format!(
            "payload truncated: expected {expected} bytes"
        )))?;
    // Interleaved bytes to channel-planar [0,1] doubles.
    let mut data = vec![0.0f64; expected];
    let plane = width * height;
    for (i, px) in payload.chunks_exact(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * plane + i] = b as f64 / 255.0;
        }
    }
    Tensor::new(vec![channels, height, width], data)
}

/// Skips whitespace and `#` comment lines, then parses one decimal field.
fn next_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err(Error::Parse("header truncated".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::Parse("expected a decimal header field".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse("malformed header field".into()))
}

/// Writes a 1xHxW tensor as binary P5 or a 3xHxW tensor as binary P6,
/// quantizing [0, 1] values to bytes.
pub fn write_pnm(path: &Path, img: &Tensor) -> Result<()> {
    let &[channels, height, width] = img.shape() else {
        return Err(Error::InvalidInput(format!(
            "image tensor must be CxHxW, got {:?}",
            img.shape()
        )));
    };
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        other => {
            return Err(Error::InvalidInput(format!(
                "{other} channels, only 1 or 3 can be written"
            )))
        }
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "{magic}\n{width} {height}\n255\n")?;
    let plane = width * height;
    let data = img.data();
    let mut row = Vec::with_capacity(plane * channels);
    for i in 0..plane {
        for c in 0..channels {
            let v = (data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            row.push(v);
        }
    }
    out.write_all(&row)?;
    out.flush()?;
    Ok(())
}

/// Replicates a grayscale 1xHxW image to 3 channels; 3-channel images pass
/// through unchanged.
pub fn to_rgb(img: &Tensor) -> Result<Tensor> {
    match img.shape() {
        [1, h, w] => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(img.data());
            }
            Tensor::new(vec![3, *h, *w], data)
        }
        [3, _, _] => Ok(img.clone()),
        other => Err(Error::InvalidInput(format!(
            "expected 1xHxW or 3xHxW, got {other:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Bilinear resize
// ---------------------------------------------------------------------------

/// Bilinear resize with a corner-aligned sampling grid. The lerp formulation
/// keeps constant images exactly constant and same-size resizes exact.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[channels, in_h, in_w] = img.shape() else {
        return Err(Error::InvalidInput(format!(
            "image tensor must be CxHxW, got {:?}",
            img.shape()
        )));
    };
    if in_h < 2 || in_w < 2 {
        return Err(Error::InvalidInput(format!(
            "source {in_h}x{in_w} too small for bilinear sampling"
        )));
    }
    if out_h < 1 || out_w < 1 {
        return Err(Error::InvalidInput("output extents must be positive".into()));
    }
    let scale_y = if out_h > 1 {
        (in_h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let scale_x = if out_w > 1 {
        (in_w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    let mut data = vec![0.0; channels * out_h * out_w];
    let in_plane = in_h * in_w;
    let out_plane = out_h * out_w;
    for c in 0..channels {
        let src = &img.data()[c * in_plane..(c + 1) * in_plane];
        let dst = &mut data[c * out_plane..(c + 1) * out_plane];
        for oy in 0..out_h {
            let fy = oy as f64 * scale_y;
            let y0 = (fy.floor() as usize).min(in_h - 2);
            let ty = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ox as f64 * scale_x;
                let x0 = (fx.floor() as usize).min(in_w - 2);
                let tx = fx - x0 as f64;
                let v00 = src[y0 * in_w + x0];
                let v01 = src[y0 * in_w + x0 + 1];
                let v10 = src[(y0 + 1) * in_w + x0];
                let v11 = src[(y0 + 1) * in_w + x0 + 1];
                let top = v00 + (v01 - v00) * tx;
                let bottom = v10 + (v11 - v10) * tx;
                dst[oy * out_w + ox] = top + (bottom - top) * ty;
            }
        }
    }
    Tensor::new(vec![channels, out_h, out_w], data)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FaceRecord {
    pub id: String,
    pub path: PathBuf,
    pub subject: usize,
}

#[derive(Debug, Clone)]
pub struct UtteranceRecord {
    pub id: String,
    pub path: PathBuf,
    pub subject: usize,
}

#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub frame_id: String,
    pub timestamp: f64,
    pub utterance: String,
    pub faces: Vec<String>,
    /// Ground-truth speaking face, for evaluation manifests.
    pub truth_face: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub faces: Vec<FaceRecord>,
    pub utterances: Vec<UtteranceRecord>,
    pub frames: Vec<FrameRecord>,
    /// Directory the record paths are relative to.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn face(&self, id: &str) -> Option<&FaceRecord> {
        self.faces.iter().find(|f| f.id == id)
    }

    pub fn utterance(&self, id: &str) -> Option<&UtteranceRecord> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

/// Parses and validates a manifest file. Every error names the line it came
/// from.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut manifest = Manifest {
        base_dir,
        ..Manifest::default()
    };
    let mut face_ids = HashSet::new();
    let mut utterance_ids = HashSet::new();
    let err = |line_no: usize, msg: String| Error::Parse(format!("line {line_no}: {msg}"));

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[0] {
            "classes" => {
                if fields.len() < 2 {
                    return Err(err(line_no, "classes line needs at least one name".into()));
                }
                if !manifest.classes.is_empty() {
                    return Err(err(line_no, "duplicate classes line".into()));
                }
                manifest.classes = fields[1..].iter().map(|s| s.to_string()).collect();
            }
            "face" | "utterance" => {
                if fields.len() != 4 {
                    return Err(err(
                        line_no,
                        format!("{} record needs 4 fields, got {}", fields[0], fields.len()),
                    ));
                }
                let subject = manifest.class_index(fields[3]).ok_or_else(|| {
                    err(line_no, format!("unknown subject label {:?}", fields[3]))
                })?;
                let id = fields[1].to_string();
                let path = PathBuf::from(fields[2]);
                if fields[0] == "face" {
                    if !face_ids.insert(id.clone()) {
                        return Err(err(line_no, format!("duplicate face id {id:?}")));
                    }
                    manifest.faces.push(FaceRecord { id, path, subject });
                } else {
                    if !utterance_ids.insert(id.clone()) {
                        return Err(err(line_no, format!("duplicate utterance id {id:?}")));
                    }
                    manifest.utterances.push(UtteranceRecord { id, path, subject });
                }
            }
            "speaking-frame" => {
                if fields.len() != 6 {
                    return Err(err(
                        line_no,
                        format!("speaking-frame record needs 6 fields, got {}", fields.len()),
                    ));
                }
                let timestamp: f64 = fields[2]
                    .parse()
                    .map_err(|_| err(line_no, format!("bad timestamp {:?}", fields[2])))?;
                let faces: Vec<String> = fields[5].split(',').map(str::to_string).collect();
                if faces.is_empty() || faces.iter().any(String::is_empty) {
                    return Err(err(line_no, "speaking-frame needs at least one face id".into()));
                }
                let truth_face = match fields[4] {
                    "-" => None,
                    id => Some(id.to_string()),
                };
                manifest.frames.push(FrameRecord {
                    frame_id: fields[1].to_string(),
                    timestamp,
                    utterance: fields[3].to_string(),
                    faces,
                    truth_face,
                });
            }
            other => {
                return Err(err(line_no, format!("unknown record kind {other:?}")));
            }
        }
    }

    // Referential integrity.
    for frame in &manifest.frames {
        if !utterance_ids.contains(&frame.utterance) {
            return Err(Error::Parse(format!(
                "frame {:?} references missing utterance {:?}",
                frame.frame_id, frame.utterance
            )));
        }
        for fid in &frame.faces {
            if !face_ids.contains(fid) {
                return Err(Error::Parse(format!(
                    "frame {:?} references missing face {:?}",
                    frame.frame_id, fid
                )));
            }
        }
        if let Some(truth) = &frame.truth_face {
            if !frame.faces.contains(truth) {
                return Err(Error::Parse(format!(
                    "frame {:?} ground truth {truth:?} is not among its candidates",
                    frame.frame_id
                )));
            }
        }
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Bulk loading
// ---------------------------------------------------------------------------

/// Reads every face record: PNM, replicated to RGB if gray, resized to the
/// target extents when they differ. Returns (image, subject) pairs in record
/// order.
pub fn load_faces(
    manifest: &Manifest,
    out_h: usize,
    out_w: usize,
    threads: usize,
) -> Result<Vec<(Tensor, usize)>> {
    crate::parallel::map_indexed(manifest.faces.len(), threads, |i| {
        let record = &manifest.faces[i];
        let img = read_pnm(&manifest.base_dir.join(&record.path))?;
        let img = to_rgb(&img)?;
        let img = if img.shape()[1] == out_h && img.shape()[2] == out_w {
            img
        } else {
            resize_bilinear(&img, out_h, out_w)?
        };
        Ok((img, record.subject))
    })
    .into_iter()
    .collect()
}

/// Reads every utterance record and summarizes it, grouped per subject.
pub fn load_utterance_features(
    manifest: &Manifest,
    cfg: &crate::audio::MfccConfig,
    threads: usize,
) -> Result<Vec<Vec<crate::audio::AudioFeatureVector>>> {
    let features: Vec<(usize, crate::audio::AudioFeatureVector)> =
        crate::parallel::map_indexed(manifest.utterances.len(), threads, |i| {
            let record = &manifest.utterances[i];
            let wave = read_wav(&manifest.base_dir.join(&record.path))?;
            Ok((record.subject, crate::audio::utterance_features(&wave, cfg)?))
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mut by_subject = vec![Vec::new(); manifest.classes.len()];
    for (subject, f) in features {
        by_subject[subject].push(f);
    }
    Ok(by_subject)
}

/// Assembles speaking frames from a manifest: candidate faces in listed
/// order (bounding-box ids follow that order), utterance features, and
/// ground truth where the manifest carries it.
pub fn load_speaking_frames(
    manifest: &Manifest,
    cfg: &crate::audio::MfccConfig,
    threads: usize,
) -> Result<Vec<crate::naming::SpeakingFrame>> {
    use crate::naming::{CandidateFace, FrameTruth, SpeakingFrame};
    crate::parallel::map_indexed(manifest.frames.len(), threads, |i| {
        let record = &manifest.frames[i];
        let utt = manifest
            .utterance(&record.utterance)
            .expect("integrity validated at load");
        let wave = read_wav(&manifest.base_dir.join(&utt.path))?;
        let audio = crate::audio::utterance_features(&wave, cfg)?;
        let mut candidates = Vec::with_capacity(record.faces.len());
        for (slot, fid) in record.faces.iter().enumerate() {
            let face = manifest.face(fid).expect("integrity validated at load");
            let img = to_rgb(&read_pnm(&manifest.base_dir.join(&face.path))?)?;
            candidates.push(CandidateFace {
                bbox_id: slot,
                image: img,
            });
        }
        let truth = record.truth_face.as_ref().map(|tid| {
            let index = record.faces.iter().position(|f| f == tid).expect("validated");
            let identity = manifest.face(tid).expect("validated").subject;
            FrameTruth {
                speaker_index: index,
                identity,
            }
        });
        Ok(SpeakingFrame {
            frame_id: record.frame_id.clone(),
            timestamp: record.timestamp,
            candidates,
            audio,
            truth,
        })
    })
    .into_iter()
    .collect()
}

/// Writes a manifest in the documented column order. `header` lines are
/// emitted as leading comments.
pub fn write_manifest(path: &Path, manifest: &Manifest, header: &[String]) -> Result<()> {
    let mut out = String::new();
    for line in header {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str(&format!("classes\t{}\n", manifest.classes.join("\t")));
    for f in &manifest.faces {
        out.push_str(&format!(
            "face\t{}\t{}\t{}\n",
            f.id,
            f.path.display(),
            manifest.classes[f.subject]
        ));
    }
    for u in &manifest.utterances {
        out.push_str(&format!(
            "utterance\t{}\t{}\t{}\n",
            u.id,
            u.path.display(),
            manifest.classes[u.subject]
        ));
    }
    for fr in &manifest.frames {
        out.push_str(&format!(
            "speaking-frame\t{}\t{}\t{}\t{}\t{}\n",
            fr.frame_id,
            fr.timestamp,
            fr.utterance,
            fr.truth_face.as_deref().unwrap_or("-"),
            fr.faces.join(",")
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
