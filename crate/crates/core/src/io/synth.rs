//! Deterministic synthetic multimodal dataset for desk-scale verification.
//!
//! Every identity gets a fixed spatial template (an arrangement of colored
//! intensity blobs) rendered at 50x40 with integer pose jitter and additive
//! noise, and a fixed chord of sine tones turned into noisy utterances. Every
//! sample draws from its own RNG stream keyed by (kind, identity, index), so
//! train/test splits and speaking frames are disjoint by construction and a
//! seed reproduces the dataset bit for bit.

use crate::audio::{utterance_features, AudioFeatureVector, MfccConfig, Waveform};
use crate::error::{Error, Result};
use crate::io::{write_manifest, write_pnm, write_wav, FaceRecord, FrameRecord, Manifest, UtteranceRecord};
use crate::naming::{CandidateFace, FrameTruth, SpeakingFrame};
use crate::parallel::map_indexed;
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::f64::consts::TAU;
use std::path::Path;

const IMG_H: usize = 50;
const IMG_W: usize = 40;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub train_per_identity: usize,
    pub test_per_identity: usize,
    /// Standard deviation of the additive pixel noise.
    pub image_noise: f64,
    /// Standard deviation of the additive waveform noise.
    pub audio_noise: f64,
    /// Maximum absolute template shift, in pixels, per axis.
    pub pose_jitter: i64,
    /// Utterances generated per identity for each of train and test.
    pub utterances_per_identity: usize,
    pub utterance_seconds: f64,
    /// Number of annotated speaking frames.
    pub n_frames: usize,
    pub sample_rate: u32,
    /// Sine frequencies per identity; derived from the identity index when
    /// absent. All must stay below Nyquist.
    pub tones: Option<Vec<Vec<f64>>>,
    pub seed: u64,
    /// Worker threads for feature extraction; 0 picks machine parallelism.
    pub threads: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_identities: 6,
            train_per_identity: 200,
            test_per_identity: 50,
            image_noise: 0.05,
            audio_noise: 0.02,
            pose_jitter: 2,
            utterances_per_identity: 40,
            utterance_seconds: 0.5,
            n_frames: 120,
            sample_rate: 16_000,
            tones: None,
            seed: 0,
            threads: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 identities, got {}",
                self.n_identities
            )));
        }
        if self.train_per_identity == 0 || self.test_per_identity == 0 {
            return Err(Error::InvalidInput("per-identity sample counts must be positive".into()));
        }
        if self.utterances_per_identity < 5 {
            return Err(Error::InvalidInput(
                "need at least 5 utterances per identity for the pairing rule".into(),
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for id in 0..self.n_identities {
            for f in self.identity_tones(id) {
                if f <= 0.0 || f >= nyquist {
                    return Err(Error::InvalidInput(format!(
                        "tone {f} Hz for identity {id} is outside (0, {nyquist})"
                    )));
                }
            }
        }
        if self.pose_jitter < 0 {
            return Err(Error::InvalidInput("pose jitter must be non-negative".into()));
        }
        Ok(())
    }

    /// Chord of tones for one identity.
    fn identity_tones(&self, id: usize) -> Vec<f64> {
        if let Some(tones) = &self.tones {
            return tones[id % tones.len()].clone();
        }
        let base = 200.0 + 130.0 * id as f64;
        vec![base, base * 1.94, base * 2.83]
    }

    fn resolved_threads(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

/// Everything the generator produces, in memory plus enough structure to be
/// written out as manifests.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub classes: Vec<String>,
    pub train_faces: Vec<(Tensor, usize)>,
    pub test_faces: Vec<(Tensor, usize)>,
    /// Per-identity utterance features.
    pub train_audio: Vec<Vec<AudioFeatureVector>>,
    pub test_audio: Vec<Vec<AudioFeatureVector>>,
    /// Raw waveforms behind the feature vectors, for export.
    pub train_waveforms: Vec<Vec<Waveform>>,
    pub test_waveforms: Vec<Vec<Waveform>>,
    pub frames: Vec<SpeakingFrame>,
    /// Waveform behind each frame's audio features, for export.
    pub frame_waveforms: Vec<Waveform>,
    /// Identity of every frame candidate, slot for slot; evaluation metadata
    /// for exported manifests.
    pub frame_candidate_ids: Vec<Vec<usize>>,
}

// RNG stream kinds.
const K_TEMPLATE: u64 = 1;
const K_TRAIN_FACE: u64 = 2;
const K_TEST_FACE: u64 = 3;
const K_TRAIN_AUDIO: u64 = 4;
const K_TEST_AUDIO: u64 = 5;
const K_FRAME: u64 = 6;
const K_FRAME_FACE: u64 = 7;
const K_FRAME_AUDIO: u64 = 8;

fn stream(seed: u64, kind: u64, id: u64, index: u64) -> Rng {
    Rng::derive(seed, (kind << 56) ^ (id << 32) ^ index)
}

/// One colored blob of an identity template.
#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    color: [f64; 3],
}

fn identity_template(seed: u64, id: usize, n_blobs: usize) -> Vec<Blob> {
    let mut rng = stream(seed, K_TEMPLATE, id as u64, 0);
    (0..n_blobs)
        .map(|_| {
            let dominant = rng.below(3);
            let mut color = [0.0; 3];
            for (c, v) in color.iter_mut().enumerate() {
                *v = if c == dominant {
                    rng.range(0.7, 1.0)
                } else {
                    rng.range(0.0, 0.45)
                };
            }
            Blob {
                cx: rng.range(6.0, IMG_W as f64 - 6.0),
                cy: rng.range(6.0, IMG_H as f64 - 6.0),
                sigma: rng.range(2.5, 6.0),
                color,
            }
        })
        .collect()
}

/// Renders one jittered, noisy sample of a template.
fn render_face(template: &[Blob], rng: &mut Rng, jitter: i64, noise: f64) -> Tensor {
    let dx = if jitter > 0 { rng.below(2 * jitter as usize + 1) as f64 - jitter as f64 } else { 0.0 };
    let dy = if jitter > 0 { rng.below(2 * jitter as usize + 1) as f64 - jitter as f64 } else { 0.0 };
    let mut data = vec![0.0f64; 3 * IMG_H * IMG_W];
    let plane = IMG_H * IMG_W;
    for blob in template {
        let (bx, by) = (blob.cx + dx, blob.cy + dy);
        let inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
        for y in 0..IMG_H {
            let dy2 = (y as f64 - by) * (y as f64 - by);
            for x in 0..IMG_W {
                let d2 = (x as f64 - bx) * (x as f64 - bx) + dy2;
                let g = (-d2 * inv).exp();
                if g > 1e-4 {
                    for c in 0..3 {
                        data[c * plane + y * IMG_W + x] += blob.color[c] * g;
                    }
                }
            }
        }
    }
    for v in &mut data {
        let noisy = *v + noise * rng.gaussian();
        *v = noisy.clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, IMG_H, IMG_W], data).expect("clamped render is finite")
}

/// Synthesizes one noisy multi-sine utterance.
fn render_utterance(tones: &[f64], cfg: &SynthConfig, rng: &mut Rng) -> Waveform {
    let n = (cfg.utterance_seconds * cfg.sample_rate as f64).round() as usize;
    let phases: Vec<f64> = tones.iter().map(|_| rng.range(0.0, TAU)).collect();
    let amps: Vec<f64> = (0..tones.len())
        .map(|k| 0.32 * 0.72f64.powi(k as i32))
        .collect();
    let mut samples = Vec::with_capacity(n);
    for t in 0..n {
        let time = t as f64 / cfg.sample_rate as f64;
        let mut v = 0.0;
        for ((f, p), a) in tones.iter().zip(&phases).zip(&amps) {
            v += a * (TAU * f * time + p).sin();
        }
        v += cfg.audio_noise * rng.gaussian();
        samples.push(v.clamp(-1.0, 1.0));
    }
    Waveform::new(samples, cfg.sample_rate).expect("clamped samples are valid")
}

/// Generates the full dataset. Deterministic given the seed.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let threads = cfg.resolved_threads();
    let classes: Vec<String> = (0..cfg.n_identities).map(|i| format!("id{i}")).collect();
    let templates: Vec<Vec<Blob>> = (0..cfg.n_identities)
        .map(|i| identity_template(cfg.seed, i, 5))
        .collect();

    // Faces: parallel across samples, each from its own stream.
    let faces = |kind: u64, per_identity: usize| -> Vec<(Tensor, usize)> {
        map_indexed(cfg.n_identities * per_identity, threads, |i| {
            let id = i / per_identity;
            let index = (i % per_identity) as u64;
            let mut rng = stream(cfg.seed, kind, id as u64, index);
            (
                render_face(&templates[id], &mut rng, cfg.pose_jitter, cfg.image_noise),
                id,
            )
        })
    };
    let train_faces = faces(K_TRAIN_FACE, cfg.train_per_identity);
    let test_faces = faces(K_TEST_FACE, cfg.test_per_identity);

    // Utterances plus their 75-d summaries.
    let mfcc = MfccConfig::default();
    let audio = |kind: u64| -> Result<(Vec<Vec<Waveform>>, Vec<Vec<AudioFeatureVector>>)> {
        let flat: Vec<(Waveform, AudioFeatureVector)> = map_indexed(
            cfg.n_identities * cfg.utterances_per_identity,
            threads,
            |i| {
                let id = i / cfg.utterances_per_identity;
                let index = (i % cfg.utterances_per_identity) as u64;
                let mut rng = stream(cfg.seed, kind, id as u64, index);
                let wave = render_utterance(&cfg.identity_tones(id), cfg, &mut rng);
                let features = utterance_features(&wave, &mfcc)?;
                Ok((wave, features))
            },
        )
        .into_iter()
        .collect::<Result<_>>()?;
        let mut waves = vec![Vec::new(); cfg.n_identities];
        let mut feats = vec![Vec::new(); cfg.n_identities];
        for (i, (w, f)) in flat.into_iter().enumerate() {
            let id = i / cfg.utterances_per_identity;
            waves[id].push(w);
            feats[id].push(f);
        }
        Ok((waves, feats))
    };
    let (train_waveforms, train_audio) = audio(K_TRAIN_AUDIO)?;
    let (test_waveforms, test_audio) = audio(K_TEST_AUDIO)?;

    // Speaking frames: 2-4 candidates of distinct identities, the true
    // speaker's utterance attached.
    let frame_data: Vec<(SpeakingFrame, Waveform, Vec<usize>)> = map_indexed(cfg.n_frames, threads, |fi| {
        let mut rng = stream(cfg.seed, K_FRAME, 0, fi as u64);
        let n_cand = 2 + rng.below(3.min(cfg.n_identities - 1));
        let mut ids: Vec<usize> = (0..cfg.n_identities).collect();
        rng.shuffle(&mut ids);
        ids.truncate(n_cand);
        let speaker_index = rng.below(n_cand);
        let candidates: Vec<CandidateFace> = ids
            .iter()
            .enumerate()
            .map(|(slot, &id)| {
                let mut face_rng = stream(cfg.seed, K_FRAME_FACE, id as u64, (fi * 8 + slot) as u64);
                CandidateFace {
                    bbox_id: slot,
                    image: render_face(&templates[id], &mut face_rng, cfg.pose_jitter, cfg.image_noise),
                }
            })
            .collect();
        let speaker = ids[speaker_index];
        let mut audio_rng = stream(cfg.seed, K_FRAME_AUDIO, speaker as u64, fi as u64);
        let wave = render_utterance(&cfg.identity_tones(speaker), cfg, &mut audio_rng);
        let features = utterance_features(&wave, &mfcc)?;
        Ok::<_, Error>((
            SpeakingFrame {
                frame_id: format!("fr{fi}"),
                timestamp: fi as f64 * 0.2,
                candidates,
                audio: features,
                truth: Some(FrameTruth {
                    speaker_index,
                    identity: speaker,
                }),
            },
            wave,
            ids,
        ))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut frame_waveforms = Vec::with_capacity(cfg.n_frames);
    let mut frame_candidate_ids = Vec::with_capacity(cfg.n_frames);
    for (frame, wave, ids) in frame_data {
        frames.push(frame);
        frame_waveforms.push(wave);
        frame_candidate_ids.push(ids);
    }

    Ok(SynthDataset {
        classes,
        train_faces,
        test_faces,
        train_audio,
        test_audio,
        train_waveforms,
        test_waveforms,
        frames,
        frame_waveforms,
        frame_candidate_ids,
    })
}

/// Writes the dataset under `out_dir`: images as binary PPM, audio as PCM16
/// WAV, plus `train.tsv`, `test.tsv` and `frames.tsv` manifests. `header`
/// lines are recorded as comments at the top of each manifest.
pub fn write_dataset(ds: &SynthDataset, out_dir: &Path, header: &[String]) -> Result<()> {
    let faces_dir = out_dir.join("faces");
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&faces_dir)?;
    std::fs::create_dir_all(&audio_dir)?;

    let split_manifest = |split: &str,
                              faces: &[(Tensor, usize)],
                              waves: &[Vec<Waveform>]|
     -> Result<Manifest> {
        let mut manifest = Manifest {
            classes: ds.classes.clone(),
            ..Manifest::default()
        };
        for (i, (img, subject)) in faces.iter().enumerate() {
            let rel = format!("faces/{split}_{i:04}.ppm");
            write_pnm(&out_dir.join(&rel), img)?;
            manifest.faces.push(FaceRecord {
                id: format!("{split}_f{i}"),
                path: rel.into(),
                subject: *subject,
            });
        }
        for (subject, pool) in waves.iter().enumerate() {
            for (k, wave) in pool.iter().enumerate() {
                let rel = format!("audio/{split}_{subject}_{k:03}.wav");
                write_wav(&out_dir.join(&rel), wave)?;
                manifest.utterances.push(UtteranceRecord {
                    id: format!("{split}_u{subject}_{k}"),
                    path: rel.into(),
                    subject,
                });
            }
        }
        Ok(manifest)
    };

    let train = split_manifest("train", &ds.train_faces, &ds.train_waveforms)?;
    write_manifest(&out_dir.join("train.tsv"), &train, header)?;
    let test = split_manifest("test", &ds.test_faces, &ds.test_waveforms)?;
    write_manifest(&out_dir.join("test.tsv"), &test, header)?;

    // Frames manifest is self-contained: candidate faces, utterances, frames.
    let mut frames = Manifest {
        classes: ds.classes.clone(),
        ..Manifest::default()
    };
    for (fi, (frame, wave)) in ds.frames.iter().zip(&ds.frame_waveforms).enumerate() {
        let truth = frame.truth.expect("synthetic frames carry ground truth");
        let rel_wav = format!("audio/frame_{fi:04}.wav");
        write_wav(&out_dir.join(&rel_wav), wave)?;
        let utterance_id = format!("frame_u{fi}");
        frames.utterances.push(UtteranceRecord {
            id: utterance_id.clone(),
            path: rel_wav.into(),
            subject: truth.identity,
        });
        let mut face_ids = Vec::with_capacity(frame.candidates.len());
        for (slot, cand) in frame.candidates.iter().enumerate() {
            let rel = format!("faces/frame_{fi:04}_c{slot}.ppm");
            write_pnm(&out_dir.join(&rel), &cand.image)?;
            let id = format!("frame_f{fi}_c{slot}");
            let subject = ds.frame_candidate_ids[fi][slot];
            frames.faces.push(FaceRecord {
                id: id.clone(),
                path: rel.into(),
                subject,
            });
            face_ids.push(id);
        }
        frames.frames.push(FrameRecord {
            frame_id: frame.frame_id.clone(),
            timestamp: frame.timestamp,
            utterance: utterance_id,
            truth_face: Some(face_ids[truth.speaker_index].clone()),
            faces: face_ids,
        });
    }
    write_manifest(&out_dir.join("frames.tsv"), &frames, header)?;
    Ok(())
}
