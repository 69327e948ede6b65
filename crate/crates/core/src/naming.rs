//! Per-frame speaker naming, evaluation metrics and the speaking-activity
//! timeline.
//!
//! For each speaking frame the margin classifier scores every candidate
//! face-audio pair; candidates below the threshold are rejected, the most
//! confident survivor wins, and the fused network names it. When every
//! candidate is rejected the globally best margin is still reported with
//! `rejected_all` set, so each speaking frame gets an answer.

use crate::audio::AudioFeatureVector;
use crate::error::{Error, Result};
use crate::models::{predict_identity, Model};
use crate::parallel::map_indexed;
use crate::reject::{build_variant_feature, margin, MarginModel};
use crate::tensor::Tensor;

/// One candidate face in a frame, tagged with its detector bounding-box id.
#[derive(Debug, Clone)]
pub struct CandidateFace {
    pub bbox_id: usize,
    pub image: Tensor,
}

/// Ground truth for evaluation frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameTruth {
    /// Index of the speaking face within the candidate list.
    pub speaker_index: usize,
    pub identity: usize,
}

/// A video frame annotated as containing speech: candidate faces plus the
/// utterance features of the surrounding audio.
#[derive(Debug, Clone)]
pub struct SpeakingFrame {
    pub frame_id: String,
    pub timestamp: f64,
    pub candidates: Vec<CandidateFace>,
    pub audio: AudioFeatureVector,
    pub truth: Option<FrameTruth>,
}

/// Decision for one speaking frame.
#[derive(Debug, Clone)]
pub struct NamingResult {
    pub frame_id: String,
    pub timestamp: f64,
    /// Index of the chosen face within the frame's candidate list.
    pub face_index: usize,
    pub bbox_id: usize,
    pub identity: usize,
    pub margin: f64,
    /// Probability the fused model assigns the chosen identity.
    pub probability: f64,
    /// Every candidate fell below the threshold; the best guess is reported
    /// anyway.
    pub rejected_all: bool,
}

/// Square count matrix over identity labels: rows are ground truth, columns
/// predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.n_classes + predicted] += 1;
    }

    pub fn count(&self, truth: usize, predicted: usize) -> usize {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn diagonal(&self) -> usize {
        (0..self.n_classes).map(|i| self.count(i, i)).sum()
    }

    /// Tab-delimited table with a header row of class names.
    pub fn to_tsv(&self, classes: &[String]) -> String {
        let mut out = String::from("truth\\pred");
        for c in classes {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (i, c) in classes.iter().enumerate() {
            out.push_str(c);
            for j in 0..self.n_classes {
                out.push_str(&format!("\t{}", self.count(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// Names the speaker in one frame. `face_model` is only consulted when the
/// margin model's variant needs face-alone features.
pub fn name_frame(
    face_model: Option<&Model>,
    fused_model: &Model,
    margin_model: &MarginModel,
    frame: &SpeakingFrame,
    threshold: f64,
) -> Result<NamingResult> {
    if frame.candidates.is_empty() {
        return Err(Error::InvalidInput(format!(
            "frame {:?} has no candidate faces",
            frame.frame_id
        )));
    }
    // Margin of every candidate pair.
    let mut scores = Vec::with_capacity(frame.candidates.len());
    for cand in &frame.candidates {
        let feature = build_variant_feature(
            margin_model.variant,
            face_model,
            Some(fused_model),
            &cand.image,
            &frame.audio,
        )?;
        scores.push(margin(margin_model, &feature)?);
    }
    // Highest margin wins; ties break toward the lowest bounding-box id so
    // the outcome is invariant under candidate reordering.
    let better = |a: usize, b: usize| -> bool {
        scores[a] > scores[b]
            || (scores[a] == scores[b]
                && frame.candidates[a].bbox_id < frame.candidates[b].bbox_id)
    };
    let mut best_overall = 0;
    let mut best_survivor: Option<usize> = None;
    for i in 0..scores.len() {
        if i > 0 && better(i, best_overall) {
            best_overall = i;
        }
        if scores[i] >= threshold && best_survivor.is_none_or(|b| better(i, b)) {
            best_survivor = Some(i);
        }
    }
    let (choice, rejected_all) = match best_survivor {
        Some(i) => (i, false),
        None => (best_overall, true),
    };
    let cand = &frame.candidates[choice];
    let (identity, probs) = predict_identity(fused_model, &cand.image, Some(&frame.audio))?;
    Ok(NamingResult {
        frame_id: frame.frame_id.clone(),
        timestamp: frame.timestamp,
        face_index: choice,
        bbox_id: cand.bbox_id,
        identity,
        margin: scores[choice],
        probability: probs[identity],
        rejected_all,
    })
}

/// Names every frame, fanning out across threads; the result order matches
/// the frame order regardless of thread count.
pub fn name_frames(
    face_model: Option<&Model>,
    fused_model: &Model,
    margin_model: &MarginModel,
    frames: &[SpeakingFrame],
    threshold: f64,
    threads: usize,
) -> Result<Vec<NamingResult>> {
    map_indexed(frames.len(), threads, |i| {
        name_frame(face_model, fused_model, margin_model, &frames[i], threshold)
    })
    .into_iter()
    .collect()
}

/// Aggregate naming quality over annotated frames.
#[derive(Debug, Clone)]
pub struct NamingEvaluation {
    /// Fraction of frames with both the right face and the right identity.
    pub accuracy: f64,
    /// Identity confusion over frames whose chosen face was correct.
    pub confusion: ConfusionMatrix,
    /// Per-class accuracy over frames with that ground-truth identity.
    pub per_class: Vec<f64>,
}

/// Scores results against their frames. A frame counts as correct only if
/// the chosen face index equals the ground-truth speaker index and the
/// predicted identity matches the ground-truth identity.
pub fn evaluate_naming(
    results: &[NamingResult],
    frames: &[SpeakingFrame],
    n_classes: usize,
) -> Result<NamingEvaluation> {
    if results.len() != frames.len() {
        return Err(Error::InvalidInput(format!(
            "{} results for {} frames",
            results.len(),
            frames.len()
        )));
    }
    if frames.is_empty() {
        return Err(Error::InvalidInput("no frames to evaluate".into()));
    }
    let mut correct = 0usize;
    let mut confusion = ConfusionMatrix::new(n_classes);
    let mut class_total = vec![0usize; n_classes];
    let mut class_correct = vec![0usize; n_classes];
    for (result, frame) in results.iter().zip(frames) {
        if result.frame_id != frame.frame_id {
            return Err(Error::InvalidInput(format!(
                "result {:?} does not match frame {:?}",
                result.frame_id, frame.frame_id
            )));
        }
        let truth = frame.truth.ok_or_else(|| {
            Error::InvalidInput(format!("frame {:?} has no ground truth", frame.frame_id))
        })?;
        if truth.identity >= n_classes || result.identity >= n_classes {
            return Err(Error::Label("identity out of range".into()));
        }
        class_total[truth.identity] += 1;
        let face_ok = result.face_index == truth.speaker_index;
        if face_ok {
            confusion.record(truth.identity, result.identity);
        }
        if face_ok && result.identity == truth.identity {
            correct += 1;
            class_correct[truth.identity] += 1;
        }
    }
    let per_class = class_correct
        .iter()
        .zip(&class_total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    Ok(NamingEvaluation {
        accuracy: correct as f64 / frames.len() as f64,
        confusion,
        per_class,
    })
}

/// A contiguous stretch of one speaker's activity.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakingInterval {
    pub identity: usize,
    pub start: f64,
    pub end: f64,
}

/// Merges consecutive same-identity results whose gap does not exceed the
/// tolerance into speaking intervals, ordered by start time.
pub fn export_timeline(results: &[NamingResult], gap_tolerance: f64) -> Vec<SpeakingInterval> {
    let mut ordered: Vec<&NamingResult> = results.iter().collect();
    ordered.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut intervals: Vec<SpeakingInterval> = Vec::new();
    for r in ordered {
        match intervals.last_mut() {
            Some(last)
                if last.identity == r.identity && r.timestamp - last.end <= gap_tolerance =>
            {
                last.end = r.timestamp;
            }
            _ => intervals.push(SpeakingInterval {
                identity: r.identity,
                start: r.timestamp,
                end: r.timestamp,
            }),
        }
    }
    intervals
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(id: &str, t: f64, identity: usize) -> NamingResult {
        NamingResult {
            frame_id: id.to_string(),
            timestamp: t,
            face_index: 0,
            bbox_id: 0,
            identity,
            margin: 1.0,
            probability: 0.9,
            rejected_all: false,
        }
    }

    #[test]
    fn timeline_empty_results() {
        assert!(export_timeline(&[], 0.5).is_empty());
    }

    #[test]
    fn timeline_merges_consecutive_frames() {
        let results: Vec<NamingResult> =
            (0..10).map(|i| result(&format!("f{i}"), i as f64 * 0.04, 2)).collect();
        let intervals = export_timeline(&results, 0.5);
        assert_eq!(intervals.len(), 1);
        assert_eq!(intervals[0].identity, 2);
        assert_eq!(intervals[0].start, 0.0);
        assert!((intervals[0].end - 0.36).abs() < 1e-12);
    }

    #[test]
    fn timeline_splits_on_gap() {
        // Ten frames at 0.04 s spacing with a 1.0 s hole in the middle.
        let mut results = Vec::new();
        for i in 0..5 {
            results.push(result(&format!("f{i}"), i as f64 * 0.04, 1));
        }
        for i in 5..10 {
            results.push(result(&format!("f{i}"), 1.0 + i as f64 * 0.04, 1));
        }
        let intervals = export_timeline(&results, 0.5);
        assert_eq!(intervals.len(), 2);
    }

    #[test]
    fn timeline_splits_on_identity_change() {
        let results = vec![
            result("a", 0.0, 1),
            result("b", 0.1, 1),
            result("c", 0.2, 3),
            result("d", 0.3, 1),
        ];
        let intervals = export_timeline(&results, 0.5);
        assert_eq!(intervals.len(), 3);
        assert_eq!(intervals[1].identity, 3);
    }

    #[test]
    fn confusion_matrix_tsv_shape() {
        let mut m = ConfusionMatrix::new(2);
        m.record(0, 0);
        m.record(0, 1);
        m.record(1, 1);
        let tsv = m.to_tsv(&["alice".into(), "bob".into()]);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("truth\\pred\talice\tbob"));
        assert_eq!(lines[1], "alice\t1\t1");
        assert_eq!(lines[2], "bob\t0\t1");
        assert_eq!(m.total(), 3);
        assert_eq!(m.diagonal(), 2);
    }
}
