//! Subcommand implementations.

use crate::config::RunConfig;
use crate::TOOL_VERSION;
use sn_core::audio::MfccConfig;
use sn_core::error::{Error, Result};
use sn_core::io::synth::{synth_dataset, write_dataset, SynthConfig};
use sn_core::io::{load_faces, load_manifest, load_speaking_frames, load_utterance_features};
use sn_core::models::{
    self, build_face_model, build_fused_model, face_arch, fused_arch, Model, ModelKind,
    TrainSample, TrainingConfig,
};
use sn_core::naming::{evaluate_naming, export_timeline, name_frames, ConfusionMatrix};
use sn_core::reject::{
    load_margin_model, make_pair_dataset, margin, save_margin_model, train_margin, MarginModel,
    PairFeaturizer, RejectionVariant,
};
use sn_core::rng::Rng;
use std::io::Write;
use std::path::Path;

fn header(config: &RunConfig) -> String {
    format!("# {TOOL_VERSION} seed={}\n", config.str("seed"))
}

fn write_text(path: &Path, config: &RunConfig, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::fs::File::create(path)?;
    out.write_all(header(config).as_bytes())?;
    out.write_all(body.as_bytes())?;
    Ok(())
}

fn log_config(command: &str, config: &RunConfig) {
    println!("{TOOL_VERSION} {command}");
    print!("{}", indent(&config.resolved_block()));
}

fn indent(block: &str) -> String {
    block
        .lines()
        .map(|l| format!("  {l}\n"))
        .collect()
}

fn training_config(config: &RunConfig) -> Result<TrainingConfig> {
    Ok(TrainingConfig {
        lr: config.f64("lr")?,
        batch_size: config.usize("batch")?,
        epochs: config.usize("epochs")?,
        momentum: config.f64("momentum")?,
        seed: config.u64("seed")?,
        threads: config.usize("threads")?,
    })
}

fn load_train_split(config: &RunConfig) -> Result<(Vec<(sn_core::Tensor, usize)>, Vec<Vec<sn_core::audio::AudioFeatureVector>>, Vec<String>)> {
    let manifest = load_manifest(&config.data_dir().join("train.tsv"))?;
    let threads = config.usize("threads")?;
    let faces = load_faces(&manifest, 50, 40, threads.max(2))?;
    let audio = load_utterance_features(&manifest, &MfccConfig::default(), threads.max(2))?;
    Ok((faces, audio, manifest.classes))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn synth(config: &RunConfig) -> Result<()> {
    log_config("synth", config);
    let cfg = SynthConfig {
        n_identities: config.usize("identities")?,
        train_per_identity: config.usize("train-per-identity")?,
        test_per_identity: config.usize("test-per-identity")?,
        image_noise: config.f64("image-noise")?,
        audio_noise: config.f64("audio-noise")?,
        pose_jitter: config.i64("pose-jitter")?,
        utterances_per_identity: config.usize("utterances-per-identity")?,
        utterance_seconds: config.f64("utterance-seconds")?,
        n_frames: config.usize("frames")?,
        sample_rate: 16_000,
        tones: None,
        seed: config.u64("seed")?,
        threads: config.usize("threads")?,
    };
    let ds = synth_dataset(&cfg)?;
    let dir = config.data_dir();
    std::fs::create_dir_all(&dir)?;
    let head = vec![format!("{TOOL_VERSION} seed={}", cfg.seed)];
    write_dataset(&ds, &dir, &head)?;
    println!(
        "wrote {} train faces, {} test faces, {} frames to {}",
        ds.train_faces.len(),
        ds.test_faces.len(),
        ds.frames.len(),
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-face
// ---------------------------------------------------------------------------

pub fn train_face(config: &RunConfig) -> Result<()> {
    log_config("train-face", config);
    let (faces, _, classes) = load_train_split(config)?;
    if classes.len() != config.usize("classes")? {
        return Err(Error::Usage(format!(
            "manifest has {} classes, config says {}",
            classes.len(),
            config.usize("classes")?
        )));
    }
    let data: Vec<TrainSample> = faces
        .iter()
        .map(|(img, s)| TrainSample {
            image: img.clone(),
            audio: None,
            label: *s,
        })
        .collect();
    let tc = training_config(config)?;
    let mut model = build_face_model(classes.len(), tc.seed)?;
    let history = models::train(&mut model, &data, &tc)?;
    let path = config.model_path("face-model");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    models::save_model(
        &model,
        &path,
        &[
            ("tool".into(), TOOL_VERSION.into()),
            ("seed".into(), tc.seed.to_string()),
        ],
    )?;
    let losses: Vec<String> = history.iter().map(|l| format!("{l:.6}")).collect();
    println!("trained face model: epoch losses {}", losses.join(", "));
    println!("model={}", path.display());
    let mut body = String::new();
    body.push_str(&config.resolved_block());
    for (i, l) in history.iter().enumerate() {
        body.push_str(&format!("epoch{}-loss={l:.9}\n", i + 1));
    }
    write_text(&config.out_dir().join("train-face.txt"), config, &body)
}

// ---------------------------------------------------------------------------
// finetune-fused
// ---------------------------------------------------------------------------

pub fn finetune_fused(config: &RunConfig) -> Result<()> {
    log_config("finetune-fused", config);
    let face = models::load_model(&config.model_path("face-model"))?;
    if face.kind != ModelKind::FaceOnly {
        return Err(Error::Usage("face-model is not a face-alone model".into()));
    }
    let (faces, audio, _) = load_train_split(config)?;
    let seed = config.u64("seed")?;
    let pairs = models::pair_faces_with_audio(&faces, &audio, config.usize("pairs-per-face")?, seed)?;
    let tc = TrainingConfig {
        lr: config.finetune_lr()?,
        epochs: config.usize("finetune-epochs")?,
        seed,
        ..training_config(config)?
    };
    let mut fused = build_fused_model(face.arch.n_classes, seed, Some(&face))?;
    let history = models::train(&mut fused, &pairs, &tc)?;
    let path = config.model_path("fused-model");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    models::save_model(
        &fused,
        &path,
        &[
            ("tool".into(), TOOL_VERSION.into()),
            ("seed".into(), seed.to_string()),
            ("warm-start".into(), config.model_path("face-model").display().to_string()),
        ],
    )?;
    let losses: Vec<String> = history.iter().map(|l| format!("{l:.6}")).collect();
    println!("fine-tuned fused model on {} pairs: epoch losses {}", pairs.len(), losses.join(", "));
    println!("model={}", path.display());
    let mut body = String::new();
    body.push_str(&config.resolved_block());
    for (i, l) in history.iter().enumerate() {
        body.push_str(&format!("epoch{}-loss={l:.9}\n", i + 1));
    }
    write_text(&config.out_dir().join("finetune-fused.txt"), config, &body)
}

// ---------------------------------------------------------------------------
// rejection: shared featurization
// ---------------------------------------------------------------------------

fn load_models_for_variant(
    config: &RunConfig,
    variant: RejectionVariant,
) -> Result<(Option<Model>, Option<Model>)> {
    let face = if variant == RejectionVariant::FaceWithMfcc {
        Some(models::load_model(&config.model_path("face-model"))?)
    } else {
        None
    };
    let fused = if variant != RejectionVariant::FaceWithMfcc {
        Some(models::load_model(&config.model_path("fused-model"))?)
    } else {
        None
    };
    Ok((face, fused))
}

fn pair_features(
    variant: RejectionVariant,
    face_model: Option<&Model>,
    fused_model: Option<&Model>,
    faces: &[(sn_core::Tensor, usize)],
    audio: &[Vec<sn_core::audio::AudioFeatureVector>],
    negatives_per_positive: usize,
    seed: u64,
    threads: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let pairs = make_pair_dataset(faces, audio, negatives_per_positive, seed)?;
    let featurizer = PairFeaturizer::new(variant, face_model, fused_model, faces, threads)?;
    let features = sn_core::parallel::map_indexed(pairs.len(), threads.max(2), |i| {
        featurizer.feature(pairs[i].face_idx, &pairs[i].audio)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = pairs.iter().map(|p| p.label()).collect();
    Ok((features, labels))
}

pub fn train_reject(config: &RunConfig) -> Result<()> {
    log_config("train-reject", config);
    let variant = RejectionVariant::parse(config.str("variant"))?;
    let (face, fused) = load_models_for_variant(config, variant)?;
    let (faces, audio, _) = load_train_split(config)?;
    let seed = config.u64("seed")?;
    let threads = config.usize("threads")?;
    let (features, labels) = pair_features(
        variant,
        face.as_ref(),
        fused.as_ref(),
        &faces,
        &audio,
        config.usize("negatives-per-positive")?,
        seed,
        threads,
    )?;
    let model = train_margin(
        variant,
        &features,
        &labels,
        config.f64("lambda")?,
        config.usize("reject-epochs")?,
        seed,
    )?;
    let correct = features
        .iter()
        .zip(&labels)
        .filter(|(x, &y)| margin(&model, x).unwrap_or(0.0) * y > 0.0)
        .count();
    let train_acc = correct as f64 / labels.len() as f64;
    let path = config.model_path("reject-model");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_margin_model(
        &model,
        &path,
        &[
            ("tool".into(), TOOL_VERSION.into()),
            ("seed".into(), seed.to_string()),
        ],
    )?;
    println!(
        "trained variant-{} margin model on {} pairs, train accuracy {train_acc:.4}",
        variant.tag(),
        labels.len()
    );
    println!("model={}", path.display());
    let body = format!(
        "{}variant={}\npairs={}\ntrain-accuracy={train_acc:.6}\n",
        config.resolved_block(),
        variant.tag(),
        labels.len()
    );
    write_text(&config.out_dir().join("train-reject.txt"), config, &body)
}

pub fn eval_reject(config: &RunConfig) -> Result<()> {
    log_config("eval-reject", config);
    let margin_model = load_margin_model(&config.model_path("reject-model"))?;
    let variant = margin_model.variant;
    let (face, fused) = load_models_for_variant(config, variant)?;
    let manifest = load_manifest(&config.data_dir().join("test.tsv"))?;
    let threads = config.usize("threads")?;
    let faces = load_faces(&manifest, 50, 40, threads.max(2))?;
    let audio = load_utterance_features(&manifest, &MfccConfig::default(), threads.max(2))?;
    let seed = config.u64("seed")?;
    let (features, labels) = pair_features(
        variant,
        face.as_ref(),
        fused.as_ref(),
        &faces,
        &audio,
        config.usize("negatives-per-positive")?,
        seed,
        threads,
    )?;
    let accuracy = pair_accuracy(&margin_model, &features, &labels)?;
    println!(
        "variant-{} pair classification accuracy: {accuracy:.4} over {} pairs",
        variant.tag(),
        labels.len()
    );
    let body = format!(
        "{}variant={}\npairs={}\naccuracy={accuracy:.6}\n",
        config.resolved_block(),
        variant.tag(),
        labels.len()
    );
    write_text(&config.out_dir().join("eval-reject.txt"), config, &body)
}

fn pair_accuracy(model: &MarginModel, features: &[Vec<f64>], labels: &[f64]) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &y) in features.iter().zip(labels) {
        if margin(model, x)? * y > 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

// ---------------------------------------------------------------------------
// eval-face
// ---------------------------------------------------------------------------

pub fn eval_face(config: &RunConfig) -> Result<()> {
    log_config("eval-face", config);
    let model_key = if config.str("model").is_empty() {
        "face-model"
    } else {
        "model"
    };
    let model = models::load_model(&config.model_path(model_key))?;
    let manifest = load_manifest(&config.data_dir().join("test.tsv"))?;
    let threads = config.usize("threads")?;
    let faces = load_faces(&manifest, 50, 40, threads.max(2))?;
    let data: Vec<TrainSample> = match model.kind {
        ModelKind::FaceOnly => faces
            .iter()
            .map(|(img, s)| TrainSample { image: img.clone(), audio: None, label: *s })
            .collect(),
        ModelKind::FaceAudio => {
            // Matched pairs: each face drawn against a same-subject utterance.
            let audio = load_utterance_features(&manifest, &MfccConfig::default(), threads.max(2))?;
            let mut rng = Rng::new(config.u64("seed")?);
            faces
                .iter()
                .map(|(img, s)| {
                    let pool = &audio[*s];
                    TrainSample {
                        image: img.clone(),
                        audio: Some(pool[rng.below(pool.len())].clone()),
                        label: *s,
                    }
                })
                .collect()
        }
    };
    let accuracy = models::evaluate_accuracy(&model, &data, threads.max(2))?;
    let mut confusion = ConfusionMatrix::new(manifest.classes.len());
    for sample in &data {
        let (pred, _) = models::predict_identity(&model, &sample.image, sample.audio.as_ref())?;
        confusion.record(sample.label, pred);
    }
    println!(
        "{} model accuracy: {accuracy:.4} over {} samples",
        match model.kind {
            ModelKind::FaceOnly => "face-alone",
            ModelKind::FaceAudio => "face-audio",
        },
        data.len()
    );
    write_text(
        &config.out_dir().join("confusion.tsv"),
        config,
        &confusion.to_tsv(&manifest.classes),
    )?;
    let body = format!(
        "{}samples={}\naccuracy={accuracy:.6}\n",
        config.resolved_block(),
        data.len()
    );
    write_text(&config.out_dir().join("eval-face.txt"), config, &body)
}

// ---------------------------------------------------------------------------
// name
// ---------------------------------------------------------------------------

pub fn name(config: &RunConfig) -> Result<()> {
    log_config("name", config);
    let margin_model = load_margin_model(&config.model_path("reject-model"))?;
    let face = if margin_model.variant == RejectionVariant::FaceWithMfcc {
        Some(models::load_model(&config.model_path("face-model"))?)
    } else {
        None
    };
    let fused = models::load_model(&config.model_path("fused-model"))?;
    if fused.kind != ModelKind::FaceAudio {
        return Err(Error::Usage("fused-model is not a face-audio model".into()));
    }
    let manifest = load_manifest(&config.data_dir().join("frames.tsv"))?;
    let threads = config.usize("threads")?;
    let frames = load_speaking_frames(&manifest, &MfccConfig::default(), threads.max(2))?;
    let threshold = config.f64("threshold")?;
    let results = name_frames(
        face.as_ref(),
        &fused,
        &margin_model,
        &frames,
        threshold,
        threads.max(2),
    )?;

    let mut naming_tsv = String::from(
        "frame_id\ttimestamp\tface_index\tidentity\tmargin\tprobability\trejected\n",
    );
    for r in &results {
        naming_tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\n",
            r.frame_id,
            r.timestamp,
            r.face_index,
            manifest.classes[r.identity],
            r.margin,
            r.probability,
            u8::from(r.rejected_all)
        ));
    }
    write_text(&config.out_dir().join("naming.tsv"), config, &naming_tsv)?;

    let intervals = export_timeline(&results, config.f64("gap-tolerance")?);
    let mut timeline_tsv = String::from("identity\tstart_seconds\tend_seconds\n");
    for iv in &intervals {
        timeline_tsv.push_str(&format!(
            "{}\t{}\t{}\n",
            manifest.classes[iv.identity], iv.start, iv.end
        ));
    }
    write_text(&config.out_dir().join("timeline.tsv"), config, &timeline_tsv)?;
    println!(
        "named {} frames -> naming.tsv, {} speaking intervals -> timeline.tsv",
        results.len(),
        intervals.len()
    );

    if frames.iter().all(|f| f.truth.is_some()) {
        let eval = evaluate_naming(&results, &frames, manifest.classes.len())?;
        println!("speaker naming accuracy: {:.4}", eval.accuracy);
        write_text(
            &config.out_dir().join("naming-confusion.tsv"),
            config,
            &eval.confusion.to_tsv(&manifest.classes),
        )?;
        let per_class: Vec<String> = manifest
            .classes
            .iter()
            .zip(&eval.per_class)
            .map(|(c, a)| format!("accuracy-{c}={a:.6}"))
            .collect();
        let body = format!(
            "{}frames={}\naccuracy={:.6}\n{}\n",
            config.resolved_block(),
            results.len(),
            eval.accuracy,
            per_class.join("\n")
        );
        write_text(&config.out_dir().join("naming-metrics.txt"), config, &body)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

pub fn params(config: &RunConfig) -> Result<()> {
    let classes = config.usize("classes")?;
    for (label, arch) in [("face-alone", face_arch(classes)), ("face-audio", fused_arch(classes))] {
        println!("{label} ({classes} classes)");
        println!("  {:<8} {:<28} {:>12}", "layer", "shape", "parameters");
        let shapes = arch.conv_output_shapes()?;
        let mut in_c = arch.in_channels;
        let mut total = 0usize;
        for (i, (spec, out_shape)) in arch.conv.iter().zip(&shapes).enumerate() {
            let count = spec.out_maps * (in_c * spec.kh * spec.kw + 1);
            println!(
                "  conv{:<4} {:<28} {:>12}",
                i + 1,
                format!("{}x{}x{} -> {:?}", in_c, spec.kh, spec.kw, out_shape),
                count
            );
            in_c = spec.out_maps;
            total += count;
        }
        let dense = arch.dense_dims()?;
        let n_dense = dense.len();
        for (i, (din, dout)) in dense.iter().enumerate() {
            let name = if i + 1 == n_dense {
                "output".to_string()
            } else {
                format!("dense{}", i + 1)
            };
            let count = din * dout + dout;
            println!("  {name:<8} {:<28} {count:>12}", format!("{din} -> {dout}"));
            total += count;
        }
        println!("  {:<8} {:<28} {total:>12}", "total", "");
        assert_eq!(total, arch.param_count()?);
    }
    Ok(())
}
