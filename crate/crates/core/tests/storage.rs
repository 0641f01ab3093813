use std::fs;
use std::path::Path;

use moe_compress::basis::{Activation, TrainConfig};
use moe_compress::io::{
    load_compressed, load_model, parameter_report, save_compressed, save_model, CompressedManifest,
    ModelManifest,
};
use moe_compress::model::{generate_synthetic, MoEModel, SyntheticSpec};
use moe_compress::pipeline::{
    compress_model, generate_tokens, run_calibration, AllocationMode, CompressedModel, PipelineConfig,
    TokenPreset,
};
use moe_compress::routing::TraceFile;
use moe_compress::MatrixKind;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n: 8,
        p: 8,
        d: 16,
        layers: 2,
        top_k: 2,
        spectral_decay: 0.5,
        router_skew: 1.5,
        seed: 21,
    }
}

fn setup() -> (MoEModel, TraceFile) {
    let m = generate_synthetic(&small_spec()).unwrap();
    let t = run_calibration(&m, &generate_tokens(m.d, 500, 4, TokenPreset::Gaussian)).unwrap();
    (m, t)
}

fn config(ratio: f64) -> PipelineConfig {
    PipelineConfig {
        ratio,
        train: TrainConfig {
            steps: 60,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    }
}

fn compressed() -> (MoEModel, CompressedModel) {
    let (m, t) = setup();
    let c = compress_model(&m, &t, &config(0.5)).unwrap();
    (m, c)
}

fn read_manifest<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn flip_byte(path: &Path, at: usize) {
    let mut bytes = fs::read(path).unwrap();
    bytes[at] ^= 0x40;
    fs::write(path, bytes).unwrap();
}

#[test]
fn model_round_trip_is_exact() {
    let (m, _) = setup();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_model(&m, a.path()).unwrap();
    let back = load_model(a.path()).unwrap();
    assert_eq!(back, m);
    save_model(&back, b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn generation_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_model(&generate_synthetic(&small_spec()).unwrap(), a.path()).unwrap();
    save_model(&generate_synthetic(&small_spec()).unwrap(), b.path()).unwrap();
    let ma: ModelManifest = read_manifest(&a.path().join("model.json"));
    let mb: ModelManifest = read_manifest(&b.path().join("model.json"));
    assert_eq!(ma, mb);
}

#[test]
fn flipped_model_byte_names_the_tensor() {
    let (m, _) = setup();
    let dir = tempfile::tempdir().unwrap();
    save_model(&m, dir.path()).unwrap();
    flip_byte(&dir.path().join("tensors/layer1.expert3.gate.bin"), 17);
    let err = load_model(dir.path()).unwrap_err();
    assert_eq!(err.code(), "integrity");
    assert!(err.to_string().contains("layer1.expert3.gate"), "{err}");
}

#[test]
fn missing_or_truncated_blob_is_a_format_error() {
    let (m, _) = setup();
    let dir = tempfile::tempdir().unwrap();
    save_model(&m, dir.path()).unwrap();
    let blob = dir.path().join("tensors/layer0.router.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert_eq!(load_model(dir.path()).unwrap_err().code(), "format");
    fs::remove_file(&blob).unwrap();
    assert_eq!(load_model(dir.path()).unwrap_err().code(), "format");
}

#[test]
fn manifest_shapes_are_checked_against_the_architecture() {
    let (m, _) = setup();
    let dir = tempfile::tempdir().unwrap();
    save_model(&m, dir.path()).unwrap();
    let path = dir.path().join("model.json");
    let mut man: ModelManifest = read_manifest(&path);
    let e = man.tensors.iter_mut().find(|t| t.name == "layer0.expert0.up").unwrap();
    e.shape = [16, 8];
    fs::write(&path, serde_json::to_string(&man).unwrap()).unwrap();
    assert_eq!(load_model(dir.path()).unwrap_err().code(), "format");
}

#[test]
fn compressed_round_trip_is_exact() {
    let (_, c) = compressed();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_compressed(&c, a.path()).unwrap();
    let back = load_compressed(a.path()).unwrap();
    assert_eq!(back, c);
    save_compressed(&back, b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn reconstruction_survives_storage() {
    let (_, c) = compressed();
    let dir = tempfile::tempdir().unwrap();
    save_compressed(&c, dir.path()).unwrap();
    let back = load_compressed(dir.path()).unwrap();
    for l in 0..2 {
        for kind in MatrixKind::COMPRESSED {
            let before = c.reconstruct(l, kind).unwrap();
            let after = back.reconstruct(l, kind).unwrap();
            for (x, y) in before.iter().zip(&after) {
                let worst = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(worst <= 1e-6, "{worst}");
            }
        }
    }
}

#[test]
fn manifest_ratio_matches_report() {
    let (m, c) = compressed();
    let dir = tempfile::tempdir().unwrap();
    let man = save_compressed(&c, dir.path()).unwrap();
    let report = parameter_report(&m, &c).unwrap();
    assert!((man.parameters.achieved_ratio - report.achieved_ratio).abs() < 1e-6);
    assert!(report.index_metadata_bytes > 0);
    assert_eq!(report.original, 2 * 2 * 8 * 8 * 16);
}

#[test]
fn compressed_version_mismatch_is_rejected() {
    let (_, c) = compressed();
    let dir = tempfile::tempdir().unwrap();
    save_compressed(&c, dir.path()).unwrap();
    let path = dir.path().join("compression.json");
    let mut man: CompressedManifest = read_manifest(&path);
    man.version = 2;
    fs::write(&path, serde_json::to_string(&man).unwrap()).unwrap();
    assert_eq!(load_compressed(dir.path()).unwrap_err().code(), "format");
}

#[test]
fn corrupted_compressed_parts_are_caught() {
    let (_, c) = compressed();
    let dir = tempfile::tempdir().unwrap();
    save_compressed(&c, dir.path()).unwrap();
    flip_byte(&dir.path().join("tensors/layer0.gate.B.1.bin"), 0);
    let err = load_compressed(dir.path()).unwrap_err();
    assert_eq!(err.code(), "integrity");
    assert!(err.to_string().contains("layer0.gate.B.1"));

    let dir = tempfile::tempdir().unwrap();
    save_compressed(&c, dir.path()).unwrap();
    flip_byte(&dir.path().join("proj/up.rfidproj"), 40);
    assert_eq!(load_compressed(dir.path()).unwrap_err().code(), "integrity");

    let dir = tempfile::tempdir().unwrap();
    save_compressed(&c, dir.path()).unwrap();
    fs::remove_file(dir.path().join("tensors/layer1.up.eta.bin")).unwrap();
    assert_eq!(load_compressed(dir.path()).unwrap_err().code(), "format");
}

#[test]
fn parameter_counts_must_match_blobs() {
    let (_, c) = compressed();
    let dir = tempfile::tempdir().unwrap();
    save_compressed(&c, dir.path()).unwrap();
    let path = dir.path().join("compression.json");
    let mut man: CompressedManifest = read_manifest(&path);
    man.layers[0].kinds[0].params.b += 1;
    fs::write(&path, serde_json::to_string(&man).unwrap()).unwrap();
    assert_eq!(load_compressed(dir.path()).unwrap_err().code(), "format");
}

#[test]
fn full_rank_reports_negative_savings() {
    let (m, t) = setup();
    let cfg = PipelineConfig {
        allocation: AllocationMode::Full,
        residual_fraction: 0.0,
        train: TrainConfig {
            steps: 0,
            activation: Activation::Identity,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let c = compress_model(&m, &t, &cfg).unwrap();
    let r = parameter_report(&m, &c).unwrap();
    assert!(r.achieved_ratio <= 0.0, "{}", r.achieved_ratio);
    assert_eq!(r.index_metadata_bytes, 0);
}

#[test]
fn achieved_ratio_stays_within_floor_slack() {
    // n=8, k=4, p=8, d=16: m=2, kp+d=48, n*m=16, a=15 per group.
    let (m, t) = setup();
    for ratio in [0.3, 0.5, 0.6] {
        let c = compress_model(&m, &t, &config(ratio)).unwrap();
        let r = parameter_report(&m, &c).unwrap();
        let p0 = 8.0 * 8.0 * 16.0;
        let slack = (2.0 * 48.0 + 16.0 + 2.0 * 15.0) / p0;
        assert!(r.achieved_ratio >= ratio - 48.0 / 1024.0);
        assert!((r.achieved_ratio - ratio).abs() <= slack, "{ratio} {}", r.achieved_ratio);
        for layer in &r.layers {
            for k in &layer.kinds {
                assert!(k.a + k.b >= 2 * 48);
            }
        }
    }
}

#[test]
fn architecture_mismatch_is_a_shape_error() {
    let (_, c) = compressed();
    let other = generate_synthetic(&SyntheticSpec {
        layers: 1,
        ..small_spec()
    })
    .unwrap();
    assert_eq!(parameter_report(&other, &c).unwrap_err().code(), "shape");
}

#[test]
fn trace_file_round_trip() {
    let (_, t) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.json");
    t.save(&path).unwrap();
    assert_eq!(TraceFile::load(&path).unwrap(), t);
}
