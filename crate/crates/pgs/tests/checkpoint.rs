use std::path::Path;

use pgs::archive::Archive;
use pgs::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, to_archive, Provenance};
use pgs::PgsError;
use pgs_core::config::{ArchConfig, PipelineConfig, TrainConfig};
use pgs_core::feature_codec::LossNetwork;
use pgs_core::params::ModelParameters;

fn params(c: usize, seed: u64) -> ModelParameters {
    let arch = ArchConfig::tiny(c);
    ModelParameters::init(&arch, &LossNetwork::for_arch(&arch, None).unwrap(), seed).unwrap()
}

fn bits(p: &ModelParameters) -> Vec<(String, Vec<usize>, Vec<u64>)> {
    p.iter()
        .map(|(n, t)| {
            (
                n.to_string(),
                t.shape().to_vec(),
                t.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

#[test]
fn save_then_load_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgs");
    let p = params(8, 3);
    let prov = Provenance {
        iterations_done: 12,
        train: Some(TrainConfig::default()),
        pipeline: Some(PipelineConfig::default()),
    };
    save_checkpoint(&p, &prov, &path).unwrap();
    let (q, snap) = load_checkpoint(&path).unwrap();
    assert_eq!(bits(&p), bits(&q));
    assert_eq!(q.arch(), p.arch());
    assert_eq!(snap.checkpoint.iterations_done, 12);
    assert_eq!(snap.train.unwrap().batch_size, 8);
    let header = Archive::load(&path).unwrap().header;
    assert!(
        header.contains("[arch]") && header.contains("tiny_channels = 8"),
        "{header}"
    );
}

#[test]
fn truncated_files_give_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgs");
    save_checkpoint(&params(8, 1), &Provenance::default(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let e = load_checkpoint(&path).unwrap_err();
        assert!(matches!(e, PgsError::Format { .. }), "cut {cut}: {e}");
        assert!(e.to_string().contains("m.pgs"));
    }
    assert!(matches!(
        load_checkpoint(Path::new("/nonexistent/m.pgs")),
        Err(PgsError::Io { .. })
    ));
}

#[test]
fn tiny_checkpoint_is_rejected_by_a_full_config_with_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgs");
    save_checkpoint(&params(8, 1), &Provenance::default(), &path).unwrap();
    let e = load_checkpoint_for(&path, &ArchConfig::full()).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    let msg = e.to_string();
    assert!(
        msg.contains("`enc.conv1_1.weight` is (2,3,3,3) but (64,3,3,3) is required"),
        "{msg}"
    );
    assert!(msg.contains("tiny") && msg.contains("full"));
    let e = load_checkpoint_for(&path, &ArchConfig::tiny(16)).unwrap_err();
    assert!(e.to_string().contains("gnn.s2c.gat.wb"));
    load_checkpoint_for(&path, &ArchConfig::tiny(8)).unwrap();
}

#[test]
fn parameter_version_mismatch_is_incompatible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgs");
    let mut archive = to_archive(&params(8, 1), &Provenance::default());
    archive.header = archive.header.replace("parameter_version = 1", "parameter_version = 2");
    archive.save(&path).unwrap();
    let e = load_checkpoint(&path).unwrap_err();
    assert_eq!(e.exit_code(), 3, "{e}");
    assert!(e.to_string().contains("version 2"));
}

#[test]
fn missing_or_extra_arrays_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgs");
    let mut archive = to_archive(&params(8, 1), &Provenance::default());
    archive.arrays.remove("dec.conv1.bias");
    archive.arrays.insert("stray".into(), pgs_core::Tensor::zeros(&[1]));
    archive.save(&path).unwrap();
    let msg = load_checkpoint(&path).unwrap_err().to_string();
    assert!(
        msg.contains("`dec.conv1.bias` missing") && msg.contains("unexpected `stray`"),
        "{msg}"
    );
}
