use std::fs;

use lowlight_fsda::io::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_dataset, load_scene, save_checkpoint, save_dataset,
    save_scene, write_atomic, GT_FILE, META_FILE, SHORT_FILE,
};
use lowlight_fsda::nets::{init_bundle, Mode};
use lowlight_fsda::synth::{default_profiles, generate_pairs, PairSettings};
use lowlight_fsda::Error;

#[test]
fn scene_round_trip_within_quantization() {
    let (a, _) = default_profiles();
    let pair = generate_pairs(&a, 1, 64, 96, 11, &PairSettings::default()).unwrap().remove(0);
    let tmp = tempfile::tempdir().unwrap();
    save_scene(tmp.path(), &pair).unwrap();
    let back = load_scene(tmp.path()).unwrap();
    assert_eq!(back.short, pair.short);
    assert_eq!(back.scene_id, pair.scene_id);
    assert_eq!(back.gt_pp, pair.gt_pp, "8-bit values are exact");
    let max_err = back
        .gt
        .pixels
        .data()
        .iter()
        .zip(pair.gt.pixels.data())
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
        .fold(0.0, f64::max);
    assert!(max_err <= 1.0 / 65535.0, "{max_err}");
}

#[test]
fn pgm_samples_are_big_endian() {
    let (a, _) = default_profiles();
    let pair = generate_pairs(&a, 1, 32, 32, 3, &PairSettings::default()).unwrap().remove(0);
    let tmp = tempfile::tempdir().unwrap();
    save_scene(tmp.path(), &pair).unwrap();
    let bytes = fs::read(tmp.path().join(SHORT_FILE)).unwrap();
    let header = b"P5\n32 32\n65535\n";
    assert!(bytes.starts_with(header));
    let first = u16::from_be_bytes([bytes[header.len()], bytes[header.len() + 1]]);
    assert_eq!(first, pair.short.mosaic[0]);
}

#[test]
fn dataset_order_is_generation_order() {
    let (_, b) = default_profiles();
    let pairs = generate_pairs(&b, 3, 32, 32, 5, &PairSettings::default()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_dataset(tmp.path(), &pairs).unwrap();
    assert_eq!(load_dataset(tmp.path()).unwrap().iter().map(|p| &p.scene_id).collect::<Vec<_>>(),
        pairs.iter().map(|p| &p.scene_id).collect::<Vec<_>>());
}

#[test]
fn sidecar_errors_name_the_field() {
    let (a, _) = default_profiles();
    let pair = generate_pairs(&a, 1, 32, 32, 1, &PairSettings::default()).unwrap().remove(0);
    let tmp = tempfile::tempdir().unwrap();
    save_scene(tmp.path(), &pair).unwrap();
    let meta = tmp.path().join(META_FILE);
    let text = fs::read_to_string(&meta).unwrap();

    let without: String = text.lines().filter(|l| !l.contains("\"ratio\"")).collect::<Vec<_>>().join("\n");
    fs::write(&meta, without).unwrap();
    let err = load_scene(tmp.path()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("ratio"), "{err}");

    let extra = text.replacen('{', "{\n  \"ratoi\": 1.0,", 1);
    fs::write(&meta, extra).unwrap();
    let err = load_scene(tmp.path()).unwrap_err();
    assert!(err.to_string().contains("ratoi"), "{err}");
}

#[test]
fn malformed_ppm_header_reports_byte_offset() {
    let (a, _) = default_profiles();
    let pair = generate_pairs(&a, 1, 32, 32, 1, &PairSettings::default()).unwrap().remove(0);
    let tmp = tempfile::tempdir().unwrap();
    save_scene(tmp.path(), &pair).unwrap();
    let gt = tmp.path().join(GT_FILE);
    let mut bytes = fs::read(&gt).unwrap();
    bytes[3] = b'z';
    fs::write(&gt, bytes).unwrap();
    let err = load_scene(tmp.path()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("byte 3"), "{err}");
}

#[test]
fn checkpoint_file_round_trip_and_aliasing() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    let bundle = init_bundle(2, Mode::CombinedEncoder, 4).unwrap();
    save_checkpoint(&path, &bundle).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.mode, Mode::CombinedEncoder);
    assert_eq!(back.encoder_source, back.encoder_target, "both domains index one encoder");
    assert_eq!(encode_checkpoint(&back), fs::read(&path).unwrap());
    // nothing but the checkpoint is left in the directory
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
}

#[test]
fn every_single_byte_corruption_is_detected() {
    let bytes = encode_checkpoint(&init_bundle(4, Mode::TargetOnly, 4).unwrap());
    let path = std::path::Path::new("mem");
    let step = (bytes.len() / 1500).max(1);
    let mut positions: Vec<usize> = (0..64).chain((64..bytes.len()).step_by(step)).collect();
    positions.extend(bytes.len() - 4..bytes.len());
    for pos in positions {
        for flip in [0x01u8, 0x80, 0xff] {
            let mut bad = bytes.clone();
            bad[pos] ^= flip;
            match decode_checkpoint(&bad, path) {
                Err(Error::Corruption { .. }) | Err(Error::Format { .. }) => {}
                other => panic!("byte {pos} flip {flip:#x} not detected: {:?}", other.map(|b| b.mode)),
            }
        }
    }
}

#[test]
fn atomic_write_replaces_whole_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("f.bin");
    write_atomic(&path, b"first version, long").unwrap();
    write_atomic(&path, b"second").unwrap();
    assert_eq!(fs::read(&path).unwrap(), b"second");
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
}
