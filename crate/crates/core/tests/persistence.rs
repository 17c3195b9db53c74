use nova_core::model::{GenOptions, Nova, NovaConfig};
use nova_core::train::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
use nova_core::NovaError;

fn small() -> NovaConfig {
    NovaConfig {
        height: 16,
        width: 16,
        d: 32,
        heads: 4,
        temporal_depth: 1,
        spatial_enc_depth: 1,
        spatial_dec_depth: 1,
        scale_shift_rank: 8,
        head_width: 32,
        head_blocks: 1,
        frames: 3,
        infer_steps: 4,
        ar_steps: 4,
        seed: 5,
        ..NovaConfig::default()
    }
}

#[test]
fn save_load_save_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (model, store) = Nova::new::<f32>(small()).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&a, &store, &model.cfg).unwrap();
    let (m2, s2) = load_checkpoint::<f32>(&a).unwrap();
    assert_eq!(m2.cfg, model.cfg);
    save_checkpoint(&b, &s2, &m2.cfg).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(&bytes[..4], b"NOVA");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
}

#[test]
fn generation_after_reload_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (model, store) = Nova::new::<f32>(small()).unwrap();
    let opts = GenOptions::from_config(&model.cfg, 7, 1.0, 42);
    let before = model.generate_video(&store, &opts).unwrap().tokens;
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&p, &store, &model.cfg).unwrap();
    let (m2, s2) = load_checkpoint::<f32>(&p).unwrap();
    assert_eq!(m2.generate_video(&s2, &opts).unwrap().tokens, before);
}

#[test]
fn corrupted_files_are_rejected() {
    let (model, store) = Nova::new::<f32>(small()).unwrap();
    let mut good = Vec::new();
    write_checkpoint(&mut good, &store, &model.cfg).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read_checkpoint::<f32>(&mut bad_magic.as_slice()), Err(NovaError::Format(_))));

    let mut bad_version = good.clone();
    bad_version[4] = 9;
    assert!(matches!(read_checkpoint::<f32>(&mut bad_version.as_slice()), Err(NovaError::Format(_))));

    for cut in [3, 10, good.len() / 2, good.len() - 1] {
        let r = read_checkpoint::<f32>(&mut &good[..cut]);
        assert!(r.is_err(), "truncated at {cut} accepted");
    }

    let mut trailing = good.clone();
    trailing.push(0);
    assert!(read_checkpoint::<f32>(&mut trailing.as_slice()).is_err());
}

#[test]
fn shape_mismatch_is_rejected() {
    let (_, store) = Nova::new::<f32>(small()).unwrap();
    let other = NovaConfig { head_width: 16, ..small() };
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &store, &other).unwrap();
    assert!(matches!(read_checkpoint::<f32>(&mut buf.as_slice()), Err(NovaError::Shape(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let r = load_checkpoint::<f32>(std::path::Path::new("/definitely/not/here.ckpt"));
    assert!(matches!(r, Err(NovaError::Io(_))));
}
