//! Exercises the C interface through its Rust symbols.

use std::ffi::{c_char, CString};
use std::ptr;

use vlseg::dataset::{DataConfig, Dataset};
use vlseg::eval::{NetPredictor, Predictor};
use vlseg::nn::{Checkpoint, FusionNet, NetworkConfig};
use vlseg::synth::SceneConfig;
use vlseg_ffi::*;

fn last_error() -> String {
    let need = unsafe { vlseg_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0u8; need];
    unsafe { vlseg_last_error(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    buf.pop();
    String::from_utf8(buf).unwrap()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn fixture(name: &str) -> CString {
    let path = format!("{}/../core/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    cstr(&std::fs::read_to_string(path).unwrap())
}

struct Setup {
    _dir: tempfile::TempDir,
    data: CString,
    checkpoint: CString,
    dataset: Dataset,
    ck: Checkpoint,
}

fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DataConfig {
        scene: SceneConfig::desk_scaled(16),
        n_train: 2,
        n_val: 1,
        n_test: 1,
        seed: 4,
        embedder: Default::default(),
    };
    let data = dir.path().join("data");
    let dataset = Dataset::write(&cfg, &data).unwrap();
    let net = NetworkConfig::tiny(vec![4, 8, 8], 2, vlseg::text::DEFAULT_EMBED_DIM);
    let params: Vec<f32> = FusionNet::new(net.clone()).unwrap().init_params(3);
    let ck = Checkpoint::new(net, params).unwrap();
    let checkpoint = dir.path().join("net.ckpt");
    ck.save(&checkpoint).unwrap();
    Setup {
        data: cstr(data.to_str().unwrap()),
        checkpoint: cstr(checkpoint.to_str().unwrap()),
        _dir: dir,
        dataset,
        ck,
    }
}

#[test]
fn segment_matches_the_library() {
    let s = setup();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(vlseg_dataset_open(s.data.as_ptr(), &mut ds), VlsegStatus::Ok);
        let mut n = 0;
        assert_eq!(vlseg_dataset_len(ds, &mut n), VlsegStatus::Ok);
        assert_eq!(n, 4);

        let mut dims = [0usize; 3];
        assert_eq!(vlseg_dataset_case_dims(ds, 3, dims.as_mut_ptr()), VlsegStatus::Ok);
        assert_eq!(dims, [16, 16, 16]);
        let mut volume = vec![0f32; 16 * 16 * 16];
        assert_eq!(
            vlseg_dataset_case_volume(ds, 3, volume.as_mut_ptr(), volume.len()),
            VlsegStatus::Ok
        );
        let expected = s.dataset.case(3).unwrap().volume;
        assert_eq!(volume, expected.data);

        let mut pred = ptr::null_mut();
        assert_eq!(vlseg_predictor_load(s.checkpoint.as_ptr(), ds, &mut pred), VlsegStatus::Ok);
        vlseg_dataset_free(ds);
        assert_eq!(vlseg_predictor_set_threshold(pred, 0.3), VlsegStatus::Ok);

        let prompt = "sphere in the left half";
        let mut mask = vec![7u8; volume.len()];
        let mut fg = usize::MAX;
        let p = cstr(prompt);
        assert_eq!(
            vlseg_predictor_segment(pred, volume.as_ptr(), dims.as_ptr(), p.as_ptr(), mask.as_mut_ptr(), &mut fg),
            VlsegStatus::Ok
        );
        vlseg_predictor_free(pred);

        let mut reference = NetPredictor::new(s.ck.clone(), s.dataset.prompt_embedder().unwrap()).unwrap();
        reference.threshold = 0.3;
        let m = reference.predict(&expected, prompt).unwrap();
        assert_eq!(mask, m.data);
        assert_eq!(fg, m.count());
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let s = setup();
    unsafe {
        let mut ds = ptr::null_mut();
        let missing = cstr("/nonexistent/corpus");
        assert_eq!(vlseg_dataset_open(missing.as_ptr(), &mut ds), VlsegStatus::Io);
        assert!(last_error().contains("/nonexistent/corpus"));
        assert!(ds.is_null());
        assert_eq!(vlseg_dataset_open(ptr::null(), &mut ds), VlsegStatus::NullPointer);

        assert_eq!(vlseg_dataset_open(s.data.as_ptr(), &mut ds), VlsegStatus::Ok);
        assert_eq!(last_error(), "");
        let mut dims = [0usize; 3];
        assert_eq!(vlseg_dataset_case_dims(ds, 99, dims.as_mut_ptr()), VlsegStatus::OutOfRange);
        let mut small = vec![0f32; 10];
        assert_eq!(
            vlseg_dataset_case_volume(ds, 0, small.as_mut_ptr(), small.len()),
            VlsegStatus::BufferTooSmall
        );

        let mut pred = ptr::null_mut();
        assert_eq!(vlseg_predictor_load(s.data.as_ptr(), ds, &mut pred), VlsegStatus::Io);
        assert_eq!(vlseg_predictor_load(s.checkpoint.as_ptr(), ds, &mut pred), VlsegStatus::Ok);
        assert_eq!(vlseg_predictor_set_threshold(pred, 1.5), VlsegStatus::InvalidInput);

        let volume = vec![0f32; 10 * 16 * 16];
        let bad_dims = [10usize, 16, 16];
        let mut mask = vec![0u8; volume.len()];
        let p = cstr("sphere");
        assert_eq!(
            vlseg_predictor_segment(pred, volume.as_ptr(), bad_dims.as_ptr(), p.as_ptr(), mask.as_mut_ptr(), ptr::null_mut()),
            VlsegStatus::Shape
        );
        let bad = [0x66u8, 0xff, 0];
        assert_eq!(
            vlseg_predictor_segment(
                pred,
                volume.as_ptr(),
                bad_dims.as_ptr(),
                bad.as_ptr().cast(),
                mask.as_mut_ptr(),
                ptr::null_mut()
            ),
            VlsegStatus::InvalidUtf8
        );
        vlseg_predictor_free(pred);
        vlseg_dataset_free(ds);
        vlseg_dataset_free(ptr::null_mut());
        vlseg_predictor_free(ptr::null_mut());
    }
}

#[test]
fn last_error_truncates() {
    unsafe {
        let mut ds = ptr::null_mut();
        vlseg_dataset_open(ptr::null(), &mut ds);
        let full = last_error();
        let mut buf = [1u8; 5];
        let need = vlseg_last_error(buf.as_mut_ptr().cast(), buf.len());
        assert_eq!(need, full.len() + 1);
        assert_eq!(&buf[..4], &full.as_bytes()[..4]);
        assert_eq!(buf[4], 0);
    }
}

#[test]
fn vocabulary_checks() {
    let schema = fixture("liver_schema.txt");
    let mut n = usize::MAX;
    unsafe {
        assert_eq!(
            vlseg_validate_vocabulary(schema.as_ptr(), fixture("liver_vocab.txt").as_ptr(), &mut n),
            VlsegStatus::Ok
        );
        assert_eq!(n, 0);
        assert_eq!(
            vlseg_validate_vocabulary(schema.as_ptr(), fixture("bad_background.txt").as_ptr(), &mut n),
            VlsegStatus::Ok
        );
        assert_eq!(n, 1);
        assert!(last_error().starts_with("decorated-background"));
        assert_eq!(
            vlseg_validate_vocabulary(cstr("{'labels': {'liver': 1}}").as_ptr(), schema.as_ptr(), &mut n),
            VlsegStatus::Parse
        );

        let mut c = -1;
        assert_eq!(vlseg_check_conflict_record(fixture("conflict_none.txt").as_ptr(), &mut c), VlsegStatus::Ok);
        assert_eq!(c, 0);
        for f in ["conflict_bad_severity.txt", "conflict_inconsistent.txt"] {
            assert_eq!(vlseg_check_conflict_record(fixture(f).as_ptr(), &mut c), VlsegStatus::Parse, "{f}");
        }
    }
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/vlseg.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in [
        "vlseg_last_error",
        "vlseg_dataset_open",
        "vlseg_dataset_free",
        "vlseg_predictor_load",
        "vlseg_predictor_segment",
        "vlseg_predictor_free",
        "vlseg_validate_vocabulary",
        "vlseg_check_conflict_record",
        "VLSEG_STATUS_OK = 0",
    ] {
        assert!(text.contains(sym), "{sym}");
    }
    // compile it when a C compiler is around
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
