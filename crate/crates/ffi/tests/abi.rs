use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use gedi_core::checkpoint::save_checkpoint;
use gedi_core::synth::{sample_corpus, SourceSpec};
use gedi_core::{decode, train, ControlCodeSet, GenerationConfig, InitScheme, TabularCCLM, TrainConfig};
use gedi_ffi::*;

fn models(dir: &Path) -> (TabularCCLM, TabularCCLM) {
    let corpus = sample_corpus(&SourceSpec::s1(), 400, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let guide_init = TabularCCLM::new(
        corpus.vocab.clone(),
        ControlCodeSet::new(&corpus.classes).unwrap(),
        0,
        InitScheme::Zeros,
        0,
    )
    .unwrap();
    let (guide, _) = train(&guide_init, &corpus, None, &cfg).unwrap();
    let base_init = TabularCCLM::new(
        corpus.vocab.clone(),
        ControlCodeSet::unconditional(),
        0,
        InitScheme::Zeros,
        0,
    )
    .unwrap();
    let (base, _) = train(&base_init, &corpus, None, &TrainConfig { lambda: 1.0, ..cfg }).unwrap();
    save_checkpoint(&guide, dir.join("guide.ckpt")).unwrap();
    save_checkpoint(&base, dir.join("base.ckpt")).unwrap();
    (base, guide)
}

fn load(path: &Path) -> *mut GediModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { gedi_model_load(c.as_ptr(), &mut out) }, GediStatus::Ok);
    assert!(!out.is_null());
    out
}

fn last_error() -> String {
    let p = gedi_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn handles_reproduce_the_core_results() {
    let dir = tempfile::tempdir().unwrap();
    let (base, guide) = models(dir.path());
    let b = load(&dir.path().join("base.ckpt"));
    let g = load(&dir.path().join("guide.ckpt"));
    unsafe {
        assert_eq!(gedi_model_vocab_size(g), 2);
        assert_eq!(gedi_model_class_count(g), 2);
        assert_eq!(gedi_model_vocab_size(ptr::null()), 0);

        let name = CString::new("c1").unwrap();
        let mut class = usize::MAX;
        assert_eq!(gedi_model_class_id(g, name.as_ptr(), &mut class), GediStatus::Ok);
        assert_eq!(class, 1);

        let text = CString::new("A B B").unwrap();
        let mut ids = [0usize; 8];
        let mut len = 0;
        assert_eq!(
            gedi_model_encode(g, text.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut len),
            GediStatus::Ok
        );
        assert_eq!(&ids[..len], &[0, 1, 1]);

        let mut lp = 0.0;
        assert_eq!(gedi_sequence_logprob(g, 1, ids.as_ptr(), len, &mut lp), GediStatus::Ok);
        assert_eq!(lp.to_bits(), guide.sequence_logprob(1, &ids[..len]).unwrap().to_bits());

        let mut post = [0.0; 2];
        let mut predicted = usize::MAX;
        assert_eq!(
            gedi_classify(g, ids.as_ptr(), len, &mut predicted, post.as_mut_ptr(), 2),
            GediStatus::Ok
        );
        let expected = gedi_core::eval::classify(&guide, &ids[..len]).unwrap();
        assert_eq!(predicted, expected.class);
        assert_eq!(post.to_vec(), expected.posterior);

        let preset = CString::new("paper-default").unwrap();
        let mut cfg = ptr::null_mut();
        assert_eq!(gedi_config_new(preset.as_ptr(), &mut cfg), GediStatus::Ok);
        assert_eq!(gedi_config_set_max_new_tokens(cfg, 12), GediStatus::Ok);
        let core_cfg = GenerationConfig {
            max_new_tokens: 12,
            ..GenerationConfig::default()
        };

        let prompt = [0usize, 0];
        let mut out = [0usize; 12];
        let mut n = 0;
        assert_eq!(
            gedi_generate(b, g, cfg, 1, prompt.as_ptr(), 2, out.as_mut_ptr(), out.len(), &mut n),
            GediStatus::Ok
        );
        assert_eq!(
            &out[..n],
            decode::gedi_generate(&base, &guide, 1, &prompt, &core_cfg)
                .unwrap()
                .tokens
                .as_slice()
        );

        assert_eq!(
            gedi_direct_generate(g, cfg, 0, prompt.as_ptr(), 2, out.as_mut_ptr(), out.len(), &mut n),
            GediStatus::Ok
        );
        assert_eq!(
            &out[..n],
            decode::direct_generate(&guide, 0, &prompt, &core_cfg)
                .unwrap()
                .as_slice()
        );

        let mut buf = [0 as std::ffi::c_char; 16];
        let mut bytes = 0;
        assert_eq!(
            gedi_model_decode(g, ids.as_ptr(), len, buf.as_mut_ptr(), buf.len(), &mut bytes),
            GediStatus::Ok
        );
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "A B B");
        assert_eq!(bytes, 6);

        gedi_config_free(cfg);
        gedi_model_free(b);
        gedi_model_free(g);
    }
}

#[test]
fn failures_set_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    models(dir.path());
    let g = load(&dir.path().join("guide.ckpt"));
    unsafe {
        let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
        let mut m = ptr::dangling_mut();
        assert_eq!(gedi_model_load(missing.as_ptr(), &mut m), GediStatus::Data);
        assert!(m.is_null());
        assert!(last_error().contains("nope.ckpt"));

        assert_eq!(gedi_model_load(ptr::null(), &mut m), GediStatus::NullPointer);

        let mut lp = 0.0;
        assert_eq!(
            gedi_sequence_logprob(g, 5, [0usize].as_ptr(), 1, &mut lp),
            GediStatus::InvalidArgument
        );
        assert_eq!(
            gedi_sequence_logprob(g, 0, [7usize].as_ptr(), 1, &mut lp),
            GediStatus::InvalidArgument
        );
        assert!(last_error().contains("token id 7"));
        assert_eq!(
            gedi_sequence_logprob(g, 0, ptr::null(), 2, &mut lp),
            GediStatus::NullPointer
        );

        let bad = CString::new("no-such-preset").unwrap();
        let mut cfg = ptr::dangling_mut();
        assert_eq!(gedi_config_new(bad.as_ptr(), &mut cfg), GediStatus::InvalidArgument);
        assert!(cfg.is_null());

        assert_eq!(gedi_config_new(ptr::null(), &mut cfg), GediStatus::Ok);
        assert!(gedi_last_error().is_null());
        assert_eq!(gedi_config_set_rho(cfg, 1.5), GediStatus::InvalidArgument);
        assert_eq!(gedi_config_set_omega(cfg, f64::NAN), GediStatus::InvalidArgument);

        let text = CString::new("A B A B").unwrap();
        let mut ids = [0usize; 2];
        let mut len = 0;
        assert_eq!(
            gedi_model_encode(g, text.as_ptr(), ids.as_mut_ptr(), 2, &mut len),
            GediStatus::BufferTooSmall
        );
        assert_eq!(len, 4);

        let mut class = 0;
        let mut post = [0.0; 1];
        assert_eq!(
            gedi_classify(g, ids.as_ptr(), 2, &mut class, post.as_mut_ptr(), 1),
            GediStatus::BufferTooSmall
        );

        let mut out = [0usize; 4];
        let mut n = 0;
        assert_eq!(
            gedi_generate(g, g, cfg, 0, ptr::null(), 0, out.as_mut_ptr(), 4, &mut n),
            GediStatus::InvalidArgument
        );
        assert!(last_error().contains("unconditional"));

        gedi_config_free(cfg);
        gedi_model_free(g);
        gedi_model_free(ptr::null_mut());
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(gedi_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
