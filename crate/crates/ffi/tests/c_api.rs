use std::ffi::{CStr, CString};
use std::ptr;

use convslu_ffi::*;

fn uniform_lattice(frames: usize, labels: usize, vocab: usize) -> Vec<f64> {
    vec![-(vocab as f64).ln(); frames * (labels + 1) * vocab]
}

#[test]
fn rnnt_loss_counts_alignments() {
    // Uniform outputs over 3 symbols: every one of C(T+U-1, U) alignments
    // has probability (1/3)^(T+U).
    let (t, u, v) = (3, 2, 3);
    let lp = uniform_lattice(t, u, v);
    let target = [1u32, 2];
    let mut loss = 0.0;
    let mut grad = vec![0.0; lp.len()];
    let s = unsafe { convslu_rnnt_loss(lp.as_ptr(), t, v, 0, target.as_ptr(), u, &mut loss, grad.as_mut_ptr()) };
    assert_eq!(s, ConvsluStatus::Ok);
    let expected = -(6f64.ln() - 5.0 * 3f64.ln());
    assert!((loss - expected).abs() < 1e-12);
    assert!(grad.iter().any(|&g| g != 0.0));
}

#[test]
fn ctc_loss_without_gradient() {
    // Two frames, target [1]: paths 1-1, 0-1, 1-0 each (1/2)^2.
    let lp = vec![-(2f64.ln()); 4];
    let mut loss = 0.0;
    let s = unsafe { convslu_ctc_loss(lp.as_ptr(), 2, 2, 0, [1u32].as_ptr(), 1, &mut loss, ptr::null_mut()) };
    assert_eq!(s, ConvsluStatus::Ok);
    assert!((loss - (4f64 / 3.0).ln()).abs() < 1e-12);
}

#[test]
fn errors_carry_status_and_message() {
    let mut loss = 0.0;
    let s = unsafe { convslu_rnnt_loss(ptr::null(), 2, 3, 0, ptr::null(), 0, &mut loss, ptr::null_mut()) };
    assert_eq!(s, ConvsluStatus::NullPointer);
    let msg = unsafe { CStr::from_ptr(convslu_last_error()) }.to_str().unwrap();
    assert!(msg.contains("log_probs"));

    let lp = uniform_lattice(1, 3, 4);
    let s = unsafe { convslu_ctc_loss(lp.as_ptr(), 1, 4, 0, [1u32, 1, 1].as_ptr(), 3, &mut loss, ptr::null_mut()) };
    assert_eq!(s, ConvsluStatus::ImpossibleAlignment);

    let s = unsafe { convslu_rnnt_loss(lp.as_ptr(), 1, 4, 0, [9u32].as_ptr(), 1, &mut loss, ptr::null_mut()) };
    assert_ne!(s, ConvsluStatus::Ok);
    assert!(!convslu_last_error().is_null());
}

#[test]
fn feature_extraction_round_trip() {
    let mut ex = ptr::null_mut();
    assert_eq!(unsafe { convslu_extractor_new(ptr::null(), &mut ex) }, ConvsluStatus::Ok);
    let n = 4000;
    let samples: Vec<f32> = (0..n).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
    let want = convslu_feature_frames(n);
    assert_eq!(want, ((n - 400) / 160 + 1).div_ceil(2));
    let dim = convslu_feature_dim();
    assert_eq!(dim, 240);

    let mut frames = 0;
    let mut small = vec![0f32; dim];
    let s = unsafe { convslu_extract(ex, samples.as_ptr(), n, 16_000, small.as_mut_ptr(), 1, &mut frames) };
    assert_eq!(s, ConvsluStatus::BufferTooSmall);
    assert_eq!(frames, want);

    let mut out = vec![0f32; want * dim];
    let s = unsafe { convslu_extract(ex, samples.as_ptr(), n, 16_000, out.as_mut_ptr(), want, &mut frames) };
    assert_eq!(s, ConvsluStatus::Ok);
    assert!(out.iter().all(|v| v.is_finite()));
    unsafe { convslu_extractor_free(ex) };

    let missing = CString::new("/nonexistent/stats.json").unwrap();
    let mut ex = ptr::null_mut();
    assert_eq!(unsafe { convslu_extractor_new(missing.as_ptr(), &mut ex) }, ConvsluStatus::Io);
    assert!(ex.is_null());
}

#[test]
fn model_load_and_decode() {
    use convslu::transducer::{greedy_decode, TransducerConfig, TransducerModel, DEFAULT_EMISSION_CAP};
    let model = TransducerModel::new(TransducerConfig::desk(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.to_checkpoint().save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { convslu_model_load(cpath.as_ptr(), &mut handle) }, ConvsluStatus::Ok);
    assert_eq!(unsafe { convslu_model_outputs(handle) }, 42);
    assert_eq!(unsafe { convslu_model_history_dim(handle) }, 0);

    let mut name = [0 as std::ffi::c_char; 16];
    let mut len = 0;
    assert_eq!(unsafe { convslu_model_token_name(handle, 0, name.as_mut_ptr(), 16, &mut len) }, ConvsluStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(name.as_ptr()) }.to_str().unwrap(), "<blank>");
    assert_eq!(len, 7);

    let (frames, dim) = (6, 240);
    let feats: Vec<f32> = (0..frames * dim).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    let mut tokens = vec![0u32; frames * DEFAULT_EMISSION_CAP];
    let mut n = 0;
    let s = unsafe {
        convslu_model_decode(handle, feats.as_ptr(), frames, dim, ptr::null(), 0, tokens.as_mut_ptr(), tokens.len(), &mut n)
    };
    assert_eq!(s, ConvsluStatus::Ok);
    let direct = greedy_decode(&model, &convslu::nn::Mat::from_vec(frames, dim, feats.clone()), None, DEFAULT_EMISSION_CAP).unwrap();
    assert_eq!(tokens[..n].iter().map(|&k| k as usize).collect::<Vec<_>>(), direct.tokens);

    let s = unsafe {
        convslu_model_decode(handle, feats.as_ptr(), frames, 7, ptr::null(), 0, tokens.as_mut_ptr(), tokens.len(), &mut n)
    };
    assert_ne!(s, ConvsluStatus::Ok);
    unsafe { convslu_model_free(handle) };
    unsafe { convslu_model_free(ptr::null_mut()) };
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/convslu.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ ConvsluModel *m = 0; return (int)convslu_model_outputs(m) + CONVSLU_STATUS_OK; }}\n"
        ),
    )
    .unwrap();
    let Ok(out) = std::process::Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg(&src).output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
