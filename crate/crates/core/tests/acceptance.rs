//! Acceptance suite: one PASS/FAIL line per criterion. Exact algorithmic
//! checks run first against independent oracles, then the directional
//! experiments on the synthetic corpus at the desk preset.
//!
//! Run with `cargo test --test acceptance`. Artifacts land under the
//! cargo target tmp dir and are recreated from scratch on every run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convslu::context::{ContextConfig, ContextModel, HistorySpec, Vocabulary};
use convslu::corpus::{generate_corpus, CorpusConfig, Split};
use convslu::eval::EvalReport;
use convslu::experiment::{matrix_rows, ExperimentConfig, Run};
use convslu::features::{add_deltas, FeaturePipeline, FeatureSequence, NormStats, Waveform, NUM_MEL};
use convslu::nn::Mat;
use convslu::slu::{extend_input_layer, extend_output_layer, SluTask, TaskKind};
use convslu::training::{
    build_decoded_histories, evaluate_slu, history_embeddings, one_cycle_lr, train_slu, FeatureStore, HistorySource,
    OracleDecoder, RegimeSpec, Stage, TrainingPlan,
};
use convslu::transducer::{ctc_loss, rnnt_loss, Lattice, TransducerConfig, TransducerModel, HISTORY_DIM};

const SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// Brute-force oracles.

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Every monotone path through the grid, scored independently.
fn rnnt_paths(lat: &Lattice, t: usize, u: usize, acc: f64, out: &mut Vec<f64>) {
    let big_u = lat.target.len();
    if t == lat.frames - 1 && u == big_u {
        out.push(acc + lat.lp(t, u, lat.blank));
        return;
    }
    if u < big_u {
        rnnt_paths(lat, t, u + 1, acc + lat.lp(t, u, lat.target[u]), out);
    }
    if t + 1 < lat.frames {
        rnnt_paths(lat, t + 1, u, acc + lat.lp(t, u, lat.blank), out);
    }
}

fn rnnt_brute(lat: &Lattice) -> f64 {
    let mut scores = Vec::new();
    rnnt_paths(lat, 0, 0, 0.0, &mut scores);
    -log_sum_exp(&scores)
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Sum over all V^T frame labelings that collapse to the target.
fn ctc_brute(lp: &[f64], vocab: usize, target: &[usize], blank: usize) -> f64 {
    let frames = lp.len() / vocab;
    let mut scores = Vec::new();
    for code in 0..vocab.pow(frames as u32) {
        let mut c = code;
        let path: Vec<usize> = (0..frames)
            .map(|_| {
                let k = c % vocab;
                c /= vocab;
                k
            })
            .collect();
        if collapse(&path, blank) == target {
            scores.push(path.iter().enumerate().map(|(t, &k)| lp[t * vocab + k]).sum());
        }
    }
    -log_sum_exp(&scores)
}

fn log_softmax_rows(raw: &[f64], width: usize) -> Vec<f64> {
    raw.chunks(width)
        .flat_map(|row| {
            let z = log_sum_exp(row);
            row.iter().map(move |x| x - z).collect::<Vec<_>>()
        })
        .collect()
}

fn random_lattice(rng: &mut ChaCha8Rng) -> Lattice {
    let frames = rng.gen_range(1..=4);
    let vocab = rng.gen_range(2..=4);
    let labels = rng.gen_range(0..=3);
    let target: Vec<usize> = (0..labels).map(|_| rng.gen_range(1..vocab)).collect();
    let raw: Vec<f64> = (0..frames * (labels + 1) * vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
    Lattice::new(frames, vocab, 0, target, log_softmax_rows(&raw, vocab)).unwrap()
}

/// Frame log-probs and a target that fits in them (repeats need a blank).
fn random_ctc(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize, Vec<usize>) {
    loop {
        let frames = rng.gen_range(1..=4);
        let vocab = rng.gen_range(2..=4);
        let labels = rng.gen_range(0..=3);
        let target: Vec<usize> = (0..labels).map(|_| rng.gen_range(1..vocab)).collect();
        let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
        if labels + repeats > frames {
            continue;
        }
        let raw: Vec<f64> = (0..frames * vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
        return (log_softmax_rows(&raw, vocab), vocab, target);
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 250;
    let mut worst = 0f64;
    for _ in 0..n {
        let lat = random_lattice(&mut rng);
        let got = rnnt_loss(&lat).unwrap().loss;
        worst = worst.max((got - rnnt_brute(&lat)).abs());
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst <= 1e-6 && elapsed < Duration::from_secs(60),
        format!("RNN-T loss vs alignment enumeration, {n} lattices, max |err| {worst:.2e}, {}", secs(elapsed)),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 250;
    let mut worst = 0f64;
    for _ in 0..n {
        let (lp, vocab, target) = random_ctc(&mut rng);
        let got = ctc_loss(&lp, vocab, &target, 0).unwrap().loss;
        worst = worst.max((got - ctc_brute(&lp, vocab, &target, 0)).abs());
    }
    Outcome::new(
        worst <= 1e-6,
        format!("CTC loss vs path enumeration, {n} cases, max |err| {worst:.2e}, {}", secs(start.elapsed())),
    )
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central_difference(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-4;
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 25;
    let (mut worst_rnnt, mut worst_ctc) = (0f64, 0f64);
    for _ in 0..n {
        let lat = random_lattice(&mut rng);
        let analytic = rnnt_loss(&lat).unwrap().grad;
        let numeric = central_difference(&lat.log_probs, |lp| {
            let l = Lattice::new(lat.frames, lat.vocab, lat.blank, lat.target.clone(), lp.to_vec()).unwrap();
            rnnt_loss(&l).unwrap().loss
        });
        worst_rnnt = worst_rnnt.max(relative_error(&analytic, &numeric));

        let (lp, vocab, target) = random_ctc(&mut rng);
        let analytic = ctc_loss(&lp, vocab, &target, 0).unwrap().grad;
        let numeric = central_difference(&lp, |x| ctc_loss(x, vocab, &target, 0).unwrap().loss);
        worst_ctc = worst_ctc.max(relative_error(&analytic, &numeric));
    }
    Outcome::new(
        worst_rnnt < 1e-4 && worst_ctc < 1e-4,
        format!("finite differences (h=1e-4) on {n}+{n} lattices, max rel err RNN-T {worst_rnnt:.2e}, CTC {worst_ctc:.2e}"),
    )
}

fn random_feats(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> Mat {
    Mat::from_vec(frames, dim, (0..frames * dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

/// Joint logits at every (frame, prefix) node for a random token prefix.
fn logits_grid(model: &TransducerModel, feats: &Mat, history: Option<&[f32]>, tokens: &[usize]) -> Vec<Vec<f32>> {
    let enc = model.encode(feats, history).unwrap();
    let pe = model.joint.enc_proj.forward(&enc);
    let mut state = model.predictor_start();
    let mut out = Vec::new();
    for u in 0..=tokens.len() {
        let mut pp = vec![0.0; model.config.joint_dim];
        model.joint.pred_proj.forward_vec(&state.output, &mut pp);
        for t in 0..pe.rows {
            out.push(model.joint.logits_projected(pe.row(t), &pp));
        }
        if u < tokens.len() {
            state = model.predictor_step(&state, tokens[u]);
        }
    }
    out
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = TransducerModel::new(TransducerConfig::desk(), 11).unwrap();
    let widened = extend_output_layer(&base, &SluTask::dialog_act(), 12).unwrap();
    let extra = extend_input_layer(&base, HISTORY_DIM, 13).unwrap();
    let n = 12;
    let mut output_exact = true;
    let mut input_worst = 0f64;
    for _ in 0..n {
        let frames = rng.gen_range(1..=8);
        let feats = random_feats(&mut rng, frames, base.config.feature_dim);
        let tokens: Vec<usize> = (0..rng.gen_range(0..=4)).map(|_| rng.gen_range(1..42)).collect();
        let before = logits_grid(&base, &feats, None, &tokens);
        let after = logits_grid(&widened, &feats, None, &tokens);
        for (b, a) in before.iter().zip(&after) {
            output_exact &= a.len() == b.len() + SluTask::dialog_act().labels.len()
                && a[..b.len()].iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        }
        let zeros = vec![0f32; HISTORY_DIM];
        let enc_before = base.encode(&feats, None).unwrap();
        let enc_after = extra.encode(&feats, Some(&zeros)).unwrap();
        for (x, y) in enc_before.data.iter().zip(&enc_after.data) {
            input_worst = input_worst.max((x - y).abs() as f64);
        }
        for (b, a) in before.iter().zip(&logits_grid(&extra, &feats, Some(&zeros), &tokens)) {
            for (x, y) in b.iter().zip(a) {
                input_worst = input_worst.max((x - y).abs() as f64);
            }
        }
    }
    Outcome::new(
        output_exact && input_worst <= 1e-6,
        format!("{n} random inputs: output surgery bit-exact={output_exact}, input surgery max |diff| {input_worst:.2e}"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pipeline = FeaturePipeline::new(NormStats::identity(NUM_MEL)).unwrap();
    let n = 100;
    let mut bad = Vec::new();
    for _ in 0..n {
        let len = rng.gen_range(400..=24_000usize);
        let samples: Vec<f32> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let feats = pipeline.process(&Waveform::new(samples, 16_000).unwrap()).unwrap();
        let want = ((len - 400) / 160 + 1).div_ceil(2);
        if feats.dim != 240 || feats.num_frames() != want {
            bad.push(len);
        }
    }
    let mut recovery = true;
    for _ in 0..n {
        let frames = rng.gen_range(1..=30);
        let data: Vec<f64> = (0..frames * NUM_MEL).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let seq = FeatureSequence::new(NUM_MEL, 10, data).unwrap();
        recovery &= add_deltas(&seq).slice_dims(0, NUM_MEL) == seq;
    }
    Outcome::new(
        bad.is_empty() && recovery,
        format!("{n} random lengths, {} shape/frame mismatches, delta static-block recovery exact={recovery}", bad.len()),
    )
}

fn criterion_6() -> Outcome {
    let anchors = one_cycle_lr(0.0) == 5e-5 && one_cycle_lr(6.0) == 2e-4 && one_cycle_lr(20.0) == 0.0;
    let mut worst = 0f64;
    for i in 0..=2000 {
        let x = i as f64 * 0.01;
        let want = if x <= 6.0 { 5e-5 + (2e-4 - 5e-5) * x / 6.0 } else { 2e-4 * (20.0 - x) / 14.0 };
        worst = worst.max((one_cycle_lr(x) - want).abs());
    }
    Outcome::new(
        anchors && worst <= 1e-12,
        format!("anchors exact={anchors}, max deviation from linear pieces {worst:.2e} over 2001 points"),
    )
}

fn criterion_7() -> Outcome {
    let corpus_cfg = CorpusConfig {
        conversations_per_intent: 2,
        num_agents: 2,
        num_callers: 6,
        valid_callers: 1,
        test_callers: 2,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(SEED, &corpus_cfg).unwrap();
    let task = SluTask::intent();
    let splits = [Split::Train, Split::Valid, Split::Test];
    let oracle = OracleDecoder {
        corpus: &corpus,
        task: task.clone(),
    };
    let cache = build_decoded_histories(&oracle, &corpus, &splits).unwrap();
    let mut cache_matches = cache.len() == corpus.conversations.iter().map(|c| c.turns.len()).sum::<usize>();
    for c in &corpus.conversations {
        for t in &c.turns {
            let d = cache.get(&c.id, t.index).unwrap();
            cache_matches &= d.transcript == t.transcript && d.acts == t.dialog_acts && d.intent == Some(c.intent);
        }
    }

    let spec = HistorySpec::speaker_text_acts();
    let small = ContextConfig {
        layers: 1,
        heads: 2,
        dim: 16,
        ff: 32,
        max_len: 128,
    };
    let context = ContextModel::new(small, TaskKind::Intent, spec, Vocabulary::from_corpus(&corpus), 3).unwrap();
    let emb_ref = history_embeddings(&context, &corpus, HistorySource::Ref, None, &splits).unwrap();
    let emb_dec = history_embeddings(&context, &corpus, HistorySource::Dec, Some(&cache), &splits).unwrap();
    let embeddings_match = emb_ref == emb_dec;

    let store = FeatureStore::build(&corpus, &[1.0]).unwrap();
    let init = convslu::slu::adapt(&TransducerModel::new(TransducerConfig::desk(), 5).unwrap(), &task, true, 6).unwrap();
    let mut plan = TrainingPlan::desk(Stage::Slu);
    plan.epochs = 1;
    let ref_run = train_slu(&init, &corpus, &store, &task, &RegimeSpec::new(HistorySource::Ref, HistorySource::Ref, None), Some(&context), None, &plan).unwrap();
    let dec_regime = RegimeSpec::new(HistorySource::Dec, HistorySource::Dec, Some(cache.baseline.clone()));
    let dec_run = train_slu(&init, &corpus, &store, &task, &dec_regime, Some(&context), Some(&cache), &plan).unwrap();
    let models_match = ref_run.model.to_checkpoint().fingerprint() == dec_run.model.to_checkpoint().fingerprint();
    let eval_ref = evaluate_slu(&ref_run.model, &corpus, &store, &task, Split::Test, Some(&emb_ref)).unwrap();
    let eval_dec = evaluate_slu(&dec_run.model, &corpus, &store, &task, Split::Test, Some(&emb_dec)).unwrap();
    let metrics_match = eval_ref == eval_dec;
    Outcome::new(
        cache_matches && embeddings_match && models_match && metrics_match,
        format!(
            "oracle decoder: cache=REF {cache_matches}, embeddings {embeddings_match}, trained models {models_match}, metrics {metrics_match} ({:.4})",
            eval_ref.metric
        ),
    )
}

// Experiments.

fn fresh_dir(root: &Path, name: &str) -> PathBuf {
    let dir = root.join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    dir
}

fn config(task: TaskKind, dir: PathBuf) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(SEED, task);
    c.output_dir = Some(dir);
    c
}

fn open(c: ExperimentConfig) -> Run {
    let mut run = Run::open(c, None, &[]).unwrap();
    run.verbose = true;
    run
}

fn by_row(reports: &[EvalReport]) -> BTreeMap<String, &EvalReport> {
    reports.iter().map(|r| (r.row.clone(), r)).collect()
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: u32| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut results: BTreeMap<u32, Outcome> = BTreeMap::new();
    let mut record = |k: u32, o: Outcome| {
        println!("criterion {k:>2}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.insert(k, o);
    };

    let exact: [(u32, fn() -> Outcome); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
    ];
    for (k, f) in exact {
        if wanted(k) {
            record(k, f());
        }
    }

    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let needs_intent = [8, 9, 10, 11, 12].iter().any(|&k| wanted(k));
    if needs_intent {
        let intent = open(config(TaskKind::Intent, fresh_dir(&root, "intent")));

        let start = Instant::now();
        let asr = intent.asr_summary().unwrap();
        let asr_time = start.elapsed();
        if wanted(11) {
            record(
                11,
                Outcome::new(
                    asr.test_wer <= 0.15 && asr_time < Duration::from_secs(1800),
                    format!("ASR test WER {:.2}% (valid {:.2}%), trained in {}", 100.0 * asr.test_wer, 100.0 * asr.best_valid_wer, secs(asr_time)),
                ),
            );
        }

        if wanted(8) {
            let start = Instant::now();
            let current = intent.context_report("A1", &HistorySpec::current_only()).unwrap();
            let history = intent.context_report("A3", &HistorySpec::speaker_text()).unwrap();
            let elapsed = start.elapsed();
            let gap = history.metric - current.metric;
            record(
                8,
                Outcome::new(
                    gap >= 0.15 && elapsed < Duration::from_secs(600),
                    format!(
                        "context intent accuracy current-only {:.1}% vs speaker+history {:.1}% (gap {:+.1} points), {}",
                        100.0 * current.metric,
                        100.0 * history.metric,
                        100.0 * gap,
                        secs(elapsed)
                    ),
                ),
            );
        }

        let mut intent_reports = Vec::new();
        if wanted(9) || wanted(12) {
            let start = Instant::now();
            let rows = matrix_rows(TaskKind::Intent);
            let d1 = intent.evaluate_row(&rows[0]).unwrap();
            let d2 = intent.evaluate_row(&rows[1]).unwrap();
            let elapsed = start.elapsed() + asr_time;
            let gain = d2.metric - d1.metric;
            if wanted(9) {
                record(
                    9,
                    Outcome::new(
                        gain >= 0.10 && elapsed < Duration::from_secs(1800),
                        format!(
                            "intent accuracy D1 {:.1}% vs D2 REF/REF {:.1}% (gain {:+.1} points), {} including ASR",
                            100.0 * d1.metric,
                            100.0 * d2.metric,
                            100.0 * gain,
                            secs(elapsed)
                        ),
                    ),
                );
            }
            if wanted(12) {
                intent_reports = intent.run_matrix().unwrap();
            }
        }

        if wanted(10) {
            // The dialog-act run shares the corpus and ASR checkpoint, which
            // depend only on settings both configs have in common.
            let act_dir = fresh_dir(&root, "dialog-act");
            for sub in ["corpus", "asr"] {
                copy_dir(&intent.dir.join(sub), &act_dir.join(sub));
            }
            let acts = open(config(TaskKind::DialogAct, act_dir));
            let start = Instant::now();
            let rows = matrix_rows(TaskKind::DialogAct);
            let get = |id: &str| acts.evaluate_row(rows.iter().find(|r| r.id == id).unwrap()).unwrap();
            let (c1, c8, c9, c10) = (get("C1"), get("C8"), get("C9"), get("C10"));
            let main_claim = c8.metric > c1.metric;
            let finer = c10.metric > c9.metric;
            record(
                10,
                Outcome::new(
                    main_claim,
                    format!(
                        "dialog-act F1 C1 {:.1}% vs C8 REF/REF {:.1}%; non-blocking C10 DEC/DEC {:.1}% {} C9 REF/DEC {:.1}% ({}), {}",
                        100.0 * c1.metric,
                        100.0 * c8.metric,
                        100.0 * c10.metric,
                        if finer { ">" } else { "<=" },
                        100.0 * c9.metric,
                        if finer { "holds" } else { "does not hold" },
                        secs(start.elapsed())
                    ),
                ),
            );
        }

        if wanted(12) {
            let start = Instant::now();
            drop(intent);
            let again = open(config(TaskKind::Intent, fresh_dir(&root, "intent-rerun")));
            let second = again.run_matrix().unwrap();
            let (a, b) = (by_row(&intent_reports), by_row(&second));
            let same = a.len() == 4
                && a.len() == b.len()
                && a.iter().all(|(row, r)| {
                    b.get(row).is_some_and(|s| {
                        r.metric.to_bits() == s.metric.to_bits()
                            && r.wer.map(f64::to_bits) == s.wer.map(f64::to_bits)
                            && r.per_conversation == s.per_conversation
                            && r.fingerprint == s.fingerprint
                    })
                });
            let listing: Vec<String> = a.iter().map(|(row, r)| format!("{row} {:.4}", r.metric)).collect();
            record(
                12,
                Outcome::new(
                    same,
                    format!("fresh re-run of the intent matrix reproduces every metric bit-exactly={same} [{}], {}", listing.join(", "), secs(start.elapsed())),
                ),
            );
        }
    }

    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.pass).map(|(k, _)| *k).collect();
    println!(
        "acceptance: {} of {} criteria pass{}",
        results.values().filter(|o| o.pass).count(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dest = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &dest);
        } else {
            std::fs::copy(entry.path(), dest).unwrap();
        }
    }
}
