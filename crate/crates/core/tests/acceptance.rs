//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails. Positional arguments select
//! criteria by number (`cargo test --test acceptance -- 1 4 8`).

mod common;

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use las_core::attention::{expected_alignment, expected_chunk_attention, AttentionKind, Smoothing};
use las_core::data::Utterance;
use las_core::encoder::{Direction, Encoder, EncoderStack, LayerSpec};
use las_core::harness::{self, gen_toy_splits, run_table_experiment, toy_experiment, Table, TableOptions, TableRow, BASELINE_ROW};
use las_core::model::Model;
use las_core::speller::{beam_search, greedy_decode, DecodeOptions};
use las_core::tensor::load_checkpoint;
use las_core::training::{self, utterance_gradients, utterance_loss, TrainOptions, TrainRecipe};
use las_core::model::Feedback;
use las_core::{rng, Graph, ParamStore};
use rand::Rng as _;

use common::*;

type Outcome = Result<String, String>;

/// Baseline epochs and fine-tuning epochs for the toy tables.
const BASELINE_EPOCHS: usize = 15;
const FINETUNE_EPOCHS: usize = 7;

fn main() {
    let picks: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(usize, &str, Duration, fn(&mut Shared) -> Outcome); 9] = [
        (1, "expected alignment vs enumeration", secs(5), c1_alignment_oracle),
        (2, "chunk expectation vs double loop", secs(5), c2_chunk_oracle),
        (3, "end-to-end gradient check", secs(120), c3_gradients),
        (4, "latency-controlled layer equivalence", secs(10), c4_lc_equivalence),
        (5, "toy listener table", secs(30 * 60), c5_listener_table),
        (6, "toy boundary-compensation table", secs(60 * 60), c6_compensation_table),
        (7, "streaming latency bound", secs(30 * 60), c7_latency_bound),
        (8, "decoder equivalences", secs(10 * 60), c8_decode_equivalences),
        (9, "determinism of metrics", secs(10 * 60), c9_determinism),
    ];
    let mut shared = Shared::new();
    let mut failed = 0;
    for (n, name, limit, run) in criteria {
        if !picks.is_empty() && !picks.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&mut shared)))
            .unwrap_or_else(|e| Err(panic_message(e)));
        let took = t.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > limit => Err(format!("{msg}; took {took:.1?}, limit {limit:?}")),
            other => other,
        };
        let line = match &outcome {
            Ok(msg) => format!("criterion {n} ({name}): PASS [{took:.1?}] {msg}"),
            Err(msg) => format!("criterion {n} ({name}): FAIL [{took:.1?}] {msg}"),
        };
        if outcome.is_err() {
            failed += 1;
        }
        let mut err = std::io::stderr().lock();
        writeln!(err, "{line}").unwrap();
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .map(|m| format!("panicked: {m}"))
        .unwrap_or_else(|| "panicked".into())
}

/// Toy data and trained tables, reused across criteria.
struct Shared {
    work: tempfile::TempDir,
    data: Option<(Vec<Utterance>, Vec<Utterance>)>,
    t3: Vec<(u64, Vec<TableRow>)>,
}

impl Shared {
    fn new() -> Self {
        Self {
            work: tempfile::tempdir().expect("temp dir"),
            data: None,
            t3: Vec::new(),
        }
    }

    fn data(&mut self) -> &(Vec<Utterance>, Vec<Utterance>) {
        self.data.get_or_insert_with(|| {
            let cfg = toy_experiment(BASELINE_EPOCHS);
            gen_toy_splits(&cfg.data.generator, cfg.data.dev_utts)
        })
    }

    fn baseline_dir(&self) -> std::path::PathBuf {
        self.work.path().join("baseline")
    }

    /// Table options sharing one trained baseline across seeds.
    fn table_options(&self, seed: u64, out: &Path) -> TableOptions {
        let mut base = toy_experiment(BASELINE_EPOCHS);
        base.seed = seed;
        base.decode = DecodeOptions::default();
        let mut opts = TableOptions::new(base, out.to_path_buf());
        opts.finetune = opts.base.recipe.scaled(FINETUNE_EPOCHS);
        let shared = self.baseline_dir().join("blstm-gsa");
        let local = out.join("blstm-gsa");
        if shared.join("final").exists() && !local.exists() {
            copy_dir(&shared.join("final"), &local.join("final"));
        }
        opts
    }
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn c1_alignment_oracle(_: &mut Shared) -> Outcome {
    let mut r = rng::stream(101, 0);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let steps = r.gen_range(1..=4);
        let u = r.gen_range(1..=6);
        let p: Vec<Vec<f64>> = (0..steps).map(|_| random_vec(&mut r, u, 0.05, 0.95)).collect();
        let got = expected_alignment(&p);
        let want = enumerate_alignment(&p);
        for (gi, wi) in got.iter().zip(&want) {
            for (a, b) in gi.iter().zip(wi) {
                worst = worst.max((a - b).abs());
            }
        }
        check(worst <= 1e-10, format!("case {case}: max abs error {worst:e} > 1e-10"))?;
    }
    Ok(format!("200 instances, max abs error {worst:.1e}"))
}

fn c2_chunk_oracle(_: &mut Shared) -> Outcome {
    let mut r = rng::stream(102, 0);
    let (mut worst, mut worst_mass) = (0.0f64, 0.0f64);
    for case in 0..200 {
        let u = r.gen_range(1..=6);
        let w = r.gen_range(1..=3);
        let alpha = random_vec(&mut r, u, 0.0, 1.0 / u as f64);
        let d = random_vec(&mut r, u, -3.0, 3.0);
        let got = expected_chunk_attention(&alpha, &d, w);
        let want = chunk_double_loop(&alpha, &d, w);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        let mass = (got.iter().sum::<f64>() - alpha.iter().sum::<f64>()).abs();
        worst_mass = worst_mass.max(mass);
        check(worst <= 1e-12, format!("case {case}: max abs error {worst:e} > 1e-12"))?;
        check(worst_mass <= 1e-10, format!("case {case}: mass error {worst_mass:e} > 1e-10"))?;
    }
    Ok(format!("200 instances, max abs error {worst:.1e}, mass error {worst_mass:.1e}"))
}

fn c3_gradients(_: &mut Shared) -> Outcome {
    let eps = 1e-5;
    let mut r = rng::stream(103, 0);
    let mut report = Vec::new();
    for (k, (name, kind)) in all_kinds().into_iter().enumerate() {
        let mut model = tiny_model(&[(Direction::Bi, 4, false)], kind, Smoothing::None, 3, 2, 30 + k as u64);
        rescale_params(&mut model.params, &mut r, 0.5);
        let t = r.gen_range(2..=5);
        let frames = random_frames(&mut r, t, 3);
        let n_tok = r.gen_range(1..=3);
        let targets: Vec<usize> = (0..n_tok).map(|_| r.gen_range(3..5)).collect();
        let labels: Vec<usize> = (0..n_tok).map(|_| r.gen_range(1..=3)).collect();
        let utt = Utterance {
            id: "g".into(),
            frames,
            targets,
            durations: Vec::new(),
        };
        let recipe = TrainRecipe {
            lambda: 0.3,
            ..TrainRecipe::default()
        };
        let (_, grads) = utterance_gradients(&model, &utt, Some(&labels), &recipe, &mut Feedback::teacher_forced())
            .map_err(|e| e.to_string())?;
        let loss_at = |m: &Model| {
            let mut g = Graph::inference();
            utterance_loss(m, &mut g, &utt, Some(&labels), &recipe, &mut Feedback::teacher_forced())
                .unwrap()
                .1
                .loss
        };
        let mut worst = (0.0f64, String::new());
        let mut checked = 0;
        for id in model.params.ids().collect::<Vec<_>>() {
            for j in 0..model.params.get(id).len() {
                let orig = model.params.get(id).data()[j];
                model.params.get_mut(id).data_mut()[j] = orig + eps;
                let up = loss_at(&model);
                model.params.get_mut(id).data_mut()[j] = orig - eps;
                let down = loss_at(&model);
                model.params.get_mut(id).data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * eps);
                let e = rel_err(grads[id.0][j], fd);
                if e > worst.0 {
                    worst = (e, format!("{}[{j}]: autodiff {} vs fd {fd}", model.params.name(id), grads[id.0][j]));
                }
                checked += 1;
            }
        }
        check(
            worst.0 <= 1e-4,
            format!("{name}: relative error {:.2e} at {}", worst.0, worst.1),
        )?;
        report.push(format!("{name}: {checked} params, max rel {:.1e}", worst.0));
    }
    Ok(report.join("; "))
}

fn c4_lc_equivalence(_: &mut Shared) -> Outcome {
    let mut r = rng::stream(104, 0);
    let (mut worst_full, mut worst_fwd, mut worst_blocked) = (0.0f64, 0.0f64, 0.0f64);
    let mut fwd_checks = 0;
    for case in 0..50 {
        let d = r.gen_range(1..=4);
        let h = r.gen_range(1..=4);
        let t = r.gen_range(1..=12);
        let stack = EncoderStack {
            layers: vec![LayerSpec {
                direction: Direction::Bi,
                hidden_units: h,
                pyramid_input: false,
            }],
            ..EncoderStack::default()
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(stack, d, &mut store, &mut rng::stream(500 + case, 1)).map_err(|e| e.to_string())?;
        rescale_params(&mut store, &mut r, 0.8);
        let x = random_frames(&mut r, t, d);
        let rows: Vec<Vec<f64>> = x.data().chunks(d).map(<[f64]>::to_vec).collect();
        let reference = reference_lc_blstm(&store, 0, &rows, t, 0, h);
        let mut g = Graph::inference();
        let xv = g.constant(&x);
        let diff = |v: &[f64], want: &[Vec<f64>], cols: usize| {
            let mut worst = 0.0f64;
            for (row, w) in want.iter().enumerate() {
                for j in 0..cols {
                    worst = worst.max((v[row * 2 * h + j] - w[j]).abs());
                }
            }
            worst
        };
        let full = enc.blstm_layer(&mut g, &store, 0, xv).map_err(|e| e.to_string())?;
        worst_full = worst_full.max(diff(g.value(full), &reference, 2 * h));
        let nc = t + r.gen_range(0..=3);
        let nr = r.gen_range(0..=3);
        let lc = enc.lc_blstm_layer(&mut g, &store, 0, xv, nc, nr).map_err(|e| e.to_string())?;
        worst_full = worst_full.max(diff(g.value(lc), &reference, 2 * h));
        for nc in 1..=t + 1 {
            for nr in 0..=4 {
                let lc = enc.lc_blstm_layer(&mut g, &store, 0, xv, nc, nr).map_err(|e| e.to_string())?;
                let v = g.value(lc);
                worst_fwd = worst_fwd.max(diff(v, &reference, h));
                worst_blocked = worst_blocked.max(diff(v, &reference_lc_blstm(&store, 0, &rows, nc, nr, h), 2 * h));
                fwd_checks += 1;
            }
        }
        check(worst_full <= 1e-12, format!("case {case}: block >= T differs from the BLSTM by {worst_full:e}"))?;
        check(worst_fwd <= 1e-12, format!("case {case}: forward half differs by {worst_fwd:e}"))?;
        check(worst_blocked <= 1e-12, format!("case {case}: blocked layer differs by {worst_blocked:e}"))?;
    }
    Ok(format!(
        "50 configs against a plain-loop BLSTM, max diff {worst_full:.1e}; {fwd_checks} (Nc,Nr) checks, forward max diff {worst_fwd:.1e}, blocked max diff {worst_blocked:.1e}"
    ))
}

fn cer_of(rows: &[TableRow], name: &str) -> Result<f64, String> {
    rows.iter()
        .find(|r| r.name == name)
        .map(|r| r.cer)
        .ok_or_else(|| format!("row {name} missing"))
}

fn c5_listener_table(shared: &mut Shared) -> Outcome {
    let out = shared.baseline_dir();
    let mut opts = shared.table_options(1, &out);
    let (nc, nr) = opts.lc;
    let scratch = format!("LC-GSA({nc},{nr}) scratch");
    let init = format!("LC-GSA({nc},{nr}) init");
    opts.only = Some(vec![scratch.clone(), init.clone()]);
    let rows = run_table_experiment(Table::T1, &opts).map_err(|e| e.to_string())?;
    let base = cer_of(&rows, BASELINE_ROW)?;
    let s = cer_of(&rows, &scratch)?;
    let i = cer_of(&rows, &init)?;
    let summary = format!(
        "dev CER: BLSTM-GSA {:.2}%, {init} {:.2}%, {scratch} {:.2}%",
        100.0 * base,
        100.0 * i,
        100.0 * s
    );
    check(base <= 0.05, format!("baseline above 5%: {summary}"))?;
    check(i <= base + 0.01, format!("initialised LC more than 1 point worse: {summary}"))?;
    check(i < s, format!("initialised LC not better than scratch: {summary}"))?;
    Ok(summary)
}

fn t3_rows() -> Vec<String> {
    vec![
        "LC-MoChA".into(),
        "LC-MoChA M1 w=10".into(),
        "LC-MoChA M2 w=10".into(),
        "LC-AMoChA M2 w=10".into(),
    ]
}

fn c6_compensation_table(shared: &mut Shared) -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in [1u64, 2, 3] {
        let out = shared.work.path().join(format!("t3-seed{seed}"));
        let mut opts = shared.table_options(seed, &out);
        opts.only = Some(t3_rows());
        let rows = run_table_experiment(Table::T3, &opts).map_err(|e| e.to_string())?;
        let base = cer_of(&rows, BASELINE_ROW)?;
        let nofix = cer_of(&rows, "LC-MoChA")?;
        let m1 = cer_of(&rows, "LC-MoChA M1 w=10")?;
        let m2 = cer_of(&rows, "LC-MoChA M2 w=10")?;
        let amocha = cer_of(&rows, "LC-AMoChA M2 w=10")?;
        lines.push(format!(
            "seed {seed}: base {:.2}% no-fix {:.2}% M1 {:.2}% M2 {:.2}% AMoChA+M2 {:.2}%",
            100.0 * base,
            100.0 * nofix,
            100.0 * m1,
            100.0 * m2,
            100.0 * amocha
        ));
        if nofix <= base {
            failures.push(format!("seed {seed}: no-fix does not degrade"));
        } else if nofix - m2 < 0.5 * (nofix - base) {
            failures.push(format!("seed {seed}: M2 recovers less than half"));
        }
        if amocha > m2 + 0.005 {
            failures.push(format!("seed {seed}: AMoChA+M2 more than 0.5 points above MoChA+M2"));
        }
        shared.t3.push((seed, rows));
    }
    let summary = lines.join("; ");
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failures.join(", ")))
    }
}

/// Streams every dev utterance through each streamable model.
fn c7_latency_bound(shared: &mut Shared) -> Outcome {
    let dev = shared.data().1.clone();
    let mut models: Vec<(String, Model)> = Vec::new();
    for seed in [1u64, 2, 3] {
        let out = shared.work.path().join(format!("t3-seed{seed}"));
        let opts = shared.table_options(seed, &out);
        for row in harness::table_rows(Table::T3, &opts) {
            let dir = out.join(row.slug()).join("final");
            if !row.kind.is_monotonic() || !dir.exists() {
                continue;
            }
            let mut m = Model::new(row.model_config(&opts.base.model), &mut rng::stream(seed, 1)).map_err(|e| e.to_string())?;
            m.init_from(&load_checkpoint(&dir).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            models.push((format!("{} seed {seed}", row.name), m));
        }
    }
    // Untrained models with every smoothing and streaming listener.
    let toy = harness::toy_model_config();
    let mut k = 0;
    for kind in all_kinds().into_iter().map(|(_, k)| k).filter(AttentionKind::is_monotonic) {
        for smoothing in [Smoothing::None, Smoothing::M1 { w: 3 }, Smoothing::M2 { w: 10 }] {
            for dir in [Direction::LatencyControlled, Direction::Uni] {
                let mut cfg = toy.clone();
                cfg.attention.kind = kind;
                cfg.attention.smoothing = smoothing;
                for l in &mut cfg.encoder.layers {
                    l.direction = dir;
                    l.hidden_units = 8;
                }
                cfg.encoder.lc_block_len = 16;
                cfg.encoder.lc_right_context = 8;
                let mut m = Model::new(cfg, &mut rng::stream(900 + k, 1)).map_err(|e| e.to_string())?;
                rescale_params(&mut m.params, &mut rng::stream(901 + k, 2), 0.6);
                k += 1;
                models.push((format!("random {kind:?} {smoothing:?} {dir:?}"), m));
            }
        }
    }
    let (mut violations, mut tokens, mut decodes, mut max_slack) = (0usize, 0usize, 0usize, i64::MIN);
    for (name, m) in &models {
        let opts = DecodeOptions::greedy();
        let outs = harness::stream_all(m, &dev, &opts, 1).map_err(|e| format!("{name}: {e}"))?;
        let (nc, nr) = m.encoder().stack().streaming_geometry().map_err(|e| e.to_string())?;
        for o in &outs {
            violations += harness::latency_violations(&o.trace, m).map_err(|e| e.to_string())?;
            for r in &o.trace {
                let bound = harness::frame_bound(r.boundary_u, m.subsampling(), m.config.attention.smoothing, nc, nr);
                max_slack = max_slack.max(r.frames_consumed as i64 - bound as i64);
            }
            tokens += o.trace.len();
            decodes += 1;
        }
    }
    check(violations == 0, format!("{violations} violations over {tokens} tokens"))?;
    Ok(format!(
        "{} models, {decodes} streaming decodes, {tokens} tokens, 0 violations (closest approach {max_slack} frames)",
        models.len()
    ))
}

fn c8_decode_equivalences(shared: &mut Shared) -> Outcome {
    let mut r = rng::stream(108, 0);
    let mut mismatches = 0;
    for case in 0..100u64 {
        let kinds = all_kinds();
        let kind = kinds[case as usize % kinds.len()].1;
        let smoothing = if case % 3 == 0 { Smoothing::M2 { w: 2 } } else { Smoothing::None };
        let mut m = tiny_model(
            &[(Direction::Bi, 5, false), (Direction::Bi, 5, true)],
            kind,
            smoothing,
            4,
            4,
            case,
        );
        rescale_params(&mut m.params, &mut r, 1.0);
        let t = r.gen_range(2..=16);
        let x = random_frames(&mut r, t, 4);
        let g = greedy_decode(&m, &x, &DecodeOptions::greedy()).map_err(|e| e.to_string())?;
        let b = beam_search(
            &m,
            &x,
            &DecodeOptions {
                beam: 1,
                temperature: 1.0,
                max_len: None,
            },
        )
        .map_err(|e| e.to_string())?;
        if g.tokens != b.tokens || g.score != b.score {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} of 100 models differ"))?;

    // Boundary monotonicity over decodes of the toy dev set.
    let dev = shared.data().1.clone();
    let mut decoded = 0;
    let mut bad = 0;
    let mut models: Vec<Model> = Vec::new();
    let mut cfg = harness::toy_model_config();
    for l in &mut cfg.encoder.layers {
        l.hidden_units = 8;
    }
    for (i, (_, kind)) in all_kinds().into_iter().enumerate().filter(|(_, (_, k))| k.is_monotonic()) {
        for sm in [Smoothing::None, Smoothing::M1 { w: 3 }, Smoothing::M2 { w: 4 }] {
            let mut c = cfg.clone();
            c.attention.kind = kind;
            c.attention.smoothing = sm;
            let mut m = Model::new(c, &mut rng::stream(70 + i as u64, 1)).map_err(|e| e.to_string())?;
            rescale_params(&mut m.params, &mut r, 0.6);
            models.push(m);
        }
    }
    for m in &models {
        for u in dev.iter().take(50) {
            for opts in [DecodeOptions::greedy(), DecodeOptions::default()] {
                let d = las_core::speller::decode(m, &u.frames, &opts).map_err(|e| e.to_string())?;
                let b: Vec<usize> = d.steps.iter().map(|s| s.boundary_u).collect();
                if b.windows(2).any(|p| p[1] < p[0]) {
                    bad += 1;
                }
                decoded += 1;
            }
        }
    }
    check(bad == 0, format!("{bad} of {decoded} decodes had a decreasing boundary"))?;
    Ok(format!(
        "100 random models: beam 1 == greedy; {decoded} monotonic decodes with nondecreasing boundaries"
    ))
}

fn c9_determinism(shared: &mut Shared) -> Outcome {
    let (train, dev) = shared.data().clone();
    let train = &train[..120];
    let dev = &dev[..30];
    let run = |dir: &Path, workers: usize| -> Result<String, String> {
        let mut cfg = harness::toy_model_config();
        cfg.attention.kind = AttentionKind::Mocha { chunk: 2 };
        cfg.attention.smoothing = Smoothing::M2 { w: 3 };
        cfg.attention.sigmoid_noise = 1.0;
        let mut m = Model::new(cfg, &mut rng::stream(5, rng::streams::INIT)).map_err(|e| e.to_string())?;
        let mut recipe = harness::toy_recipe(3);
        recipe.ss_ramp.start_epoch = 1;
        recipe.teacher_force_epochs = 0;
        recipe.ss_ramp.end_epoch = 2;
        let path = dir.join("metrics.csv");
        let opts = TrainOptions {
            seed: 5,
            workers,
            metrics_path: Some(path.clone()),
            ..Default::default()
        };
        training::train(&mut m, train, dev, &recipe, None, &opts).map_err(|e| e.to_string())?;
        std::fs::read_to_string(path).map_err(|e| e.to_string())
    };
    let root = shared.work.path().join("determinism");
    let a = run(&root.join("a"), 1)?;
    let b = run(&root.join("b"), 1)?;
    let c = run(&root.join("c"), 2)?;
    check(a == b, "two identical runs wrote different metrics".into())?;
    check(a == c, "worker count changed the metrics".into())?;
    Ok(format!("3 runs (1, 1 and 2 workers), identical {}-line metrics CSVs", a.lines().count()))
}
