//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the console.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdycnn::audio::{frame_count, log_mel, normalize_per_freq, Waveform, N_MELS, SAMPLE_RATE};
use tdycnn::dynconv::{adaptive_kernel_oracle, attention_weights, tdy_conv_forward, AttentionScope, TdyConvLayer};
use tdycnn::eval::{compute_eer, compute_min_dcf, segment_embeddings, DcfParams};
use tdycnn::model::{ConvMode, ModelConfig, StaticConv};
use tdycnn::tensor::{conv2d_with, relu, BatchNormMode, ConvGeometry, TimePadding};
use tdycnn::train::{angular_prototypical_loss, combined_loss, lr_schedule, temperature_schedule, TrainConfig};
use tdycnn::{Tape, Tensor, Var};
use tdycnn_cli::{analyze_model, cmd_synth, cmd_train, eval_model, Config};

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_reordering_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..250 {
        let k = [1, 2, 4, 6, 8][r.random_range(0..5)];
        let (c_in, c_out) = (r.random_range(1..4), r.random_range(1..5));
        let (kh, kw) = (r.random_range(1..4), r.random_range(1..4));
        let f = r.random_range(kh.max(2)..9);
        let t = r.random_range(kw.max(2)..16);
        let mut geom = ConvGeometry::new(
            (r.random_range(1..3), r.random_range(1..3)),
            (r.random_range(0..kh), r.random_range(0..kw)),
        );
        if r.random_bool(0.3) {
            geom = geom.with_time_padding(TimePadding::Circular);
        }
        let mut layer = TdyConvLayer::new("a", c_in, c_out, (kh, kw), f, k, geom, &mut r).map_err(|e| e.to_string())?;
        layer.set_temperature(r.random_range(1.0..31.0)).map_err(|e| e.to_string())?;
        let x = Tensor::randn([c_in, f, t], &mut r);
        let (y, map) = tdy_conv_forward(&x, &layer).map_err(|e| e.to_string())?;
        let oracle = adaptive_kernel_oracle(&x, &layer, &map).map_err(|e| e.to_string())?;
        worst = worst.max(y.max_abs_diff(&oracle));
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-10 && secs < 60.0, format!("250 configs, max |diff| {worst:.2e}, {secs:.1}s"))
}

/// Worst relative error of tape gradients against central differences.
fn grad_check(inputs: &[Tensor], coords: usize, seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let weights = |tape: &Tape, out: Var| Tensor::randn(tape.value(out).shape(), &mut rng(seed ^ 0x77));
    let scalar = |tape: &mut Tape, out: Var| {
        let w = weights(tape, out);
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv).expect("same shape");
        tape.sum(prod)
    };
    let value_at = |values: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let s = scalar(&mut tape, out);
        tape.value(s).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = build(&mut tape, &vars);
    let s = scalar(&mut tape, out);
    tape.backward(s).expect("backward");
    let mut r = rng(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let which = r.random_range(0..inputs.len());
        let idx = r.random_range(0..inputs[which].numel());
        let analytic = tape.grad(vars[which]).map_or(0.0, |g| g[idx]);
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[idx] += h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[idx] -= h;
        let numeric = (value_at(&plus) - value_at(&minus)) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

fn c2_gradients() -> Outcome {
    let start = Instant::now();
    let mut errs: Vec<(&str, f64)> = Vec::new();
    let geom = ConvGeometry::new((2, 1), (1, 1)).with_time_padding(TimePadding::Circular);
    let conv_in = [
        Tensor::randn([2, 3, 6, 7], &mut rng(1)),
        Tensor::randn([4, 3, 3, 3], &mut rng(2)),
        Tensor::randn([4], &mut rng(3)),
    ];
    errs.push(("conv", grad_check(&conv_in, 40, 10, |t, v| t.conv2d(v[0], v[1], v[2], geom).unwrap())));
    let aff_in =
        [Tensor::randn([5, 4], &mut rng(4)), Tensor::randn([3, 4], &mut rng(5)), Tensor::randn([3], &mut rng(6))];
    errs.push(("affine", grad_check(&aff_in, 30, 11, |t, v| t.affine(v[0], v[1], v[2]).unwrap())));
    let bn_in =
        [Tensor::randn([3, 2, 4, 5], &mut rng(7)), Tensor::randn([2], &mut rng(8)), Tensor::randn([2], &mut rng(9))];
    let running = (vec![0.0; 2], vec![1.0; 2]);
    errs.push((
        "batch norm",
        grad_check(&bn_in, 40, 12, |t, v| {
            t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, (&running.0, &running.1), 1e-5).unwrap().0
        }),
    ));
    let sm_in = [Tensor::randn([4, 6], &mut rng(13))];
    errs.push(("softmax", grad_check(&sm_in, 24, 14, |t, v| t.softmax_tempered(v[0], 3.0).unwrap())));

    let mut layer =
        TdyConvLayer::new("g", 2, 3, (3, 3), 6, 4, ConvGeometry::new((1, 1), (1, 1)), &mut rng(15)).unwrap();
    layer.set_temperature(2.0).unwrap();
    let mut tdy_in = vec![Tensor::randn([2, 2, 6, 9], &mut rng(16))];
    tdy_in.extend(layer.named_params().into_iter().map(|(_, t)| t.clone()));
    errs.push((
        "tdy layer",
        grad_check(&tdy_in, 60, 17, |t, v| {
            for (i, (name, _)) in layer.named_params().into_iter().enumerate() {
                t.alias_param(&name, v[i + 1]);
            }
            layer.forward_tape(t, v[0], AttentionScope::Frame, true).unwrap().0
        }),
    ));

    let labels = [0, 0, 2, 2, 1, 1];
    let loss_in = [
        Tensor::randn([6, 3], &mut rng(18)),
        Tensor::randn([3, 2, 5], &mut rng(19)),
        Tensor::scalar(6.0),
        Tensor::scalar(-3.0),
    ];
    errs.push((
        "ap loss",
        grad_check(&loss_in[1..], 30, 20, |t, v| angular_prototypical_loss(t, v[0], v[1], v[2]).unwrap()),
    ));
    errs.push((
        "combined loss",
        grad_check(&loss_in, 40, 21, |t, v| combined_loss(t, v[0], &labels, v[1], v[2], v[3]).unwrap().total),
    ));
    let secs = start.elapsed().as_secs_f64();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    check(worst < 1e-4 && secs < 120.0, format!("{detail}; {secs:.1}s"))
}

fn c3_softmax_constraint() -> Outcome {
    let mut r = rng(3);
    let mut columns = 0;
    let mut worst: f64 = 0.0;
    while columns < 10_000 {
        let k = r.random_range(1..9);
        let mut layer = TdyConvLayer::new("s", 2, 2, (3, 3), 8, k, ConvGeometry::new((1, 1), (1, 1)), &mut r)
            .map_err(|e| e.to_string())?;
        layer.set_temperature(r.random_range(1.0..31.0)).map_err(|e| e.to_string())?;
        let x = Tensor::randn([2, 8, 200], &mut r).data().iter().map(|v| v * 4.0).collect::<Vec<_>>();
        let map = attention_weights(&Tensor::new([2, 8, 200], x).unwrap(), &layer).map_err(|e| e.to_string())?;
        for t in 0..map.time_bins() {
            worst = worst.max((map.column(t).iter().sum::<f64>() - 1.0).abs());
            columns += 1;
        }
    }
    let geom = ConvGeometry::new((2, 1), (1, 1));
    let layer = TdyConvLayer::new("s", 3, 4, (3, 3), 10, 1, geom, &mut r).map_err(|e| e.to_string())?;
    let x = Tensor::randn([3, 10, 15], &mut r);
    let (y, _) = tdy_conv_forward(&x, &layer).map_err(|e| e.to_string())?;
    let w = Tensor::new([4, 3, 3, 3], layer.basis_kernels.data().to_vec()).unwrap();
    let b = Tensor::new([4], layer.basis_biases.data().to_vec()).unwrap();
    let diff = y.max_abs_diff(&relu(&conv2d_with(&x, &w, &b, geom).unwrap()));
    check(
        worst <= 1e-12 && diff <= 1e-12,
        format!("{columns} columns, max |sum-1| {worst:.1e}; K=1 vs static conv+relu {diff:.1e}"),
    )
}

fn c4_schedules() -> Outcome {
    let tau = |e| temperature_schedule(e).unwrap();
    let cfg = TrainConfig::default();
    let ok = tau(0) == 31.0
        && tau(5) == 16.0
        && (10..40).all(|e| tau(e) == 1.0)
        && lr_schedule(0, &cfg) == 1e-3
        && lr_schedule(15, &cfg) == 7.5e-4;
    check(
        ok,
        format!(
            "tau 0/5/10 = {}/{}/{}, lr 0/15 = {}/{}",
            tau(0),
            tau(5),
            tau(10),
            lr_schedule(0, &cfg),
            lr_schedule(15, &cfg)
        ),
    )
}

/// EER and normalized minDCF by counting errors at every threshold.
fn metric_oracle(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut th: Vec<f64> = scores.to_vec();
    th.sort_by(f64::total_cmp);
    th.dedup();
    th.push(f64::INFINITY);
    let n_tar = labels.iter().filter(|&&l| l).count() as f64;
    let n_non = labels.len() as f64 - n_tar;
    let pts: Vec<(f64, f64)> = th
        .iter()
        .map(|&t| {
            let fa = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count() as f64;
            let miss = scores.iter().zip(labels).filter(|(s, l)| **l && **s < t).count() as f64;
            (fa / n_non, miss / n_tar)
        })
        .collect();
    let i = pts.iter().position(|(far, frr)| frr >= far).expect("reject-all point");
    let (far, frr) = pts[i];
    let eer = if i == 0 || far == frr {
        far
    } else {
        let (pf, pr) = pts[i - 1];
        let s = (pf - pr) / ((pf - pr) - (far - frr));
        pr + s * (frr - pr)
    };
    let dcf = pts.iter().map(|(far, frr)| frr * 0.05 + far * 0.95).fold(f64::INFINITY, f64::min) / 0.05;
    (eer, dcf)
}

fn c5_metrics() -> Outcome {
    let p = DcfParams::default();
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut r = rng(500 + seed);
        let n = r.random_range(2..=1000);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let s = r.random_range(0.0..1.0) + if l { 0.5 } else { 0.0 };
                if seed % 2 == 0 {
                    (s * 20.0f64).round() / 20.0
                } else {
                    s
                }
            })
            .collect();
        let (eer, dcf) = metric_oracle(&scores, &labels);
        worst = worst.max((compute_eer(&scores, &labels).unwrap() - eer).abs());
        worst = worst.max((compute_min_dcf(&scores, &labels, &p).unwrap() - dcf).abs());
    }
    let cases: [(&[f64], &[bool], f64); 3] = [
        (&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false], 0.0),
        (&[0.1, 0.9], &[true, false], 1.0),
        (&[0.9, 0.8, 0.85, 0.1], &[true, true, false, false], 0.5),
    ];
    let worked = cases
        .iter()
        .all(|(s, l, want)| compute_eer(s, l).unwrap() == *want && compute_min_dcf(s, l, &p).unwrap() == *want);
    let params = p.c_miss == 1.0 && p.c_fa == 1.0 && p.p_target == 0.05;
    check(
        worst < 1e-12 && worked && params,
        format!("100 sets, max |diff| {worst:.1e}; worked examples {}", if worked { "exact" } else { "wrong" }),
    )
}

fn c6_parameters() -> Outcome {
    let count = |mode| ModelConfig { conv_mode: mode, k: 6, ..ModelConfig::default() }.count_parameters().unwrap();
    let (s, t) = (count(ConvMode::Static), count(ConvMode::Tdy));
    let ratio = t as f64 / s as f64;
    let geom = ConvGeometry::new((1, 1), (1, 1));
    let conv = StaticConv::new("c", 16, 32, (3, 3), geom, &mut rng(0));
    let single_static = conv.kernel.numel() + conv.bias.numel();
    let single_tdy = TdyConvLayer::new("t", 16, 32, (3, 3), 8, 6, geom, &mut rng(0)).unwrap().param_count();
    check(
        (6.0..=8.0).contains(&ratio) && single_static == 4640 && single_tdy == 30006,
        format!("static {s}, tdy {t}, ratio {ratio:.3}; single layer {single_static} -> {single_tdy}"),
    )
}

fn c9_frontend() -> Outcome {
    let mut r = rng(9);
    let mut shape_ok = true;
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for _ in 0..20 {
        let len = r.random_range(400..40_000);
        let wave = Waveform::new((0..len).map(|_| r.random_range(-0.5..0.5)).collect());
        let mel = log_mel(&wave).map_err(|e| e.to_string())?;
        shape_ok &= mel.values.shape() == [N_MELS, frame_count(len)] && frame_count(len) == 1 + (len - 400) / 160;
        let norm = normalize_per_freq(&mel).map_err(|e| e.to_string())?;
        for b in 0..N_MELS {
            let row = norm.row(b);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - 1.0).abs());
        }
    }
    let two_s = Waveform::new((0..2 * SAMPLE_RATE as usize).map(|n| (n as f64 * 0.1).sin()).collect());
    let shape = log_mel(&two_s).map_err(|e| e.to_string())?.values.shape().to_vec();
    check(
        shape_ok && shape == [64, 198] && worst_mean < 1e-9 && worst_var < 1e-6,
        format!("2 s -> {shape:?}; |mean| {worst_mean:.1e}, |var-1| {worst_var:.1e}"),
    )
}

const SEEDS: [u64; 3] = [0, 1, 2];
const TIME_BUDGET: Duration = Duration::from_secs(600);

struct SeedRun {
    seed: u64,
    eer: BTreeMap<ConvMode, f64>,
    train_time: BTreeMap<ConvMode, Duration>,
    epochs: usize,
    trials: usize,
    embeddings_per_side: usize,
    dispersion: BTreeMap<usize, f64>,
    csvs_reproducible: bool,
    analysis_files: usize,
}

/// Configuration shared by every end-to-end run.
fn smoke_config(seed: u64, mode: ConvMode) -> Config {
    let mut cfg = Config::default();
    cfg.synth.seed = seed;
    cfg.train.seed = seed;
    cfg.train.epochs = 20;
    cfg.train.speaker_passes = 4;
    cfg.model.conv_mode = mode;
    cfg
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("readable dir").map(|e| e.expect("entry").path()) {
            if e.is_dir() {
                stack.push(e);
            } else {
                out.insert(e.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&e).unwrap());
            }
        }
    }
    out
}

fn run_seed(seed: u64, root: &Path) -> Result<SeedRun, String> {
    let e = |e: tdycnn::Error| format!("seed {seed}: {e}");
    let data = root.join(format!("data{seed}"));
    let base = smoke_config(seed, ConvMode::Tdy);
    cmd_synth(&base.synth, &data).map_err(e)?;
    let trials = fs::read_to_string(data.join("trials.txt")).map_err(|x| x.to_string())?.lines().count();
    let mut run = SeedRun {
        seed,
        eer: BTreeMap::new(),
        train_time: BTreeMap::new(),
        epochs: base.train.epochs,
        trials,
        embeddings_per_side: 0,
        dispersion: BTreeMap::new(),
        csvs_reproducible: false,
        analysis_files: 0,
    };
    for mode in [ConvMode::Tdy, ConvMode::Static] {
        let out = root.join(format!("{mode}{seed}"));
        let start = Instant::now();
        let trained = cmd_train(&smoke_config(seed, mode), &data, &out.join("train")).map_err(e)?;
        run.train_time.insert(mode, start.elapsed());
        let report = eval_model(&trained.model, &data, None, &out.join("eval")).map_err(e)?;
        run.eer.insert(mode, report.eer);
        if mode == ConvMode::Tdy {
            let first = fs::read_to_string(data.join("trials.txt")).unwrap();
            let path = first.split_whitespace().nth(1).unwrap();
            run.embeddings_per_side = segment_embeddings(&trained.model, &data.join(path)).map_err(e)?.len();
            let a = analyze_model(&trained.model, &data, &[], true, &out.join("analysis")).map_err(e)?;
            run.dispersion = a.dispersion;
            let reloaded = tdycnn::model::load_checkpoint(&trained.checkpoint).map_err(e)?;
            analyze_model(&reloaded, &data, &[], true, &out.join("analysis2")).map_err(e)?;
            let (x, y) = (files_under(&out.join("analysis")), files_under(&out.join("analysis2")));
            run.analysis_files = x.len();
            run.csvs_reproducible = !x.is_empty() && x == y;
        }
    }
    println!(
        "  seed {seed}: EER tdy {:.3} static {:.3}; train {:.0}s/{:.0}s; dispersion {:?}",
        run.eer[&ConvMode::Tdy],
        run.eer[&ConvMode::Static],
        run.train_time[&ConvMode::Tdy].as_secs_f64(),
        run.train_time[&ConvMode::Static].as_secs_f64(),
        run.dispersion.iter().map(|(l, d)| format!("L{l}={d:.3}")).collect::<Vec<_>>(),
    );
    Ok(run)
}

fn pipeline() -> &'static Result<Vec<SeedRun>, String> {
    static RUNS: OnceLock<Result<Vec<SeedRun>, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        SEEDS.iter().map(|&s| run_seed(s, dir.path())).collect()
    })
}

fn c7_end_to_end() -> Outcome {
    let runs = pipeline().as_ref().map_err(Clone::clone)?;
    let tdy_ok = runs.iter().all(|r| r.eer[&ConvMode::Tdy] < 0.10);
    let budget_ok = runs.iter().all(|r| r.epochs <= 20 && r.train_time.values().all(|t| *t <= TIME_BUDGET));
    let protocol_ok = runs.iter().all(|r| r.trials == 200 && r.embeddings_per_side == 10);
    let wins = runs.iter().filter(|r| r.eer[&ConvMode::Tdy] <= r.eer[&ConvMode::Static]).count();
    let eers: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: {:.3} vs {:.3}", r.seed, r.eer[&ConvMode::Tdy], r.eer[&ConvMode::Static]))
        .collect();
    check(
        tdy_ok && budget_ok && protocol_ok && wins >= 2,
        format!("tdy vs static EER [{}]; tdy <= static in {wins}/3; 200 trials, 10x10 scoring", eers.join("; ")),
    )
}

fn c8_phonemic_analysis() -> Outcome {
    let runs = pipeline().as_ref().map_err(Clone::clone)?;
    let mut trend = 0;
    let mut parts = Vec::new();
    for r in runs {
        let (first, last) = (r.dispersion.first_key_value(), r.dispersion.last_key_value());
        if let (Some((lf, df)), Some((ll, dl))) = (first, last) {
            if lf < ll && df > dl {
                trend += 1;
            }
            parts.push(format!("seed {}: L{lf} {df:.3} > L{ll} {dl:.3}", r.seed));
        }
    }
    let reproducible = runs.iter().all(|r| r.csvs_reproducible);
    let files: usize = runs.iter().map(|r| r.analysis_files).sum();
    check(
        trend >= 2 && reproducible,
        format!("[{}]; trend in {trend}/3; {files} CSVs byte-identical on rerun: {reproducible}", parts.join("; ")),
    )
}

fn main() -> ExitCode {
    // honor `cargo test -- <filter>` loosely: run everything unless told to list
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(u8, &str, fn() -> Outcome); 9] = [
        (1, "reordered TDY conv equals adaptive-kernel oracle", c1_reordering_equivalence),
        (2, "gradient suite", c2_gradients),
        (3, "softmax constraint and K=1 degeneracy", c3_softmax_constraint),
        (4, "temperature and learning-rate schedules", c4_schedules),
        (5, "EER and minDCF oracles", c5_metrics),
        (6, "parameter structure", c6_parameters),
        (7, "end-to-end smoke", c7_end_to_end),
        (8, "phonemic analysis", c8_phonemic_analysis),
        (9, "frontend", c9_frontend),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        match run() {
            Ok(detail) => println!("criterion {id} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {}/9 passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
