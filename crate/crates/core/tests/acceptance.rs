//! One line per acceptance criterion: PASS, FAIL or SKIP with the measured
//! values. Exits non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use formertime::attention::{mac_count_tra, tra_forward, TRAConfig, TRAWeights};
use formertime::config::{synth_splits, RunConfig};
use formertime::data::{parse_ts, read_ts_file, write_ts, TimeSeriesDataset};
use formertime::encoder::{positional_encode, CPEConfig, PosMode, PosWeights};
use formertime::engine::{Graph, ParamStore, Scalar, Tensor};
use formertime::model::{count_macs, gradient_check, tiny_config, FormerTime, ModelConfig, ModelTrace};
use formertime::slicing::{partition, FeatureMap, SliceConfig, SliceWeights};
use formertime::training::{train_with, RepeatSummary};
use formertime::Error;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn random<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

fn randomize<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = T::of(rng.gen_range(-0.5..0.5));
        }
    }
}

fn values(store: &ParamStore<f32>, name: &str) -> Vec<f64> {
    let id = store.id_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).value.to_f64_vec()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let report = gradient_check(&tiny_config(), 32, 2, 1e-4).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = report.max_rel_error();
    verdict(
        report.passes(1e-3) && secs < 60.0,
        format!(
            "max rel error {worst:.2e} over {} tensors (< 1e-3), {secs:.1} s (< 60 s)",
            report.params.len()
        ),
    )
}

/// Row-major `[rows, cols]` times `[cols, out]` plus bias, in f64.
fn dense(x: &[f64], rows: usize, w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let cols = w.len() / out;
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            y[r * out + o] = b[o] + (0..cols).map(|i| x[r * cols + i] * w[i * out + o]).sum::<f64>();
        }
    }
    y
}

/// Textbook multi-head self-attention on one sequence `[l, c]`.
fn reference_mhsa(x: &[f64], l: usize, c: usize, heads: usize, store: &ParamStore<f32>) -> Vec<f64> {
    let q = dense(x, l, &values(store, "tra.wq"), &values(store, "tra.bq"), c);
    let k = dense(x, l, &values(store, "tra.wk"), &values(store, "tra.bk"), c);
    let v = dense(x, l, &values(store, "tra.wv"), &values(store, "tra.bv"), c);
    let dh = c / heads;
    let mut merged = vec![0.0; l * c];
    for h in 0..heads {
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| {
                    (0..dh)
                        .map(|e| q[i * c + h * dh + e] * k[j * c + h * dh + e])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = exp.iter().sum();
            for e in 0..dh {
                merged[i * c + h * dh + e] = (0..l).map(|j| exp[j] / z * v[j * c + h * dh + e]).sum();
            }
        }
    }
    dense(&merged, l, &values(store, "tra.wo"), &values(store, "tra.bo"), c)
}

fn tra_equivalence() -> Outcome {
    let (l, c, heads) = (64, 32, 4);
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = TRAConfig::new(c, heads, 1).unwrap();
        cfg.passthrough = true;
        let mut store = ParamStore::<f32>::new();
        let w = TRAWeights::register(&mut store, "tra", &cfg, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let xs = random::<f32>(&[1, l, c], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xs.clone());
        let y = tra_forward(&mut g, &store, x, &cfg, &w, None).unwrap();
        let expected = reference_mhsa(&xs.to_f64_vec(), l, c, heads, &store);
        for (a, b) in g.value(y).to_f64_vec().iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        worst <= 1e-5,
        format!("max abs diff {worst:.2e} over 10 seeds (<= 1e-5)"),
    )
}

/// Partition, positional encoding, mean pooling and classifier with every
/// encoder block removed, computed with plain loops.
fn compositional_oracle(model: &FormerTime<f64>, batch: &Tensor<f64>) -> Vec<f64> {
    let cfg = &model.config;
    let p = |name: &str| model.params.get(model.params.id_of(name).unwrap()).value.to_f64_vec();
    let (b, m, l) = (batch.shape()[0], batch.shape()[1], batch.shape()[2]);
    let k = cfg.num_classes;
    let mut logits = Vec::new();
    for n in 0..b {
        // [l, m] layout
        let raw = &batch.data()[n * m * l..(n + 1) * m * l];
        let mut x: Vec<f64> = (0..l * m).map(|i| raw[(i % m) * l + i / m]).collect();
        let (mut len, mut c_in) = (l, m);
        for (j, st) in cfg.stages.iter().enumerate() {
            let (s, d, c) = (st.slice.s, st.slice.d, st.slice.c_out);
            let w = p(&format!("stage{}.partition.weight", j + 1));
            let bias = p(&format!("stage{}.partition.bias", j + 1));
            let out_len = len.div_ceil(d);
            let mut tok = vec![0.0; out_len * c];
            for t in 0..out_len {
                for o in 0..c {
                    let mut acc = bias[o];
                    for i in 0..c_in {
                        for q in 0..s {
                            let pos = t * d + q;
                            if pos < len {
                                acc += w[(o * c_in + i) * s + q] * x[pos * c_in + i];
                            }
                        }
                    }
                    tok[t * c + o] = acc;
                }
            }
            if cfg.cpe.mode == PosMode::Contextual {
                let kw = p(&format!("stage{}.pos.weight", j + 1));
                let kb = p(&format!("stage{}.pos.bias", j + 1));
                let ks = cfg.cpe.kernel;
                let pad = (ks - 1) / 2;
                let mut enc = tok.clone();
                for t in 0..out_len {
                    for ch in 0..c {
                        let mut acc = kb[ch];
                        for q in 0..ks {
                            if let Some(pos) = (t + q).checked_sub(pad).filter(|&v| v < out_len) {
                                acc += kw[ch * ks + q] * tok[pos * c + ch];
                            }
                        }
                        enc[t * c + ch] += acc;
                    }
                }
                tok = enc;
            }
            x = tok;
            len = out_len;
            c_in = c;
        }
        let pooled: Vec<f64> = (0..c_in)
            .map(|ch| (0..len).map(|t| x[t * c_in + ch]).sum::<f64>() / len as f64)
            .collect();
        logits.extend(dense(&pooled, 1, &p("classifier.weight"), &p("classifier.bias"), k));
    }
    logits
}

fn rezero_identity() -> Outcome {
    let cfg = ModelConfig::three_stage(9, 25, 2, 2);
    let mut model = FormerTime::<f64>::build(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for p in model.params.iter_mut() {
        if p.name.ends_with("bias") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let batch = random::<f64>(&[2, 9, 144], &mut rng);
    let mut g = Graph::new();
    let x = model.input(&mut g, &batch).unwrap();
    let mut trace = ModelTrace::default();
    let logits = model.logits_var(&mut g, x, Some(&mut trace)).unwrap();
    let mut blocks = 0;
    let mut identical = 0;
    for st in &trace.stages {
        for (i, o) in st.block_inputs.iter().zip(&st.block_outputs) {
            blocks += 1;
            let same = g
                .value(*i)
                .data()
                .iter()
                .zip(g.value(*o).data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            identical += usize::from(same);
        }
    }
    let oracle = compositional_oracle(&model, &batch);
    let diff = g
        .value(logits)
        .data()
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    verdict(
        blocks == 18 && identical == blocks && diff <= 1e-9,
        format!("{identical}/{blocks} blocks bitwise identity; logits vs oracle max abs diff {diff:.2e} (<= 1e-9)"),
    )
}

fn cost_law() -> Outcome {
    let mut ratios_ok = true;
    let mut counters_ok = true;
    let mut checked = 0;
    for &l in &[64usize, 128, 256] {
        let base = mac_count_tra(l, &TRAConfig::new(32, 4, 1).unwrap())
            .unwrap()
            .score_context();
        for &r in &[2usize, 4] {
            let cfg = TRAConfig::new(32, 4, r).unwrap();
            let analytic = mac_count_tra(l, &cfg).unwrap();
            ratios_ok &= analytic.score_context() * r as u64 == base;
            let mut rng = ChaCha8Rng::seed_from_u64((l * r) as u64);
            let mut store = ParamStore::<f32>::new();
            let w = TRAWeights::register(&mut store, "tra", &cfg, &mut rng).unwrap();
            let mut g = Graph::new();
            let x = g.constant(random::<f32>(&[1, l, 32], &mut rng));
            tra_forward(&mut g, &store, x, &cfg, &w, None).unwrap();
            counters_ok &= g.macs() == analytic.total();
            checked += 1;
        }
    }
    for cfg in [
        ModelConfig::three_stage(9, 25, 2, 2),
        ModelConfig::three_stage(3, 2, 8, 8).with_width(32),
    ] {
        let l = 144;
        let model = FormerTime::<f32>::build(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = model
            .input(&mut g, &random::<f32>(&[1, cfg.input_channels, l], &mut rng))
            .unwrap();
        model.logits_var(&mut g, x, None).unwrap();
        counters_ok &= g.macs() == count_macs(&cfg, l, cfg.input_channels).unwrap().total();
    }
    verdict(
        ratios_ok && counters_ok,
        format!(
            "{checked} (l, R) pairs: score+context exactly 1/R of R=1: {ratios_ok}; analytic == executed (TRA and full model): {counters_ok}"
        ),
    )
}

fn slice_arithmetic() -> Outcome {
    let mut bad = Vec::new();
    let mut cases = 0;
    let mut grid = vec![(144usize, 2usize, 2usize, 72usize), (640, 16, 8, 80)];
    for l in [1usize, 7, 32, 33, 100] {
        for (s, d) in [(1, 1), (2, 2), (3, 2), (4, 4), (8, 4), (5, 3)] {
            grid.push((l, s, d, l.div_ceil(d)));
        }
    }
    for (l, s, d, want) in grid {
        cases += 1;
        let cfg = SliceConfig::new(s, d, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cases);
        let mut store = ParamStore::<f32>::new();
        let w = SliceWeights::register(&mut store, "p", 2, &cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random::<f32>(&[1, l, 2], &mut rng));
        let fm = FeatureMap::from_var(&g, x).unwrap();
        let out = partition(&mut g, &store, fm, &cfg, &w).unwrap();
        if out.length != want || cfg.output_len(l) != want {
            bad.push(format!("({l},{s},{d}) -> {} want {want}", out.length));
        }
    }

    let c = 5;
    let cfg = SliceConfig::new(1, 1, c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut store = ParamStore::<f32>::new();
    let w = SliceWeights::register(&mut store, "p", c, &cfg, &mut rng).unwrap();
    let eye: Vec<f32> = (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect();
    store.get_mut(w.weight).value.data_mut().copy_from_slice(&eye);
    let xs = random::<f32>(&[2, 17, c], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(xs.clone());
    let fm = FeatureMap::from_var(&g, x).unwrap();
    let out = partition(&mut g, &store, fm, &cfg, &w).unwrap();
    let exact = g.value(out.var).data() == xs.data();
    verdict(
        bad.is_empty() && exact,
        format!("{cases} (l, s, d) cases, mismatches {bad:?}; s=d=1 identity reproduces input exactly: {exact}"),
    )
}

fn run_config(name: &str) -> RunConfig {
    RunConfig::load(repo_root().join("configs").join(name)).unwrap()
}

fn learnability() -> Outcome {
    let run = run_config("longrange.toml");
    let spec = run.data.synth.clone().unwrap();
    let (train, test) = synth_splits(&spec, run.data.test_n).unwrap();
    assert_eq!(
        (train.len(), test.len(), train.length(), train.channels()),
        (500, 500, 256, 3)
    );
    let start = Instant::now();
    let mut bests = Vec::new();
    for &seed in &run.train.seeds {
        let (report, _) = train_with::<f32>(&run.model, &train, &test, &run.train, seed, |_| {}).unwrap();
        bests.push(report.best_accuracy);
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = bests.iter().filter(|&&a| a >= 0.95).count();
    verdict(
        passed == 5 && bests.len() == 5 && secs < 600.0 && run.train.max_epochs <= 50,
        format!("best accuracies {bests:?}, {passed}/5 >= 0.95, {secs:.0} s (< 600 s)"),
    )
}

fn positional_ablation() -> Outcome {
    let run = run_config("order-motif.toml");
    let spec = run.data.synth.clone().unwrap();
    let (train, test) = synth_splits(&spec, run.data.test_n).unwrap();
    let mean = |mode: PosMode| {
        let mut model = run.model.clone();
        model.cpe.mode = mode;
        let reports: Vec<_> = run
            .train
            .seeds
            .iter()
            .map(|&s| {
                train_with::<f32>(&model, &train, &test, &run.train, s, |_| {})
                    .unwrap()
                    .0
            })
            .collect();
        RepeatSummary::from_reports(&reports).unwrap().mean
    };
    let none = mean(PosMode::None);
    let learnable = mean(PosMode::Learnable);
    let contextual = mean(PosMode::Contextual);
    verdict(
        run.train.seeds.len() == 5 && contextual - none >= 0.10 && learnable - none >= 0.05,
        format!(
            "5-seed means: none {none:.4}, learnable {learnable:.4} (+{:.1} pts, need 5), contextual {contextual:.4} (+{:.1} pts, need 10)",
            100.0 * (learnable - none),
            100.0 * (contextual - none)
        ),
    )
}

fn shift_equivariance() -> Outcome {
    let (l, c, shift) = (48, 16, 5);
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let kernel = [3, 5, 7, 3, 5][seed as usize];
        let cfg = CPEConfig {
            kernel,
            mode: PosMode::Contextual,
            ..CPEConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let w = PosWeights::register(&mut store, "pos", c, &cfg, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let long = random::<f32>(&[1, l + shift, c], &mut rng);
        let a = Tensor::new(vec![1, l, c], long.data()[..l * c].to_vec()).unwrap();
        let b = Tensor::new(vec![1, l, c], long.data()[shift * c..].to_vec()).unwrap();
        let mut g = Graph::new();
        let (xa, xb) = (g.constant(a), g.constant(b));
        let ya = positional_encode(&mut g, &store, xa, &cfg, &w).unwrap();
        let yb = positional_encode(&mut g, &store, xb, &cfg, &w).unwrap();
        let pad = (kernel - 1) / 2;
        let (ya, yb) = (g.value(ya).to_f64_vec(), g.value(yb).to_f64_vec());
        for t in pad..l - shift - pad {
            for ch in 0..c {
                worst = worst.max((yb[t * c + ch] - ya[(t + shift) * c + ch]).abs());
            }
        }
    }
    verdict(
        worst <= 1e-5,
        format!("max interior abs diff {worst:.2e} over 5 seeds (<= 1e-5)"),
    )
}

/// Reads `# expect ...` or `# expect-error line N` from a fixture's first line.
fn expectation(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().next().unwrap().trim_start_matches('#').trim().to_string()
}

fn shape_of(ds: &TimeSeriesDataset) -> String {
    format!(
        "expect n={} m={} l={} classes={}",
        ds.len(),
        ds.channels(),
        ds.length(),
        ds.num_classes()
    )
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
}

fn parser() -> Outcome {
    let mut problems = Vec::new();
    let good = sorted_files(&fixtures().join("good"));
    let malformed = sorted_files(&fixtures().join("malformed"));
    for path in &good {
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let ds = match read_ts_file(path) {
            Ok(ds) => ds,
            Err(e) => {
                problems.push(format!("{name}: {e}"));
                continue;
            }
        };
        if shape_of(&ds) != expectation(path) {
            problems.push(format!("{name}: got {:?}", shape_of(&ds)));
        }
        match parse_ts(&write_ts(&ds).unwrap()) {
            Ok(again)
                if again.values() == ds.values()
                    && again.labels() == ds.labels()
                    && again.class_names() == ds.class_names() => {}
            _ => problems.push(format!("{name}: round trip not exact")),
        }
    }
    for path in &malformed {
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let want: usize = expectation(path)
            .trim_start_matches("expect-error line")
            .trim()
            .parse()
            .unwrap();
        match read_ts_file(path) {
            Err(Error::Parse { line, .. }) if line == want => {}
            Err(Error::Parse { line, msg }) => problems.push(format!("{name}: line {line} ({msg}), want {want}")),
            other => problems.push(format!("{name}: expected a located error, got {other:?}")),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vals: Vec<f64> = (0..4 * 2 * 9)
        .map(|_| rng.gen_range(-1e3..1e3) * rng.gen::<f64>().powi(7))
        .collect();
    let ds = TimeSeriesDataset::new("rt", (4, 2, 9), vals, vec![0, 1, 1, 0], vec!["x".into(), "y".into()]).unwrap();
    if parse_ts(&write_ts(&ds).unwrap())
        .map(|d| d.values() == ds.values())
        .ok()
        != Some(true)
    {
        problems.push("random values round trip not exact".into());
    }
    verdict(
        problems.is_empty() && !good.is_empty() && !malformed.is_empty(),
        format!(
            "{} good and {} malformed fixtures; problems {problems:?}",
            good.len(),
            malformed.len()
        ),
    )
}

fn uea_spot_check() -> Outcome {
    let Some(dir) = std::env::var_os("FORMERTIME_AWR_DIR").map(PathBuf::from) else {
        return Outcome::Skip("FORMERTIME_AWR_DIR not set".into());
    };
    let train_path = dir.join("ArticularyWordRecognition_TRAIN.ts");
    let test_path = dir.join("ArticularyWordRecognition_TEST.ts");
    if !train_path.is_file() || !test_path.is_file() {
        return Outcome::Skip(format!("AWR files not found in {}", dir.display()));
    }
    let mut run = run_config("awr.toml");
    let train = read_ts_file(&train_path).unwrap();
    let test = read_ts_file(&test_path).unwrap();
    run.model.infer_shape(train.channels(), train.num_classes());
    let start = Instant::now();
    let reports: Vec<_> = run
        .train
        .seeds
        .iter()
        .map(|&s| {
            train_with::<f32>(&run.model, &train, &test, &run.train, s, |_| {})
                .unwrap()
                .0
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let mean = RepeatSummary::from_reports(&reports).unwrap().mean;
    verdict(
        (mean - 0.9847).abs() <= 0.05 && secs <= 1800.0,
        format!("5-seed mean best {mean:.4} (0.9847 ± 0.05), {secs:.0} s (<= 1800 s)"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("TRA equivalence oracle", tra_equivalence),
        ("ReZero identity at init", rezero_identity),
        ("cost law", cost_law),
        ("slice arithmetic", slice_arithmetic),
        ("learnability", learnability),
        ("positional ablation direction", positional_ablation),
        ("CPE interior shift-equivariance", shift_equivariance),
        ("parser", parser),
        ("UEA spot check", uea_spot_check),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} criterion {n:>2} {name}: {detail} [{secs:.1} s]");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
