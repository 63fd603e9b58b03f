//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any hard criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lifelong_lcd::bench::{method_means, run_experiment, ExperimentConfig, MethodMean, MethodRun};
use lifelong_lcd::data::{generate_synthetic, Dataset, SynthSpec};
use lifelong_lcd::eval::{recall_at_full_precision, summarize, PerformanceMatrix};
use lifelong_lcd::frame::{Frame, FrameMeta, ImageTensor};
use lifelong_lcd::geometry::{
    classify_pair, covisible_fraction, siou, CameraPose, CovisibilityParams, DepthMap, Intrinsics,
    Label, LabelRule, View,
};
use lifelong_lcd::gradcheck::run_gradcheck;
use lifelong_lcd::memory::MemoryBuffer;
use lifelong_lcd::model::ConvLayer;
use lifelong_lcd::trainer::{
    run, Method, Retained, RunHooks, RunOptions, StepReport, TrainConfig, Trainer,
};
use lifelong_lcd::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Warn(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let report = match run_gradcheck(0) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("suite errored: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = report
        .cases
        .iter()
        .map(|c| c.max_rel_error)
        .fold(0.0, f64::max);
    let names: Vec<_> = report
        .cases
        .iter()
        .map(|c| format!("{} {:.1e}", c.name, c.max_rel_error))
        .collect();
    check(
        report.passed() && worst <= 1e-4 && report.params <= 5000 && secs < 60.0,
        format!(
            "{} params, worst rel error {worst:.2e} ({}), {secs:.1}s",
            report.params,
            names.join(", ")
        ),
    )
}

fn metrics() -> Outcome {
    let m = |r: Vec<Vec<f64>>| {
        let names = (0..r.len()).map(|i| format!("e{i}")).collect();
        summarize(&PerformanceMatrix::new(names, r).unwrap())
    };
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    // (matrix, AP, BWT, FWT) worked out by hand
    let fixtures: Vec<(Vec<Vec<f64>>, f64, f64, f64)> = vec![
        (vec![vec![0.37; 3]; 3], 0.37, 0.0, 0.37),
        (vec![vec![0.8, 0.2], vec![0.6, 0.7]], 0.7, -0.2, 0.2),
        (
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            0.5,
            -1.0,
            0.0,
        ),
        (
            vec![
                vec![0.5, 0.1, 0.2],
                vec![0.4, 0.6, 0.3],
                vec![0.3, 0.5, 0.7],
            ],
            0.5,
            -0.4 / 3.0,
            0.2,
        ),
    ];
    let mut bad = Vec::new();
    for (i, (r, ap, bwt, fwt)) in fixtures.into_iter().enumerate() {
        let s = m(r);
        let ok = close(s.ap, ap)
            && s.bwt.is_some_and(|b| close(b, bwt))
            && s.fwt.is_some_and(|f| close(f, fwt));
        if !ok {
            bad.push(format!("fixture {i}: {s:?}"));
        }
    }
    let single = m(vec![vec![0.4]]);
    if !(close(single.ap, 0.4) && single.bwt.is_none() && single.fwt.is_none()) {
        bad.push(format!("T=1: {single:?}"));
    }
    check(
        bad.is_empty(),
        if bad.is_empty() {
            "4 matrices and the T=1 case match to 1e-12".into()
        } else {
            bad.join("; ")
        },
    )
}

/// Best recall over every threshold whose accepted set (strictly above the
/// threshold) contains no false pair.
fn sweep_recall(pairs: &[(f64, bool)]) -> f64 {
    let positives = pairs.iter().filter(|p| p.1).count() as f64;
    let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    thresholds.push(f64::NEG_INFINITY);
    let mut best: f64 = 0.0;
    for &t in &thresholds {
        let accepted: Vec<_> = pairs.iter().filter(|p| p.0 > t).collect();
        if accepted.iter().any(|p| !p.1) {
            continue;
        }
        best = best.max(accepted.len() as f64 / positives);
    }
    best
}

fn recall() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = Vec::new();
    for f in 0..20 {
        let n = rng.random_range(5..=200);
        let mut pairs: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                // coarse grid so ties between true and false pairs occur
                let s = (rng.random_range(-1.0..1.0f64) * 20.0).round() / 20.0;
                (s, rng.random_bool(0.3))
            })
            .collect();
        if !pairs.iter().any(|p| p.1) {
            pairs[0].1 = true;
        }
        let got = recall_at_full_precision(&pairs).unwrap();
        let want = sweep_recall(&pairs);
        if got != want {
            mismatches.push(format!("fixture {f}: {got} vs {want}"));
        }
    }
    check(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "20 random fixtures match the threshold sweep exactly".into()
        } else {
            mismatches.join("; ")
        },
    )
}

fn place_frame(index: u64, place: u32) -> Frame {
    let mut meta = FrameMeta::bare(0, "env0", "walk", index);
    meta.place = Some(place);
    Frame::new(meta, ImageTensor::filled(1, 1, 1, 0.0).unwrap())
}

fn plane_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 40.0,
        fy: 40.0,
        cx: 32.0,
        cy: 24.0,
        width: 64,
        height: 48,
    }
}

/// Camera at `(x, 0, 0)` looking down +z at the plane z = `depth`.
fn plane_frame(index: u64, x: f64, y: f64, depth: f64) -> Frame {
    let mut meta = FrameMeta::bare(0, "env0", "walk", index);
    meta.pose = Some(CameraPose::new([1.0, 0.0, 0.0, 0.0], [x, y, 0.0]).unwrap());
    meta.intrinsics = Some(plane_intrinsics());
    meta.depth = Some(std::sync::Arc::new(DepthMap::constant(64, 48, depth)));
    Frame::new(meta, ImageTensor::filled(1, 1, 1, 0.0).unwrap())
}

fn buffer_round(
    capacity: usize,
    rule: LabelRule,
    mut make: impl FnMut(u64, &mut ChaCha8Rng) -> Frame,
    inserts: u64,
    seed: u64,
) -> std::result::Result<(usize, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = MemoryBuffer::new(capacity, rule).map_err(|e| e.to_string())?;
    for i in 0..inserts {
        let f = make(i, &mut rng);
        buf.insert(f).map_err(|e| e.to_string())?;
    }
    let n = buf.len();
    let mut ambiguous = 0;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j {
                Label::Positive
            } else {
                classify_pair(&buf.slot(i).meta, &buf.slot(j).meta, &rule)
                    .map_err(|e| e.to_string())?
            };
            if want == Label::Ambiguous {
                ambiguous += 1;
            }
            if buf.relation(i, j) != want {
                return Err(format!(
                    "M={capacity}: relation ({i},{j}) differs from rebuild"
                ));
            }
        }
    }
    let mut violations = 0;
    for _ in 0..10_000 {
        let Some(t) = buf.sample_triplet(&mut rng) else {
            if has_triplet(&buf) {
                return Err(format!(
                    "M={capacity}: sampling failed although a triplet exists"
                ));
            }
            return Err(format!(
                "M={capacity}: fixture left no triplet under {rule:?}"
            ));
        };
        let ap = classify_pair(&t.anchor.meta, &t.positive.meta, &rule).unwrap();
        let an = classify_pair(&t.anchor.meta, &t.negative.meta, &rule).unwrap();
        if ap != Label::Positive
            || an != Label::Negative
            || t.anchor.meta.key == t.positive.meta.key
        {
            violations += 1;
        }
    }
    if violations > 0 {
        return Err(format!(
            "M={capacity}: {violations} label contract violations"
        ));
    }
    Ok((n, ambiguous))
}

fn has_triplet(buf: &MemoryBuffer) -> bool {
    let n = buf.len();
    (0..n).any(|a| {
        (0..n).any(|p| p != a && buf.relation(a, p) == Label::Positive)
            && (0..n).any(|q| buf.relation(a, q) == Label::Negative)
    })
}

fn buffer() -> Outcome {
    let ring = LabelRule::PlaceId {
        max_ring_dist: 1,
        places: Some(16),
    };
    let mut notes = Vec::new();
    for (m, seed) in [(8usize, 1u64), (64, 2)] {
        // a forward ring walk, like the stream, with occasional jumps
        let mut place = 0i64;
        let walk = |i, rng: &mut ChaCha8Rng| {
            place += if rng.random_bool(0.05) {
                rng.random_range(2..14)
            } else {
                rng.random_range(0..=2)
            };
            place_frame(i, place.rem_euclid(16) as u32)
        };
        match buffer_round(m, ring, walk, 1000, seed) {
            Ok((n, _)) => notes.push(format!("M={m} ({n} slots) ok")),
            Err(e) => return Outcome::Fail(e),
        }
    }
    // sIoU labels add the ambiguous middle that sampling must avoid
    let covis = LabelRule::siou(0.7, 0.1);
    match buffer_round(
        8,
        covis,
        // clusters 16 m apart, each with a close and a half-overlapping frame
        |i, rng| {
            let x = 16.0 * ((i / 3) % 5) as f64 + [0.0, 0.8, 5.0][(i % 3) as usize];
            plane_frame(i, x + rng.random_range(-0.1..0.1), 0.0, 10.0)
        },
        1000,
        3,
    ) {
        Ok((_, amb)) => notes.push(format!("sIoU rule M=8 ok with {amb} ambiguous relations")),
        Err(e) => return Outcome::Fail(e),
    }
    Outcome::Pass(format!(
        "{}; 10000 triplets each, zero violations",
        notes.join(", ")
    ))
}

fn covisibility() -> Outcome {
    let depth = 10.0;
    let intr = plane_intrinsics();
    // lateral offsets as fractions of the footprint on the plane
    let width_m = intr.width as f64 * depth / intr.fx;
    let height_m = intr.height as f64 * depth / intr.fy;
    let shifts = [(0.5, 0.0), (0.25, 0.0), (0.3, 0.4), (0.0, 0.75)];
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for g in [8usize, 16, 32] {
        let params = CovisibilityParams {
            grid: g,
            ..CovisibilityParams::default()
        };
        for &(sx, sy) in &shifts {
            let a = plane_frame(0, 0.0, 0.0, depth);
            let b = plane_frame(1, sx * width_m, sy * height_m, depth);
            let exact = (1.0 - sx) * (1.0 - sy);
            let va = View::from_meta(&a.meta).unwrap();
            let vb = View::from_meta(&b.meta).unwrap();
            let f = covisible_fraction(va, vb, &params).unwrap();
            let err = (f - exact).abs();
            worst = worst.max(err * g as f64);
            if err > 2.0 / g as f64 {
                ok = false;
            }
        }
    }
    let algebra = siou(1.0, 1.0).unwrap() == 1.0
        && siou(0.5, 0.5).unwrap() == 1.0 / 3.0
        && siou(0.0, 0.9).unwrap() == 0.0;
    check(
        ok && algebra,
        format!(
            "plane fixture max error {worst:.3}/G over G in {{8,16,32}}, algebraic cases {}",
            if algebra { "exact" } else { "WRONG" }
        ),
    )
}

fn benchmark_report(runs: &[MethodRun], means: &[MethodMean]) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).unwrap();
    let path = dir.join("benchmark_report.json");
    let report = serde_json::json!({
        "means": means.iter().map(|m| serde_json::json!({
            "method": m.method.name(), "ap": m.ap, "bwt": m.bwt, "fwt": m.fwt, "runs": m.runs,
        })).collect::<Vec<_>>(),
        "runs": runs,
    });
    fs::write(&path, serde_json::to_string_pretty(&report).unwrap()).unwrap();
    path
}

fn mean_of(means: &[MethodMean], m: Method) -> MethodMean {
    *means.iter().find(|x| x.method == m).unwrap()
}

fn forgetting(means: &[MethodMean], secs: f64) -> Outcome {
    let ft = mean_of(means, Method::Finetune);
    let al = mean_of(means, Method::Airloop);
    check(
        al.bwt - ft.bwt >= 0.02 && al.ap >= ft.ap,
        format!(
            "BWT airloop {:.4} vs finetune {:.4} (gap {:.4}, need >= 0.02); AP {:.4} vs {:.4}; {:.0}s for all methods",
            al.bwt,
            ft.bwt,
            al.bwt - ft.bwt,
            al.ap,
            ft.ap,
            secs
        ),
    )
}

fn relational(means: &[MethodMean], report: &Path) -> Outcome {
    let b = |m| mean_of(means, m).bwt;
    let detail = format!(
        "BWT mas {:.4} rmas {:.4} kd {:.4} rkd {:.4}; report {}",
        b(Method::Mas),
        b(Method::Rmas),
        b(Method::Kd),
        b(Method::Rkd),
        report.display()
    );
    if b(Method::Rmas) >= b(Method::Mas) && b(Method::Rkd) >= b(Method::Kd) {
        Outcome::Pass(detail)
    } else {
        Outcome::Warn(format!("ordering not reproduced: {detail}"))
    }
}

#[derive(Default)]
struct Peak(Retained);

impl RunHooks for Peak {
    fn on_step(&mut self, trainer: &Trainer, _r: &StepReport) -> Result<()> {
        let now = trainer.retained();
        self.0.frames = self.0.frames.max(now.frames);
        self.0.floats = self.0.floats.max(now.floats);
        Ok(())
    }
}

fn small_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        method: Method::Airloop,
        ..TrainConfig::default()
    };
    c.memory.capacity = 64;
    c.model.input = [3, 8, 8];
    c.model.conv = vec![
        ConvLayer {
            channels: 4,
            kernel: 3,
            stride: 2,
        },
        ConvLayer {
            channels: 6,
            kernel: 3,
            stride: 2,
        },
    ];
    c.model.hidden = 8;
    c.model.dim = 8;
    c
}

fn small_spec(walk_len: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        envs: 2,
        places: 8,
        height: 8,
        width: 8,
        max_frequency: 3.0,
        walk_len,
        seed,
        ..SynthSpec::default()
    }
}

fn constant_memory() -> Outcome {
    let capacity = small_config(0).memory.capacity;
    let mut peaks = Vec::new();
    for n in [1000usize, 10_000] {
        let ds = generate_synthetic(&small_spec(n, 5))
            .unwrap()
            .into_dataset()
            .unwrap();
        let mut trainer = Trainer::for_dataset(small_config(0), &ds).unwrap();
        let mut hooks = Peak::default();
        trainer.run_stream(&ds, &mut hooks).unwrap();
        peaks.push((n, hooks.0));
    }
    let ok = peaks.iter().all(|(_, p)| p.frames <= capacity) && peaks[0].1 == peaks[1].1;
    check(
        ok,
        format!(
            "M={capacity}: peak retained {}",
            peaks
                .iter()
                .map(|(n, p)| format!("N={n}: {} frames / {} floats", p.frames, p.floats))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let ds: Dataset = generate_synthetic(&small_spec(300, 9))
        .unwrap()
        .into_dataset()
        .unwrap();
    let mut config = small_config(7);
    config.train.checkpoint_every = 100;
    let opts = |name: &str, resume: Option<PathBuf>| RunOptions {
        out_dir: root.path().join(name),
        resume,
        access_log: false,
    };
    let a = run(&ds, &config, &opts("a", None)).unwrap();
    let b = run(&ds, &config, &opts("b", None)).unwrap();
    let same_seed = bits(&a.params) == bits(&b.params);
    // step 300 falls inside the second environment's 240 training frames
    let mid = root.path().join("a").join("step_300.ckpt");
    let resumed = run(&ds, &config, &opts("c", Some(mid.clone()))).unwrap();
    let resume_ok = bits(&resumed.params) == bits(&a.params) && resumed.steps == a.steps;
    check(
        same_seed && resume_ok && mid.exists(),
        format!(
            "same seed bit-identical: {same_seed}; resume from step 300 of {} bit-identical: {resume_ok}",
            a.steps
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Outcome::Pass(d) => println!("PASS  {name}: {d}"),
        Outcome::Warn(d) => println!("WARN  {name}: {d}"),
        Outcome::Fail(d) => {
            failed += 1;
            println!("FAIL  {name}: {d}");
        }
    };
    report("1 gradient correctness", gradients());
    report("2 metric exactness", metrics());
    report("3 recall at full precision", recall());
    report("4 buffer consistency", buffer());
    report("5 sIoU convergence", covisibility());

    let start = Instant::now();
    let runs = run_experiment(&ExperimentConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let means = method_means(&runs);
    let archived = benchmark_report(&runs, &means);
    report("6 forgetting reduction", forgetting(&means, secs));
    report(
        "7 relational vs non-relational",
        relational(&means, &archived),
    );

    report("8 constant memory", constant_memory());
    report("9 determinism and resume", determinism());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all hard criteria passed");
}
