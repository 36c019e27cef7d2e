//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//! Run with `cargo test -p lga-core --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use lga_core::client::{cbl_loss, detect_transition, local_train, ClassCounts, ClientState, LocalHyperparams, TaskLedger};
use lga_core::config::{SimConfig, Variant};
use lga_core::coordinator::{run_simulation, write_outputs, World};
use lga_core::data::{build_task_stream, generate_synthetic, ExemplarMemory, Samples};
use lga_core::demo::privacy_triplets;
use lga_core::gradcheck::{run_suite, SuiteOptions};
use lga_core::loss::cross_entropy;
use lga_core::proxy::infer_label;
use lga_core::rng::seeded;
use lga_core::{client::encode_prototype_gradients, Activation, Batch, ModelParams, Tensor2};
use rand::Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const CBL_REDUCTION_TOL: f64 = 1e-12;
const WEIGHT_MASS_TOL: f64 = 1e-9;
const RECON_RATIO: f64 = 0.01;
const RECON_STEPS: usize = 300;
const RECON_MIN_SUCCESS: f64 = 0.9;
const RECON_TRIALS: usize = 50;
const MEMORY_SEQUENCES: usize = 10_000;
const DETECTION_RUNS: u64 = 100;
const DETECTION_P: f64 = 0.01;
const DESK_SEEDS: u64 = 5;
const DESK_MIN_WINS: usize = 4;
const PROTOTYPE_SHARE: f64 = 0.05;

/// Written to the raw stderr handle so the line survives test output capture.
fn verdict(n: usize, name: &str, pass: bool, detail: String) {
    use std::io::Write;
    let line = format!("[criterion {n:>2}] {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn desk_ledger(tasks: usize, per_task: usize) -> TaskLedger {
    TaskLedger::from_ordered(&build_task_stream(tasks * per_task, tasks, per_task, 0).unwrap().ordered())
}

fn random_model(rng: &mut impl Rng, input: usize, classes: usize) -> ModelParams {
    let h = rng.random_range(3..9);
    let f = rng.random_range(3..7);
    ModelParams::new_random(&[input, h, f, classes], Activation::Sigmoid, &mut seeded(rng.random())).unwrap()
}

fn random_batch(rng: &mut impl Rng, input: usize, labels: &[usize], b: usize) -> Batch {
    let ys: Vec<usize> = (0..b).map(|_| labels[rng.random_range(0..labels.len())]).collect();
    Batch::new(Tensor2::from_fn(b, input, |_, _| rng.random_range(-1.0..1.0)), ys).unwrap()
}

#[test]
fn c01_gradient_correctness() {
    let start = Instant::now();
    let reports = run_suite(&SuiteOptions { configs: 20, seed: 0, fault: None }).unwrap();
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let rows: Vec<String> = reports.iter().map(|r| format!("{} {:.1e}", r.loss.symbol(), r.max_rel_error)).collect();
    let pass = reports.iter().all(|r| r.passed(GRAD_TOL) && r.configs >= 20) && elapsed < GRAD_BUDGET;
    verdict(1, "gradient correctness", pass, format!("max {worst:.2e} <= {GRAD_TOL:e} [{}] in {elapsed:.2?}", rows.join(", ")));
}

#[test]
fn c02_cbl_reduces_to_ce_on_first_task() {
    let mut rng = seeded(2002);
    let ledger = desk_ledger(5, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let input = rng.random_range(2..7);
        let classes = rng.random_range(2..5);
        let model = random_model(&mut rng, input, classes);
        let labels: Vec<usize> = (0..classes).collect();
        let b = rng.random_range(1..20);
        let batch = random_batch(&mut rng, input, &labels, b);
        let cbl = cbl_loss(&model, &batch, &ledger, ClassCounts { old: 0, new: classes }).unwrap();
        // independent mean CE
        let probs = model.forward(&batch.inputs).unwrap().probs;
        let ce: f64 =
            (0..b).map(|i| cross_entropy(probs.row(i), batch.labels[i]).unwrap()).sum::<f64>() / b as f64;
        worst = worst.max((cbl.loss - ce).abs());
    }
    verdict(2, "CBL reduction", worst <= CBL_REDUCTION_TOL, format!("max |L_CB - L_CE| = {worst:.2e} over 100 batches"));
}

#[test]
fn c03_per_task_weight_mass() {
    let mut rng = seeded(2003);
    let ledger = desk_ledger(5, 2);
    let mut worst: f64 = 0.0;
    let mut groups = 0;
    for _ in 0..200 {
        let tasks_seen = rng.random_range(2..=5);
        let classes = tasks_seen * 2;
        let model = random_model(&mut rng, 5, classes);
        let labels: Vec<usize> = (0..classes).collect();
        let b = rng.random_range(2..40);
        let batch = random_batch(&mut rng, 5, &labels, b);
        let counts = ClassCounts { old: classes - 2, new: 2 };
        let w = cbl_loss(&model, &batch, &ledger, counts).unwrap().weights;
        let mut per_task: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (wi, &y) in w.iter().zip(&batch.labels) {
            let e = per_task.entry(y / 2).or_default();
            e.0 += wi;
            e.1 += 1;
        }
        for (sum, n) in per_task.values() {
            worst = worst.max((sum / *n as f64 - 1.0).abs());
            groups += 1;
        }
    }
    verdict(3, "per-task weight mass", worst <= WEIGHT_MASS_TOL, format!("max |mean - 1| = {worst:.2e} over {groups} task groups"));
}

#[test]
fn c04_label_inference() {
    let cfg = SimConfig::desk(0);
    let mut dims = vec![cfg.data.dim];
    dims.extend(&cfg.proxy.encoder_hidden);
    dims.push(cfg.data.classes);
    let mut rng = seeded(2004);
    let mut hits = 0;
    for trial in 0..1000u64 {
        let encoder = ModelParams::new_random(&dims, Activation::Sigmoid, &mut seeded(trial / 10)).unwrap();
        let x: Vec<f64> = (0..cfg.data.dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = rng.random_range(0..cfg.data.classes);
        let g = encode_prototype_gradients(&x, y, &encoder).unwrap();
        hits += usize::from(infer_label(&g).unwrap() == y);
    }
    verdict(4, "label inference", hits == 1000, format!("{hits}/1000 through a {}-layer encoder {dims:?}", dims.len() - 1));
}

#[test]
fn c05_reconstruction() {
    let cfg = SimConfig::desk(0);
    let start = Instant::now();
    let triplets = privacy_triplets(&cfg, 0, RECON_TRIALS, 20).unwrap();
    let ok = triplets.iter().filter(|t| t.loss_ratio() <= RECON_RATIO && t.steps_taken <= RECON_STEPS).count();
    let n = triplets.len() as f64;
    let cos_p = triplets.iter().map(|t| t.cos_to_perturbed).sum::<f64>() / n;
    let cos_s = triplets.iter().map(|t| t.cos_to_source).sum::<f64>() / n;
    let pass = cfg.proxy.recon_steps == RECON_STEPS && ok as f64 >= RECON_MIN_SUCCESS * n && cos_p > cos_s;
    verdict(
        5,
        "reconstruction",
        pass,
        format!(
            "{ok}/{} reach L_IR ratio <= {RECON_RATIO} in {RECON_STEPS} steps; mean cos(rec, perturbed) {cos_p:.4} vs cos(rec, source) {cos_s:.4}; {:.2?}",
            triplets.len(),
            start.elapsed()
        ),
    );
}

fn balanced(counts: &[usize], budget: usize) -> bool {
    let total: usize = counts.iter().sum();
    let (lo, hi) = (counts.iter().min().copied().unwrap_or(0), counts.iter().max().copied().unwrap_or(0));
    total <= budget && hi - lo <= 1 && counts.iter().all(|&c| c <= budget.div_ceil(counts.len().max(1)))
}

#[test]
fn c06_memory_discipline() {
    let mut rng = seeded(2006);
    let mut bad_sequences = 0;
    let mut updates = 0;
    for _ in 0..MEMORY_SEQUENCES {
        let dim = 3;
        let budget = rng.random_range(1..30);
        let model = ModelParams::new_random(&[dim, 4, 3, 8], Activation::Sigmoid, &mut seeded(rng.random())).unwrap();
        let mut memory = ExemplarMemory::new(budget);
        let mut next_class = 0;
        let mut ok = true;
        for _ in 0..rng.random_range(1..5) {
            let new = rng.random_range(1..3);
            let mut labels = Vec::new();
            for c in next_class..next_class + new {
                // enough samples that the quota is always reachable
                labels.extend(std::iter::repeat_n(c, budget + rng.random_range(0..3)));
            }
            next_class += new;
            let inputs = Tensor2::from_fn(labels.len(), dim, |_, _| rng.random_range(0.0..1.0));
            memory = memory.update(&Samples::new(inputs, labels).unwrap(), &model).unwrap().memory;
            updates += 1;
            ok &= balanced(&memory.counts(), budget) && memory.counts().iter().all(|&c| c == budget / memory.counts().len());
        }
        bad_sequences += usize::from(!ok);
    }

    // full simulations: every client memory after every round
    let mut sim_violations = 0;
    let mut checked = 0;
    for seed in 0..2 {
        let cfg = SimConfig::desk(seed);
        let mut world = World::new(&cfg).unwrap();
        for t in 1..=cfg.tasks {
            for r in 1..=cfg.rounds_per_task {
                world.run_round(t, r).unwrap();
                for c in &world.clients {
                    checked += 1;
                    sim_violations += usize::from(!balanced(&c.memory.counts(), cfg.memory.budget));
                }
            }
        }
    }
    verdict(
        6,
        "memory discipline",
        bad_sequences == 0 && sim_violations == 0,
        format!(
            "{bad_sequences}/{MEMORY_SEQUENCES} randomized sequences ({updates} updates) and {sim_violations}/{checked} simulated client memories out of bounds"
        ),
    );
}

/// Upper tail `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
fn sign_test_p(k: usize, n: usize) -> f64 {
    let mut coef = 1.0f64;
    let mut tail = 0.0;
    for i in 0..=n {
        if i >= k {
            tail += coef;
        }
        coef = coef * (n - i) as f64 / (i + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

/// One client trains plain CE on classes {0, 1}. At `switch` the classifier
/// is widened to four outputs and, unless `control`, the data becomes classes
/// {2, 3}. The control run is a diagnostic only: it shows how much of the
/// rise comes from widening alone. Returns the rounds where the test fired and the entropy per round.
fn detection_run(cfg: &SimConfig, run: u64, switch: usize, control: bool) -> (Vec<usize>, Vec<f64>) {
    // the method's default learning rate is stable for plain CE on one client
    let hyper = LocalHyperparams { balance: false, distill: false, lr: LocalHyperparams::default().lr, ..cfg.local_hyperparams() };
    let ledger = desk_ledger(5, 2);
    let mut rng = seeded(7000 + run);
    let data = generate_synthetic(run, &cfg.data.synthetic_spec()).unwrap();
    let of = |classes: &[usize]| data.train.filter_classes(|c| classes.contains(&c));
    let mut model = ModelParams::new_classifier(&[cfg.data.dim, 48, 32, 2], Activation::Sigmoid, &mut seeded(run)).unwrap();
    let mut state = ClientState::new(0, cfg.memory.budget, cfg.data.dim);
    let (mut fired, mut entropies) = (Vec::new(), Vec::new());
    for r in 1..=switch + 2 {
        if r == 1 {
            state.task_data = of(&[0, 1]);
        } else if r == switch {
            if !control {
                state.task_data = of(&[2, 3]);
            }
            model = model.widen(4, &mut rng).unwrap();
        }
        let d = detect_transition(&mut state, &model, cfg.local.r_e).unwrap().unwrap();
        entropies.push(d.entropy);
        if d.transitioned {
            fired.push(r);
        }
        state.refresh_counts();
        model = local_train(&mut state, &hyper, &model, &ledger, &mut rng).unwrap().model;
        state.memory = state.memory.update(&state.task_data, &model).unwrap().memory;
    }
    (fired, entropies)
}

#[test]
fn c07_transition_detection() {
    let cfg = SimConfig::desk(0);
    let (mut exact, mut false_pos, mut control_fires, mut rises) = (0, 0, 0, 0);
    let (mut pre, mut at) = (0.0, 0.0);
    for run in 0..DETECTION_RUNS {
        let switch = seeded(run).random_range(3..=6);
        let (fired, h) = detection_run(&cfg, run, switch, false);
        exact += usize::from(fired == [switch]);
        false_pos += fired.iter().filter(|&&r| r != switch).count();
        rises += usize::from(h[switch - 1] > h[switch - 2]);
        pre += h[switch - 2];
        at += h[switch - 1];
        control_fires += detection_run(&cfg, run, switch, true).0.len();
    }
    let n = DETECTION_RUNS as usize;
    let p = sign_test_p(rises, n);
    verdict(
        7,
        "transition detection",
        exact == n && false_pos == 0 && p < DETECTION_P,
        format!(
            "exact {exact}/{n}, false positives {false_pos}, mean entropy {:.3} -> {:.3}, rose in {rises}/{n} (sign test p = {p:.1e}) at r_e {}; diagnostic: widening without new data fired in {control_fires}/{n} runs",
            pre / n as f64,
            at / n as f64,
            cfg.local.r_e
        ),
    );
}

#[test]
fn c08_desk_anti_forgetting_trend() {
    let start = Instant::now();
    let (mut wins_sdl, mut wins_fedavg) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..DESK_SEEDS {
        let run = |variant| {
            let mut cfg = SimConfig::desk(seed);
            cfg.variant = variant;
            run_simulation(&cfg).unwrap().summary
        };
        let (lga, no_sdl, fedavg) = (run(Variant::Lga), run(Variant::NoSdl), run(Variant::FedavgCe));
        wins_sdl += usize::from(lga.average > no_sdl.average);
        wins_fedavg += usize::from(lga.average > fedavg.average);
        rows.push(format!(
            "seed {seed}: Avg. LGA {:.1} / no-SDL {:.1} ({:+.1}) / FedAvg+CE {:.1} ({:+.1}); final {:.1} / {:.1} / {:.1}",
            100.0 * lga.average,
            100.0 * no_sdl.average,
            100.0 * (lga.average - no_sdl.average),
            100.0 * fedavg.average,
            100.0 * (lga.average - fedavg.average),
            100.0 * lga.final_accuracy,
            100.0 * no_sdl.final_accuracy,
            100.0 * fedavg.final_accuracy,
        ));
    }
    let detail = format!(
        "LGA beats no-SDL in {wins_sdl}/{DESK_SEEDS} and FedAvg+CE in {wins_fedavg}/{DESK_SEEDS} seeds (need {DESK_MIN_WINS}); {:.2?}\n    {}",
        start.elapsed(),
        rows.join("\n    ")
    );
    verdict(
        8,
        "desk anti-forgetting trend",
        wins_sdl >= DESK_MIN_WINS && wins_fedavg >= DESK_MIN_WINS,
        detail,
    );
}

fn read_tree(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn c09_determinism() {
    let cfg = SimConfig::from_toml(&SimConfig::desk(11).to_toml().unwrap()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for (i, threads) in [1usize, 4, 4].into_iter().enumerate() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let outcome = pool.install(|| run_simulation(&cfg)).unwrap();
        let dir = tmp.path().join(format!("run{i}"));
        write_outputs(&outcome, &dir).unwrap();
        trees.push(read_tree(&dir));
    }
    let files = trees[0].len();
    let identical = trees.iter().all(|t| *t == trees[0]) && trees[0].contains_key("metrics.jsonl") && files >= 3;
    verdict(9, "determinism", identical, format!("{files} output files byte-identical across 3 runs (1, 4, 4 threads)"));
}

#[test]
fn c10_communication_accounting() {
    let mut exact = true;
    let mut worst_share: f64 = 0.0;
    let mut per_task_bytes = Vec::new();
    for seed in 0..DESK_SEEDS {
        let cfg = SimConfig::desk(seed);
        // K-layer encoder gradient: weights and biases of every layer, 8 bytes each
        let mut dims = vec![cfg.data.dim];
        dims.extend(&cfg.proxy.encoder_hidden);
        dims.push(cfg.data.classes);
        let grad_bytes: u64 = dims.windows(2).map(|w| ((w[0] + 1) * w[1] * 8) as u64).sum();
        let out = run_simulation(&cfg).unwrap();
        let mut by_task = vec![0u64; cfg.tasks];
        let mut sent = std::collections::BTreeSet::new();
        for r in &out.reports {
            let expected: u64 = r.prototype_senders.iter().map(|s| s.classes.len() as u64 * grad_bytes).sum();
            exact &= r.bytes_sent_prototype_grads == expected && r.prototype_grad_bytes_each == grad_bytes;
            exact &= r.prototype_senders.iter().all(|s| sent.insert((s.client, r.task)));
            by_task[r.task - 1] += r.bytes_sent_prototype_grads;
        }
        exact &= out.summary.bytes_prototype_grads == by_task.iter().sum::<u64>();
        worst_share = worst_share.max(out.summary.prototype_share());
        if seed == 0 {
            per_task_bytes = by_task;
        }
    }
    verdict(
        10,
        "communication accounting",
        exact && worst_share < PROTOTYPE_SHARE,
        format!(
            "per-round bytes {} senders x classes x gradient size; prototype/model traffic at most {:.3}% (< {}%); seed 0 per-task bytes {per_task_bytes:?}",
            if exact { "equal" } else { "DIFFER from" },
            100.0 * worst_share,
            100.0 * PROTOTYPE_SHARE
        ),
    );
}
