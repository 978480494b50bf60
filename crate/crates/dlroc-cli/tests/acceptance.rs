//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Heavy timed criteria serialize on a shared lock so wall-clock budgets are
//! measured without interference from sibling tests; the learning runs
//! shared by criteria 4, 5 and 7 are computed once.

use std::collections::BTreeSet;
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};

use dlroc::classifier::{argmax_label, energy_ratios, fit_traced, CoderSpec, DictionarySource};
use dlroc::coding::{
    coding_objective, sparse_code_hybrid, sparse_code_omp, CoderStop,
};
use dlroc::data::{generate_synthetic, split_by_group, subsample_per_label, SynthSpec};
use dlroc::eval::{benchmark_timing, run_replicates, MethodConfig, Protocol};
use dlroc::learning::{
    avg_cross_block_coherence, learn, LabeledTrainingSet, LearnParams, LearnTrace,
    RandomSearchParams, UNIT_BALL_SLACK,
};
use dlroc::norms::{frobenius_sq, hybrid_norm, l11_norm};
use dlroc::rng::SplitMix64;

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_guard() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn pass(criterion: usize, name: &str) {
    println!("ACCEPTANCE {criterion} ({name}): PASS");
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SplitMix64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.next_range(-3.0, 3.0))
}

fn unit_columns(m: usize, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut d = Array2::from_shape_fn((m, n), |_| rng.next_normal());
    for mut col in d.columns_mut() {
        let norm = col.dot(&col).sqrt();
        col.mapv_inplace(|v| v / norm);
    }
    d
}

// --- criterion 1 -----------------------------------------------------------

#[test]
fn criterion_1_norm_identities() {
    let started = Instant::now();
    let mut rng = SplitMix64::new(0xC1);
    for trial in 0..100 {
        let rows = 1 + (trial % 6);
        let cols = 1 + (trial % 5);
        let m = random_matrix(rows, cols, &mut rng);

        // independent hand accumulations
        let mut fro_sq = 0.0;
        let mut l11 = 0.0;
        for &v in m.iter() {
            fro_sq += v * v;
            l11 += v.abs();
        }

        let at_one = hybrid_norm(m.view(), 1.0).unwrap();
        let at_zero = hybrid_norm(m.view(), 0.0).unwrap();
        let tol = |x: f64| 1e-12 * x.abs().max(1e-15);
        assert!((at_one - fro_sq).abs() <= tol(fro_sq), "alpha=1 identity");
        assert!((at_zero - l11).abs() <= tol(l11), "alpha=0 identity");

        for &alpha in &[0.25, 0.5, 0.75] {
            let expected = alpha * fro_sq + (1.0 - alpha) * l11;
            let got = hybrid_norm(m.view(), alpha).unwrap();
            assert!((got - expected).abs() <= tol(expected), "affinity at {alpha}");
        }

        let fro = frobenius_sq(m.view());
        let l = l11_norm(m.view());
        assert!((fro - fro_sq).abs() <= tol(fro_sq));
        assert!((l - l11).abs() <= tol(l11));
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    pass(1, "norm identities");
}

// --- criterion 2 -----------------------------------------------------------

/// Projected-subgradient descent with geometrically diminishing normalized
/// steps and restarts at the incumbent; returns the best objective seen
/// over `iterations` total steps.
fn subgradient_best(
    y: &Array1<f64>,
    dict: &Array2<f64>,
    alpha: f64,
    gamma: f64,
    iterations: usize,
) -> f64 {
    let (m, atoms) = dict.dim();
    let phases = 25usize;
    let per_phase = iterations / phases;
    let box_bound = 10.0;

    let mut best_x = vec![0.0f64; atoms];
    let mut best = {
        let fro: f64 = y.iter().map(|v| v * v).sum();
        let l1: f64 = y.iter().map(|v| v.abs()).sum();
        alpha * fro + (1.0 - alpha) * l1
    };
    let mut step = 0.02;
    let mut x = vec![0.0f64; atoms];
    let mut residual = vec![0.0f64; m];
    let mut grad = vec![0.0f64; atoms];

    for _phase in 0..phases {
        x.copy_from_slice(&best_x);
        for _ in 0..per_phase {
            // residual = y - Dx
            for (ri, yi) in residual.iter_mut().zip(y.iter()) {
                *ri = *yi;
            }
            for (j, &xj) in x.iter().enumerate() {
                if xj != 0.0 {
                    for (ri, &dij) in residual.iter_mut().zip(dict.column(j).iter()) {
                        *ri -= xj * dij;
                    }
                }
            }
            let mut fro = 0.0;
            let mut l1 = 0.0;
            for &r in &residual {
                fro += r * r;
                l1 += r.abs();
            }
            let x1: f64 = x.iter().map(|v| v.abs()).sum();
            let value = alpha * fro + (1.0 - alpha) * l1 + gamma * x1;
            if value < best {
                best = value;
                best_x.copy_from_slice(&x);
            }

            // g_j = -2a d_j'r - (1-a) d_j'sign(r) + gamma sgn(x_j)
            let mut grad_norm_sq = 0.0;
            for (j, g) in grad.iter_mut().enumerate() {
                let mut dr = 0.0;
                let mut ds = 0.0;
                for (&dij, &r) in dict.column(j).iter().zip(residual.iter()) {
                    dr += dij * r;
                    ds += dij * if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 };
                }
                let sx = if x[j] > 0.0 {
                    1.0
                } else if x[j] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *g = -2.0 * alpha * dr - (1.0 - alpha) * ds + gamma * sx;
                grad_norm_sq += *g * *g;
            }
            let norm = grad_norm_sq.sqrt();
            if norm == 0.0 {
                break;
            }
            let scale = step / norm;
            for (xj, &g) in x.iter_mut().zip(grad.iter()) {
                *xj = (*xj - scale * g).clamp(-box_bound, box_bound);
            }
        }
        step *= 0.5;
    }
    best
}

#[test]
fn criterion_2_hybrid_coder_oracle_equivalence() {
    let _lock = heavy_guard();
    let started = Instant::now();
    let alphas = [0.5, 0.7, 1.0];
    let gammas = [0.01, 0.1];
    let mut rng = SplitMix64::new(0xC2);
    for trial in 0..50u64 {
        let m = 4 + (trial as usize % 5); // 4..=8
        let atoms = 6 + (trial as usize % 7); // 6..=12
        let alpha = alphas[trial as usize % 3];
        let gamma = gammas[trial as usize % 2];
        let dict = unit_columns(m, atoms, 0x2000 + trial);
        let mut y = Array1::from_shape_fn(m, |_| rng.next_range(-1.0, 1.0));
        let norm = y.dot(&y).sqrt();
        y.mapv_inplace(|v| v / norm);

        let code =
            sparse_code_hybrid(y.view(), dict.view(), alpha, gamma, &CoderStop::exact()).unwrap();
        let cd_value =
            coding_objective(y.view(), dict.view(), code.values().view(), alpha, gamma);
        let oracle = subgradient_best(&y, &dict, alpha, gamma, 1_000_000);
        assert!(
            (cd_value - oracle).abs() <= 1e-4,
            "trial {trial} (m={m}, L={atoms}, alpha={alpha}, gamma={gamma}): \
             coder {cd_value} vs oracle {oracle}"
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    pass(2, "hybrid coder oracle equivalence");
}

// --- criterion 3 -----------------------------------------------------------

/// Random orthonormal basis by modified Gram-Schmidt on a seeded Gaussian
/// square matrix.
fn random_orthonormal(m: usize, seed: u64) -> Array2<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut q = Array2::from_shape_fn((m, m), |_| rng.next_normal());
    for j in 0..m {
        for prev in 0..j {
            let proj = q.column(j).dot(&q.column(prev));
            let prev_col = q.column(prev).to_owned();
            q.column_mut(j).scaled_add(-proj, &prev_col);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

#[test]
fn criterion_3_omp_exactness_on_orthonormal_dictionaries() {
    let mut rng = SplitMix64::new(0xC3);
    for trial in 0..100u64 {
        let m = [4usize, 8, 12, 16][trial as usize % 4];
        let support_size = 1 + (trial as usize % 3);
        let dict = random_orthonormal(m, 0x3000 + trial);

        let mut support: Vec<usize> = Vec::new();
        while support.len() < support_size {
            let j = rng.next_index(m);
            if !support.contains(&j) {
                support.push(j);
            }
        }
        let mut y = Array1::<f64>::zeros(m);
        let mut coefs = Vec::new();
        for &j in &support {
            let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            let c = sign * rng.next_range(0.5, 1.5);
            coefs.push(c);
            y.scaled_add(c, &dict.column(j));
        }

        let code = sparse_code_omp(y.view(), dict.view(), 1e-12, support_size).unwrap();
        let mut expected: Vec<usize> = support.clone();
        expected.sort_unstable();
        assert_eq!(code.support(), expected, "trial {trial} support");
        for (&j, &c) in support.iter().zip(coefs.iter()) {
            assert!(
                (code.values()[j] - c).abs() <= 1e-10,
                "trial {trial} coefficient at {j}: {} vs {c}",
                code.values()[j]
            );
        }
    }
    pass(3, "OMP exactness on orthonormal dictionaries");
}

// --- criteria 4, 5, 7: shared learning runs --------------------------------

struct LearnRun {
    eta: f64,
    trace: LearnTrace<f64>,
    final_avg_coherence: f64,
    seconds: f64,
}

/// K=3, m=16, L_k=24, n_k=60 training set with unit-norm columns.
fn monotonicity_training_set(seed: u64) -> LabeledTrainingSet<f64> {
    let data = generate_synthetic(&SynthSpec {
        channels: 16,
        labels: 3,
        atoms_per_label: 6,
        samples_per_label: 60,
        sparsity: 3,
        gaussian_sigma: 0.05,
        outlier_fraction: 0.0,
        outlier_magnitude: 1.0,
        seed,
    })
    .unwrap();
    let blocks = data
        .to_training_set()
        .unwrap()
        .blocks()
        .iter()
        .map(|b| dlroc::classifier::normalize_columns(b.view()).unwrap())
        .collect();
    LabeledTrainingSet::new(blocks).unwrap()
}

fn learning_runs() -> &'static Vec<LearnRun> {
    static RUNS: OnceLock<Vec<LearnRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let _lock = heavy_guard();
        let mut runs = Vec::new();
        for seed in 0..5u64 {
            let train = monotonicity_training_set(0x4000 + seed);
            for &eta in &[1.0, 0.0] {
                let params = LearnParams {
                    alpha: 0.7,
                    gamma: 0.05,
                    eta,
                    t_max: 20,
                    rs: RandomSearchParams::default(),
                    seed: 0x40 + seed,
                    objective_rel_tol: 0.0, // run all 20 iterations
                };
                let started = Instant::now();
                let (dict, _, trace) = learn(&train, &[24, 24, 24], &params).unwrap();
                runs.push(LearnRun {
                    eta,
                    trace,
                    final_avg_coherence: avg_cross_block_coherence(&dict),
                    seconds: started.elapsed().as_secs_f64(),
                });
            }
        }
        runs
    })
}

#[test]
fn criterion_4_objective_trace_is_monotone() {
    let runs = learning_runs();
    // the first run is seed 0, eta = 1: the criterion's configuration
    let run = &runs[0];
    assert_eq!(run.trace.entries.len(), 20);
    let objectives = run.trace.objectives();
    for (i, pair) in objectives.windows(2).enumerate() {
        assert!(
            pair[1] <= pair[0] + 1e-12,
            "iteration {}: objective rose from {} to {}",
            i + 1,
            pair[0],
            pair[1]
        );
    }
    assert!(
        run.seconds < 120.0,
        "single run took {} s, budget 120 s",
        run.seconds
    );
    // every other shared run must be monotone as well
    for run in runs.iter() {
        for pair in run.trace.objectives().windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }
    pass(4, "learning objective trace is monotone");
}

#[test]
fn criterion_5_incoherence_penalty_reduces_cross_coherence() {
    let runs = learning_runs();
    let mut wins = 0;
    for seed in 0..5 {
        let with_eta = &runs[seed * 2];
        let without_eta = &runs[seed * 2 + 1];
        assert_eq!(with_eta.eta, 1.0);
        assert_eq!(without_eta.eta, 0.0);
        if with_eta.final_avg_coherence < without_eta.final_avg_coherence {
            wins += 1;
        }
        eprintln!(
            "seed {seed}: avg cross-block coherence eta=1 {:.4} vs eta=0 {:.4}",
            with_eta.final_avg_coherence, without_eta.final_avg_coherence
        );
    }
    assert!(wins >= 4, "eta=1 won only {wins}/5 seeds");
    pass(5, "incoherence penalty lowers cross-block coherence");
}

// --- criterion 6 -----------------------------------------------------------

struct RobustnessOutcome {
    dl_roc_macro_f: f64,
    src_omp_macro_f: f64,
    fit_trace: LearnTrace<f64>,
    seconds: f64,
}

fn robustness_outcome() -> &'static RobustnessOutcome {
    static OUTCOME: OnceLock<RobustnessOutcome> = OnceLock::new();
    OUTCOME.get_or_init(|| {
        let _lock = heavy_guard();
        let started = Instant::now();
        let data = generate_synthetic(&SynthSpec {
            channels: 32,
            labels: 4,
            atoms_per_label: 8,
            samples_per_label: 700,
            sparsity: 3,
            gaussian_sigma: 0.05,
            outlier_fraction: 0.10,
            outlier_magnitude: 5.0,
            seed: 0x600,
        })
        .unwrap();

        let hybrid_params = LearnParams {
            alpha: 0.7,
            gamma: 0.05,
            eta: 1.0,
            t_max: 3,
            rs: RandomSearchParams::default(),
            seed: 0,
            objective_rel_tol: 1e-4,
        };
        let methods = vec![
            MethodConfig {
                name: "DL-ROC".into(),
                coder: CoderSpec::Hybrid {
                    alpha: 0.7,
                    gamma: 0.05,
                    stop: CoderStop::default(), // residual threshold 0.01
                },
                source: DictionarySource::Learned,
                atoms_per_label: 12,
                params: hybrid_params.clone(),
            },
            MethodConfig {
                name: "SRC(OMP)".into(),
                coder: CoderSpec::Omp {
                    residual_tol: 0.01,
                    max_atoms: 32,
                },
                source: DictionarySource::Raw,
                atoms_per_label: 0,
                params: hybrid_params.clone(),
            },
        ];
        let protocol = Protocol {
            n_replicates: 20,
            train_groups_count: 7,
            per_label_train: 400,
            per_label_test: 200,
        };
        let reports = run_replicates(&data, &protocol, &methods, 0x61).unwrap();
        assert_eq!(reports[0].replicates_completed, 20, "DL-ROC replicates");
        assert_eq!(reports[1].replicates_completed, 20, "SRC(OMP) replicates");

        // one replicate-equivalent fit so criterion 7 can inspect the
        // learning trace under this configuration
        let groups: BTreeSet<usize> = (1..=7).collect();
        let (train_all, _) = split_by_group(&data, &groups).unwrap();
        let train = subsample_per_label(&train_all, 400, 0x62).unwrap();
        let (_, fit_trace) = fit_traced(
            &train.to_training_set().unwrap(),
            &[12, 12, 12, 12],
            &hybrid_params,
            CoderSpec::Hybrid {
                alpha: 0.7,
                gamma: 0.05,
                stop: CoderStop::default(),
            },
            DictionarySource::Learned,
            None,
        )
        .unwrap();

        RobustnessOutcome {
            dl_roc_macro_f: reports[0].macro_f.mean,
            src_omp_macro_f: reports[1].macro_f.mean,
            fit_trace: fit_trace.expect("learned fit returns a trace"),
            seconds: started.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_6_robustness_comparison_under_outliers() {
    let outcome = robustness_outcome();
    eprintln!(
        "DL-ROC macro-F {:.4} vs SRC(OMP) macro-F {:.4} ({} s)",
        outcome.dl_roc_macro_f, outcome.src_omp_macro_f, outcome.seconds
    );
    assert!(
        outcome.dl_roc_macro_f >= outcome.src_omp_macro_f + 0.02,
        "mean macro-F gap too small: {} vs {}",
        outcome.dl_roc_macro_f,
        outcome.src_omp_macro_f
    );
    assert!(
        outcome.seconds < 300.0,
        "took {} s, budget 300 s",
        outcome.seconds
    );
    pass(6, "robust hybrid coder beats OMP baseline under outliers");
}

// --- criterion 7 -----------------------------------------------------------

#[test]
fn criterion_7_unit_ball_invariant_across_learning() {
    let bound = 1.0 + UNIT_BALL_SLACK;
    for run in learning_runs() {
        for entry in &run.trace.entries {
            assert!(
                entry.max_column_norm_sq <= bound,
                "eta {} iteration {}: max column norm² {}",
                run.eta,
                entry.iteration,
                entry.max_column_norm_sq
            );
        }
    }
    for entry in &robustness_outcome().fit_trace.entries {
        assert!(
            entry.max_column_norm_sq <= bound,
            "robustness fit iteration {}: max column norm² {}",
            entry.iteration,
            entry.max_column_norm_sq
        );
    }
    pass(7, "unit-ball invariant holds after every learning iteration");
}

// --- criterion 8 -----------------------------------------------------------

#[test]
fn criterion_8_online_latency_budget() {
    let _lock = heavy_guard();
    // raw-dictionary model with m=32, L=4*128=512 atoms, hybrid coder with
    // the 0.01 residual stopping rule
    let train_data = generate_synthetic(&SynthSpec {
        channels: 32,
        labels: 4,
        atoms_per_label: 8,
        samples_per_label: 128,
        sparsity: 3,
        gaussian_sigma: 0.01,
        outlier_fraction: 0.0,
        outlier_magnitude: 1.0,
        seed: 0x800,
    })
    .unwrap();
    let model = dlroc::classifier::fit(
        &train_data.to_training_set().unwrap(),
        &[0; 4],
        &LearnParams::default(),
        CoderSpec::Hybrid {
            alpha: 0.7,
            gamma: 0.05,
            stop: CoderStop::default(),
        },
        DictionarySource::Raw,
        None,
    )
    .unwrap();
    assert_eq!(model.dictionary().total_atoms(), 512);
    assert_eq!(model.rows(), 32);

    let test_data = generate_synthetic(&SynthSpec {
        samples_per_label: 40,
        seed: 0x801,
        ..SynthSpec {
            channels: 32,
            labels: 4,
            atoms_per_label: 8,
            samples_per_label: 40,
            sparsity: 3,
            gaussian_sigma: 0.01,
            outlier_fraction: 0.0,
            outlier_magnitude: 1.0,
            seed: 0x801,
        }
    })
    .unwrap();
    let stats = benchmark_timing(&model, &test_data, 10).unwrap();
    eprintln!(
        "latency: mean {:.6} s, median {:.6} s, p95 {:.6} s over {} samples",
        stats.mean,
        stats.median,
        stats.p95,
        test_data.len() - 10
    );
    assert!(
        stats.median < 0.010,
        "median {:.6} s exceeds the 10 ms budget",
        stats.median
    );
    pass(8, "online latency budget");
}

// --- criterion 9 -----------------------------------------------------------

#[test]
fn criterion_9_cli_determinism() {
    let bin = env!("CARGO_BIN_EXE_dlroc");
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).display().to_string();

    let run = |args: &[&str]| {
        let output = Command::new(bin).args(args).output().unwrap();
        assert!(
            output.status.success(),
            "dlroc {:?} failed: {}",
            args,
            String::from_utf8_lossy(&output.stderr)
        );
    };

    for pass_idx in 1..=2 {
        run(&[
            "gen",
            "--out",
            &path(&format!("data{pass_idx}.csv")),
            "--seed",
            "11",
            "--channels",
            "10",
            "--labels",
            "3",
            "--atoms-per-label",
            "4",
            "--samples-per-label",
            "60",
            "--sparsity",
            "2",
            "--sigma",
            "0.05",
        ]);
        run(&[
            "train",
            "--data",
            &path("data1.csv"),
            "--out",
            &path(&format!("model{pass_idx}.bin")),
            "--lk",
            "5",
            "--tmax",
            "2",
            "--seed",
            "11",
        ]);
        run(&[
            "eval",
            "--data",
            &path("data1.csv"),
            "--out",
            &path(&format!("report{pass_idx}.txt")),
            "--replicates",
            "2",
            "--train-groups",
            "7",
            "--per-label-train",
            "30",
            "--per-label-test",
            "10",
            "--lk",
            "5",
            "--tmax",
            "1",
            "--seed",
            "11",
        ]);
    }

    for name in ["data", "model", "report"] {
        let ext = match name {
            "data" => "csv",
            "model" => "bin",
            _ => "txt",
        };
        let a = std::fs::read(dir.path().join(format!("{name}1.{ext}"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("{name}2.{ext}"))).unwrap();
        assert_eq!(a, b, "{name} outputs differ between runs");
    }
    pass(9, "seeded gen/train/eval are bit-identical");
}

// --- criterion 10 ----------------------------------------------------------

#[test]
fn criterion_10_energy_ratio_correctness() {
    let mut rng = SplitMix64::new(0xC10);
    for trial in 0..1000 {
        let labels = 2 + trial % 5;
        let sizes: Vec<usize> = (0..labels).map(|_| 1 + rng.next_index(4)).collect();
        let dim: usize = sizes.iter().sum();
        let x = Array1::from_shape_fn(dim, |_| rng.next_range(-2.0, 2.0));
        if x.iter().all(|v| *v == 0.0) {
            continue;
        }

        let ratios = energy_ratios(x.view(), &sizes).unwrap();

        // brute-force recomputation from raw entries
        let mut offset = 0;
        let mut energies = Vec::new();
        for &size in &sizes {
            let mut e = 0.0;
            for i in offset..offset + size {
                e += x[i] * x[i];
            }
            energies.push(e);
            offset += size;
        }
        let mut total = 0.0;
        for &e in &energies {
            total += e;
        }
        let mut best = 0usize;
        for (k, &e) in energies.iter().enumerate() {
            if e / total > energies[best] / total {
                best = k;
            }
        }

        for (k, &r) in ratios.iter().enumerate() {
            assert_eq!(r, energies[k] / total, "trial {trial} ratio {k}");
        }
        assert_eq!(argmax_label(&ratios), best + 1, "trial {trial} argmax");
    }

    // exact ties resolve to the lowest label index
    let tied = Array1::from_vec(vec![1.0, -2.0, -1.0, 2.0, 0.5, 0.0]);
    let ratios = energy_ratios(tied.view(), &[2, 2, 2]).unwrap();
    assert_eq!(ratios[0], ratios[1]);
    assert_eq!(argmax_label(&ratios), 1);
    let all_equal = Array1::from_vec(vec![1.0, 1.0, 1.0]);
    let ratios = energy_ratios(all_equal.view(), &[1, 1, 1]).unwrap();
    assert_eq!(argmax_label(&ratios), 1);
    pass(10, "energy ratios and argmax match brute force exactly");
}
