//! Acceptance gate for the engine. One test per criterion; each prints an
//! `ACCEPTANCE <n> ...: PASS` line on success (visible with `--nocapture`).
//!
//! Criteria 1-4 check the incremental data structures against independent
//! brute-force oracles on randomized inputs. Criteria 5-9 run a small
//! synthetic image benchmark end to end: a 3-class 16x16 blob dataset, an
//! MLP trained to full training accuracy, a per-class PCA manifold, and
//! 10,000-step fuzzing campaigns in several configurations.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;
use std::time::Instant;

use manifuzz_core::coverage::{
    profile, CoverageConfig, CoverageState, Criterion, NeuronProfile,
};
use manifuzz_core::data::{gen_blobs, split, LabeledDataset};
use manifuzz_core::forward::{forward_trace, ActivationTrace};
use manifuzz_core::manifold::{build_pca_manifold, sym_eigen};
use manifuzz_core::model::{build_mlp, random_tensor, Model};
use manifuzz_core::oracle::{validate_input, Oracle};
use manifuzz_core::quant::{quantize, QuantKind};
use manifuzz_core::report::{accuracy, retrain_eval, CampaignReport};
use manifuzz_core::tensor::Tensor;
use manifuzz_core::train::{grad_check, train_sgd};
use manifuzz_core::traversal::{
    run_campaign, Campaign, CampaignBindings, CampaignMode, FuzzConfig, Strategy, Trajectory,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Criterion 1: incremental coverage equals brute-force recomputation
// ---------------------------------------------------------------------------

/// Covered units recomputed from scratch over a stored trace list, with
/// plain set collections instead of the engine's incremental bit grids.
struct BruteSets {
    nc: BTreeSet<usize>,
    kmnc: BTreeSet<(usize, usize)>,
    nbc_low: BTreeSet<usize>,
    nbc_high: BTreeSet<usize>,
    snac: BTreeSet<usize>,
    tknc: BTreeSet<usize>,
}

fn brute_coverage(
    prof: &NeuronProfile,
    cfg: &CoverageConfig,
    traces: &[ActivationTrace],
) -> BruteSets {
    let counts = prof.neuron_counts();
    let mut offsets = Vec::with_capacity(counts.len());
    let mut acc = 0;
    for &n in &counts {
        offsets.push(acc);
        acc += n;
    }
    let mut sets = BruteSets {
        nc: BTreeSet::new(),
        kmnc: BTreeSet::new(),
        nbc_low: BTreeSet::new(),
        nbc_high: BTreeSet::new(),
        snac: BTreeSet::new(),
        tknc: BTreeSet::new(),
    };
    for trace in traces {
        for (li, layer) in trace.layers.iter().enumerate() {
            // NC: per-trace per-layer min-max rescale, covered strictly
            // above the threshold; a constant layer covers nothing.
            let min = layer.values.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = layer.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if max != min {
                let span = (max - min) as f64;
                for (ni, &v) in layer.values.iter().enumerate() {
                    if ((v - min) as f64) / span > cfg.nc_threshold {
                        sets.nc.insert(offsets[li] + ni);
                    }
                }
            }
            for (ni, &v) in layer.values.iter().enumerate() {
                let r = prof.layers[li][ni];
                let g = offsets[li] + ni;
                // KMNC: the section of the profiled range the value falls
                // into; zero-width ranges are a single section hit exactly
                // at the profiled value; out-of-range hits cover nothing.
                let section = if r.low == r.high {
                    if v == r.low {
                        Some(0)
                    } else {
                        None
                    }
                } else if v >= r.low && v <= r.high {
                    let frac = ((v - r.low) as f64) / ((r.high - r.low) as f64);
                    Some(((frac * cfg.kmnc_sections as f64).floor() as usize)
                        .min(cfg.kmnc_sections - 1))
                } else {
                    None
                };
                if let Some(s) = section {
                    sets.kmnc.insert((g, s));
                }
                // NBC / SNAC: strict excursions past the profiled corners.
                if v < r.low {
                    sets.nbc_low.insert(g);
                }
                if v > r.high {
                    sets.nbc_high.insert(g);
                    sets.snac.insert(g);
                }
            }
            // TKNC: the layer's top-k activations, ties to the lower index.
            let mut order: Vec<usize> = (0..layer.values.len()).collect();
            order.sort_by(|&a, &b| {
                layer.values[b].total_cmp(&layer.values[a]).then_with(|| a.cmp(&b))
            });
            for &ni in order.iter().take(cfg.tknc_k) {
                sets.tknc.insert(offsets[li] + ni);
            }
        }
    }
    sets
}

#[test]
fn acceptance_1_incremental_coverage_equals_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FEE);
    // A random three-dense-layer MLP; traces read after BN+ReLU blocks.
    let model = build_mlp(&[10], &[24, 16], 5, true, 31).expect("model builds");

    // Profile over one random dataset, traces from another, wider one, so
    // in-range, out-of-range, and corner activations all occur.
    let prof_inputs: Vec<Tensor> =
        (0..200).map(|_| random_tensor(vec![10], 1.0, &mut rng)).collect();
    let n_prof = prof_inputs.len();
    let prof_data = LabeledDataset::new(prof_inputs, vec![0; n_prof], 1).expect("dataset");
    let prof = profile(&model, &prof_data).expect("profile");

    let cfg = CoverageConfig::default();
    let mut state = CoverageState::new(&prof, cfg).expect("state");
    let mut traces = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let input = random_tensor(vec![10], 2.0, &mut rng);
        let (_, trace) = forward_trace(&model, &input).expect("forward");
        state.update_all(&trace, Criterion::Nc).expect("update");
        traces.push(trace);
    }

    let brute = brute_coverage(&prof, &cfg, &traces);
    assert_eq!(state.covered(Criterion::Nc), brute.nc.len(), "NC covered sets differ");
    assert_eq!(state.covered(Criterion::Kmnc), brute.kmnc.len(), "KMNC covered sets differ");
    assert_eq!(
        state.covered(Criterion::Nbc),
        brute.nbc_low.len() + brute.nbc_high.len(),
        "NBC covered sets differ"
    );
    assert_eq!(state.covered(Criterion::Snac), brute.snac.len(), "SNAC covered sets differ");
    assert_eq!(state.covered(Criterion::Tknc), brute.tknc.len(), "TKNC covered sets differ");

    // Ratios must agree exactly as well: same counts over same totals.
    let total: usize = prof.total_neurons();
    let v = state.values();
    assert_eq!(v.nc, brute.nc.len() as f64 / total as f64);
    assert_eq!(v.kmnc, brute.kmnc.len() as f64 / (total * cfg.kmnc_sections) as f64);
    assert_eq!(v.nbc, (brute.nbc_low.len() + brute.nbc_high.len()) as f64 / (2 * total) as f64);
    assert_eq!(v.snac, brute.snac.len() as f64 / total as f64);
    assert_eq!(v.tknc, brute.tknc.len() as f64 / total as f64);

    // Sanity: the random traces exercised every criterion.
    assert!(brute.nc.len() > 0 && brute.kmnc.len() > 0 && brute.snac.len() > 0);

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "coverage equivalence took {secs:.1}s, budget 30s");
    println!("ACCEPTANCE 1 (incremental coverage equals brute force, 1000 traces): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 2: incremental trajectory equals batch statistics
// ---------------------------------------------------------------------------

#[test]
fn acceptance_2_trajectory_equals_batch_statistics() {
    const D: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(0x7A21);
    for case in 0..500 {
        let len = rng.gen_range(1..=40);
        let coords: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..D).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();

        let mut traj = Trajectory::new(D);
        for c in &coords {
            traj.update(c).expect("update");
        }

        // Two-pass batch mean and population covariance.
        let n = len as f64;
        let mut mean = vec![0.0; D];
        for c in &coords {
            for (m, &x) in mean.iter_mut().zip(c) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut cov = vec![0.0; D * D];
        for c in &coords {
            for i in 0..D {
                for j in 0..D {
                    cov[i * D + j] += (c[i] - mean[i]) * (c[j] - mean[j]);
                }
            }
        }
        for v in &mut cov {
            *v /= n;
        }

        for i in 0..D {
            let dm = (traj.mean()[i] - mean[i]).abs();
            assert!(dm <= 1e-9, "case {case}: mean[{i}] off by {dm:e}");
            for j in 0..D {
                let dc = (traj.covariance()[i * D + j] - cov[i * D + j]).abs();
                assert!(dc <= 1e-9, "case {case}: cov[{i},{j}] off by {dc:e}");
            }
        }

        // Exact symmetry and PSD up to -1e-9 on the smallest eigenvalue.
        let t = traj.covariance();
        for i in 0..D {
            for j in 0..D {
                assert_eq!(t[i * D + j], t[j * D + i], "case {case}: asymmetric");
            }
        }
        let m = nalgebra::DMatrix::from_row_slice(D, D, t);
        let eigs = nalgebra::SymmetricEigen::new(m).eigenvalues;
        let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min_eig > -1e-9, "case {case}: min eigenvalue {min_eig:e}");
    }
    println!("ACCEPTANCE 2 (trajectory equals batch covariance, 500 sequences): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 3: analytic gradients match finite differences
// ---------------------------------------------------------------------------

#[test]
fn acceptance_3_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9D);
    for case in 0..20 {
        let depth = rng.gen_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(4..=10)).collect();
        let batch_norm = case % 2 == 0;
        let model =
            build_mlp(&[8], &hidden, 3, batch_norm, 1000 + case as u64).expect("model builds");
        let input = random_tensor(vec![8], 1.0, &mut rng);
        let label = rng.gen_range(0..3);
        let err = grad_check(&model, &input, label, 1e-4).expect("grad check");
        assert!(
            err.is_finite() && err < 1e-3,
            "case {case} (hidden {hidden:?}, bn {batch_norm}): max rel err {err:e}"
        );
    }
    println!("ACCEPTANCE 3 (gradient check < 1e-3 on 20 random MLPs): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 4: PCA round trip and eigendecomposition
// ---------------------------------------------------------------------------

#[test]
fn acceptance_4_pca_round_trip_and_eigen_oracle() {
    // Part A: data lying in an 8-dim affine subspace of R^48 reconstructs
    // through encode/decode with negligible error.
    const DIM: usize = 48;
    const SUB: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(0x4B1D);

    // Random orthonormal basis via Gram-Schmidt.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(SUB);
    while basis.len() < SUB {
        let mut v: Vec<f64> = (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    let mean: Vec<f64> = (0..DIM).map(|_| rng.gen_range(-0.5..0.5)).collect();

    let inputs: Vec<Tensor> = (0..40)
        .map(|_| {
            let coeffs: Vec<f64> =
                (0..SUB).map(|j| rng.gen_range(-2.0..2.0) * (j + 1) as f64 / 4.0).collect();
            let mut x = mean.clone();
            for (c, b) in coeffs.iter().zip(&basis) {
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi += c * bi;
                }
            }
            Tensor::new(vec![DIM], x.iter().map(|&v| v as f32).collect()).expect("tensor")
        })
        .collect();
    let data = LabeledDataset::new(inputs.clone(), vec![0; 40], 1).expect("dataset");
    let (manifold, warnings) =
        build_pca_manifold(&data, SUB, (-1e6, 1e6)).expect("pca builds");
    assert!(warnings.is_empty(), "full-rank subspace data warned: {warnings:?}");

    let mut sq_err = 0.0;
    let mut count = 0usize;
    for x in &inputs {
        let z = manifold.encode(x, 0).expect("encode");
        let dec = manifold.decode(&z).expect("decode");
        for (&a, &b) in dec.data().iter().zip(x.data()) {
            sq_err += (a as f64 - b as f64).powi(2);
            count += 1;
        }
    }
    let mse = sq_err / count as f64;
    assert!(mse < 1e-8, "round-trip MSE {mse:e} exceeds 1e-8");

    // Part B: the built-in Jacobi eigendecomposition agrees with an
    // independent library implementation on random symmetric matrices.
    for case in 0..10 {
        let n = 6;
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gen_range(-1.0..1.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let (vals, vecs) = sym_eigen(&a, n).expect("eigen");
        let m = nalgebra::DMatrix::from_row_slice(n, n, &a);
        let se = nalgebra::SymmetricEigen::new(m);
        let top = (0..n)
            .max_by(|&i, &j| se.eigenvalues[i].total_cmp(&se.eigenvalues[j]))
            .expect("non-empty spectrum");

        let dv = (vals[0] - se.eigenvalues[top]).abs();
        assert!(dv <= 1e-8, "case {case}: top eigenvalue off by {dv:e}");

        let oracle_vec = se.eigenvectors.column(top);
        let dot: f64 = (0..n).map(|i| vecs[i] * oracle_vec[i]).sum();
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            let d = (vecs[i] - sign * oracle_vec[i]).abs();
            assert!(d <= 1e-8, "case {case}: eigenvector[{i}] off by {d:e}");
        }
    }
    println!("ACCEPTANCE 4 (PCA round trip < 1e-8; eigen matches oracle): PASS");
}

// ---------------------------------------------------------------------------
// Benchmark fixture shared by criteria 5-9
// ---------------------------------------------------------------------------

/// Synthetic 3-class image benchmark plus all campaign reports used by the
/// directional criteria. Built once; campaigns are deterministic per seed.
struct Bench {
    train: LabeledDataset,
    test: LabeledDataset,
    model: Model,
    /// Trajectory-strategy graybox campaigns, seeds 0-4.
    traj: Vec<CampaignReport>,
    /// Random-strategy (no trajectory sampling) control arm, seeds 0-4.
    rand: Vec<CampaignReport>,
    /// Black-box campaign against the int8 sibling.
    blackbox: CampaignReport,
    /// Per-lineage best fitness never decreased during the black-box run.
    lineage_monotone: bool,
    acc_float: f64,
    acc_quant: f64,
    build_seconds: f64,
}

/// First `per_class` samples of each class, in original order.
fn balanced_corpus(data: &LabeledDataset, per_class: usize) -> LabeledDataset {
    let mut picked = Vec::new();
    for class in 0..data.class_count {
        let mut taken = 0;
        for (i, &label) in data.labels.iter().enumerate() {
            if label == class && taken < per_class {
                picked.push(i);
                taken += 1;
            }
        }
    }
    picked.sort_unstable();
    data.subset(&picked).expect("corpus indices valid")
}

fn campaign_config(strategy: Strategy, mode: CampaignMode, rng_seed: u64) -> FuzzConfig {
    FuzzConfig {
        objective: Criterion::Kmnc,
        mode,
        strategy,
        budget_steps: Some(10_000),
        budget_seconds: None,
        // Aggressive mutation scale so exploit chains leave the corpus
        // neighborhood within the budget.
        step_scale: 2.0,
        rng_seed,
        ..FuzzConfig::default()
    }
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let t0 = Instant::now();
        let all = gen_blobs(3, &[16, 16], 100, 0.55, 42).expect("blobs");
        let (train, test) = split(&all, 0.5, 7).expect("split");
        let init = build_mlp(&[16, 16], &[48], 3, false, 2).expect("mlp");
        let (model, _) = train_sgd(&init, &train, 0.3, 6, 16, 1).expect("training");
        let (manifold, warnings) =
            build_pca_manifold(&train, 8, (0.0, 1.0)).expect("manifold");
        assert!(warnings.is_empty(), "manifold build warned: {warnings:?}");
        let prof = profile(&model, &train).expect("profile");
        let corpus = balanced_corpus(&train, 2);
        let oracle = Oracle::LabelConsistency;

        let mut traj = Vec::new();
        let mut rand_arm = Vec::new();
        for seed in 0..5 {
            for (strategy, out) in [
                (Strategy::Trajectory, &mut traj),
                (Strategy::Random, &mut rand_arm),
            ] {
                let bindings = CampaignBindings {
                    model: &model,
                    manifold: &manifold,
                    oracle: &oracle,
                    corpus: &corpus,
                    profile: Some(&prof),
                    coverage_config: CoverageConfig::default(),
                };
                let cfg = campaign_config(strategy, CampaignMode::Graybox, seed);
                out.push(run_campaign(bindings, cfg).expect("campaign"));
            }
        }

        let quant = quantize(&model, &[QuantKind::Dense]).expect("quantize");
        let acc_float = accuracy(&model, &test).expect("accuracy");
        let acc_quant = accuracy(&quant, &test).expect("accuracy");
        let bb_oracle = Oracle::quant_diff(quant).expect("oracle");
        let bindings = CampaignBindings {
            model: &model,
            manifold: &manifold,
            oracle: &bb_oracle,
            corpus: &corpus,
            profile: None,
            coverage_config: CoverageConfig::default(),
        };
        let cfg = campaign_config(Strategy::Trajectory, CampaignMode::Blackbox, 0);
        // Stepped manually so per-lineage fitness records can be watched.
        let mut campaign = Campaign::new(bindings, cfg).expect("campaign");
        let mut lineage_monotone = true;
        let mut prev: BTreeMap<u64, f64> = campaign.lineage_bests().clone();
        for _ in 0..10_000 {
            campaign.step().expect("step");
            let cur = campaign.lineage_bests();
            for (lineage, best) in &prev {
                if cur.get(lineage).map_or(true, |b| b < best) {
                    lineage_monotone = false;
                }
            }
            prev = cur.clone();
        }
        let blackbox = campaign.into_report().expect("report");

        Bench {
            train,
            test,
            model,
            traj,
            rand: rand_arm,
            blackbox,
            lineage_monotone,
            acc_float,
            acc_quant,
            build_seconds: t0.elapsed().as_secs_f64(),
        }
    })
}

fn final_nc(report: &CampaignReport) -> f64 {
    report.final_coverage.expect("graybox campaign has final coverage").nc
}

// ---------------------------------------------------------------------------
// Criterion 5: ablation direction on the blob benchmark
// ---------------------------------------------------------------------------

#[test]
fn acceptance_5_trajectory_beats_random_beats_init() {
    let b = bench();
    let train_acc = accuracy(&b.model, &b.train).expect("accuracy");
    assert!(train_acc >= 0.95, "benchmark model reached only {train_acc:.4} train accuracy");

    let init = b.traj[0].init_coverage.expect("graybox campaigns record initial coverage").nc;
    for r in b.traj.iter().chain(&b.rand) {
        let i = r.init_coverage.expect("initial coverage").nc;
        assert_eq!(i, init, "initial coverage varies across campaigns of one corpus");
    }
    let traj_mean = b.traj.iter().map(final_nc).sum::<f64>() / b.traj.len() as f64;
    let rand_mean = b.rand.iter().map(final_nc).sum::<f64>() / b.rand.len() as f64;

    assert!(
        traj_mean >= rand_mean,
        "trajectory arm mean NC {traj_mean:.4} below random arm {rand_mean:.4}"
    );
    assert!(traj_mean > init, "trajectory arm mean NC {traj_mean:.4} not above init {init:.4}");
    assert!(rand_mean > init, "random arm mean NC {rand_mean:.4} not above init {init:.4}");
    assert!(
        b.build_seconds < 600.0,
        "benchmark with all campaigns took {:.0}s, budget 600s",
        b.build_seconds
    );
    println!(
        "ACCEPTANCE 5 (mean final NC: trajectory {traj_mean:.4} >= random {rand_mean:.4} > init {init:.4}): PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: fault discovery with valid, diverse fault inputs
// ---------------------------------------------------------------------------

#[test]
fn acceptance_6_campaigns_find_valid_faults() {
    let b = bench();
    let shape = vec![16, 16];
    let mut total = 0usize;
    for (i, r) in b.traj.iter().enumerate() {
        assert!(
            !r.faults.is_empty(),
            "campaign seed {i} found no label-consistency faults"
        );
        for f in &r.faults {
            assert_eq!(f.oracle_kind, "label_consistency");
            let input = Tensor::new(shape.clone(), f.decoded.clone()).expect("fault tensor");
            assert!(
                validate_input(&input, (0.0, 1.0)),
                "fault {} of campaign seed {i} fails input validation",
                f.id
            );
        }
        let d = r.diversity.as_ref().expect("faulting campaign has diversity stats");
        assert!(
            (0.0..=1.0).contains(&d.scaled_entropy),
            "campaign seed {i}: entropy {} outside [0,1]",
            d.scaled_entropy
        );
        total += r.faults.len();
    }
    println!(
        "ACCEPTANCE 6 (each trajectory campaign finds valid faults; {total} total): PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: quantization differential in black-box mode
// ---------------------------------------------------------------------------

#[test]
fn acceptance_7_blackbox_quant_campaign() {
    let b = bench();
    let acc_delta = (b.acc_float - b.acc_quant).abs();
    assert!(
        acc_delta <= 0.02,
        "int8 quantization moved validation accuracy by {acc_delta:.4} (> 2 points)"
    );

    let r = &b.blackbox;
    assert!(!r.faults.is_empty(), "black-box campaign found no argmax flips");
    for f in &r.faults {
        assert_eq!(f.oracle_kind, "quant_diff");
        assert_eq!(f.predictions.len(), 2, "quant faults carry both predictions");
        assert_ne!(
            f.predictions[0].label, f.predictions[1].label,
            "fault {} is not an argmax flip",
            f.id
        );
    }
    for w in r.fitness_curve.windows(2) {
        assert!(
            w[1].best >= w[0].best,
            "best-fitness curve decreased at step {}",
            w[1].step
        );
    }
    assert!(b.lineage_monotone, "a lineage's best fitness decreased during the run");
    println!(
        "ACCEPTANCE 7 (quant acc delta {acc_delta:.4} <= 0.02; {} argmax flips; fitness monotone): PASS",
        r.faults.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: exploit-probability schedule invariants
// ---------------------------------------------------------------------------

#[test]
fn acceptance_8_lambda_schedule_invariants() {
    let b = bench();
    let all: Vec<&CampaignReport> =
        b.traj.iter().chain(&b.rand).chain(std::iter::once(&b.blackbox)).collect();
    for (ci, r) in all.iter().enumerate() {
        let h = &r.lambda_history;
        assert!(!h.is_empty(), "campaign {ci}: empty lambda history");
        assert_eq!(h[0].lambda, 0.0, "campaign {ci}: lambda does not start at zero");
        for (j, p) in h.iter().enumerate() {
            // History records one entry per gain, so the j-th entry is
            // exactly j increments of 0.0005, capped at 0.8.
            let expected = (0.0005 * j as f64).min(0.8);
            assert_eq!(
                p.lambda, expected,
                "campaign {ci}: lambda at record {j} is {} not {expected}",
                p.lambda
            );
            assert!(p.lambda <= 0.8, "campaign {ci}: lambda exceeds cap");
        }
        for w in h.windows(2) {
            assert!(w[1].lambda >= w[0].lambda, "campaign {ci}: lambda decreased");
            assert!(w[1].step > w[0].step, "campaign {ci}: lambda steps not increasing");
        }
    }
    println!("ACCEPTANCE 8 (lambda nondecreasing, 0.0005 increments, 0.8 cap, 11 campaigns): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 9: retraining on fault inputs does not degrade accuracy
// ---------------------------------------------------------------------------

#[test]
fn acceptance_9_retraining_non_degradation() {
    let b = bench();
    let faults = &b.traj[0].faults;
    assert!(!faults.is_empty());
    let outcome = retrain_eval(&b.model, &b.train, &b.test, faults, 300, 3, 0.05, 32, 9)
        .expect("retrain");
    assert!(outcome.faults_used <= 2000);
    assert!(
        outcome.acc_after >= outcome.acc_before - 0.005,
        "accuracy degraded from {:.4} to {:.4}",
        outcome.acc_before,
        outcome.acc_after
    );
    println!(
        "ACCEPTANCE 9 (retraining: {:.4} -> {:.4} with {} faults): PASS",
        outcome.acc_before, outcome.acc_after, outcome.faults_used
    );
}
