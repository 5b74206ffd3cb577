//! End-to-end acceptance checks. Each test covers one release criterion and
//! prints a single [PASS] line when it holds; a failed assertion is the
//! corresponding [FAIL].

use std::time::Instant;

use fedbench::config::RawSettings;
use fedbench::run::{build_run_config, build_schedule, load_dataset, model_spec, run_experiment, transition_mean};
use fedsession::datahub::gen_gaussian_mixture;
use fedsession::diagnostics::{
    estimate_zeta_with, lr_condition, bound_terms, BoundClientRound, BoundConstants, BoundLog,
    BoundRound, EtaCondition,
};
use fedsession::localtrain::Algorithm;
use fedsession::models::{self, ModelSpec};
use fedsession::numkit::{derive_stream, finite_diff_grad, rel_err, roles, ParamVector, RngStream, StreamPath};
use fedsession::server::{
    baseline_init, compute_pilot, construct_initial_model, run_training, similarity_weights,
    ArtifactStore, BaselineKind, EpochPlan, RunConfig, Variant,
};

fn stream(tag: u64) -> RngStream {
    derive_stream(0xACCE97, StreamPath::new(0, tag, roles::MODEL_INIT))
}

fn random_vector(dim: usize, rng: &mut RngStream) -> ParamVector {
    ParamVector::new((0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
}

#[test]
fn analytic_gradients_match_central_differences() {
    let started = Instant::now();
    let cases = [
        (ModelSpec::softmax_linear(5, 4), 1e-6),
        (ModelSpec::mlp1(4, 6, 3), 1e-4),
    ];
    for (spec, tolerance) in cases {
        let mut rng = stream(1);
        let data = gen_gaussian_mixture(spec.num_classes, 12, spec.input_dim, 0.8, &mut rng);
        for pair in 0..10 {
            let w = random_vector(spec.param_count(), &mut rng);
            let start = (pair * 7) % (data.len() - 10);
            let indices: Vec<usize> = (start..start + 10).collect();
            let batch = data.batch(&indices);
            let analytic = models::grad(&spec, &w, &batch);
            let numeric = finite_diff_grad(|p| models::loss(&spec, p, &batch), &w, 1e-5).unwrap();
            for (a, n) in analytic.values().iter().zip(numeric.values()) {
                assert!(
                    rel_err(*a, *n) < tolerance,
                    "gradient mismatch: analytic {a}, numeric {n}, tolerance {tolerance}"
                );
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "gradient check took {elapsed:?}");
    println!("[PASS] analytic gradients match central finite differences (20 pairs, {elapsed:?})");
}

#[test]
fn blend_weights_always_sum_to_one() {
    let mut rng = stream(2);
    for draw in 0..1000 {
        let n = 1 + (draw % 8);
        let distances: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 5.0)).collect();
        let r = match draw % 3 {
            0 => 0.0,
            1 => 1e5,
            _ => rng.uniform(0.0, 100.0),
        };
        let weights = similarity_weights(&distances, r).unwrap();
        let total: f64 = weights.iter().sum();
        assert!(
            (total - 1.0).abs() <= 1e-12,
            "draw {draw}: weights sum to {total} (r={r}, n={n})"
        );
    }
    println!("[PASS] similarity weights sum to 1 within 1e-12 over 1000 draws including r=0 and r=1e5");
}

#[test]
fn scale_limits_recover_average_and_nearest() {
    let dim = 6;
    let mut rng = stream(3);
    let mut store = ArtifactStore::new();
    let mut models_saved = Vec::new();
    for session in 1..=3 {
        let model = random_vector(dim, &mut rng);
        store.record_last_model(session, model.clone());
        models_saved.push(model);
        store.record_session_gradient(session, random_vector(dim, &mut rng));
    }
    let current = random_vector(dim, &mut rng);

    // r = 0 blends uniformly, which is the plain-average baseline.
    let uniform = construct_initial_model(&store, &current, 0.0).unwrap();
    let spec = ModelSpec::softmax_linear(2, 3);
    let average = baseline_init(BaselineKind::Average, &store, None, &spec, &mut rng).unwrap();
    for (a, b) in uniform.values().iter().zip(average.values()) {
        assert!((a - b).abs() <= 1e-12, "uniform blend {a} vs average {b}");
    }

    // Huge r with a clear distance gap concentrates on the nearest entry.
    let gaps = [0.9, 0.1, 0.5];
    let mut near_store = ArtifactStore::new();
    for (i, (model, gap)) in models_saved.iter().zip(gaps).enumerate() {
        near_store.record_last_model(i + 1, model.clone());
        let mut g = current.clone();
        g.values_mut()[0] += gap;
        near_store.record_session_gradient(i + 1, g);
    }
    let weights = similarity_weights(&gaps, 1e5).unwrap();
    assert!(weights[1] >= 1.0 - 1e-6, "nearest weight only {}", weights[1]);
    let locked = construct_initial_model(&near_store, &current, 1e5).unwrap();
    for (a, b) in locked.values().iter().zip(models_saved[1].values()) {
        assert!((a - b).abs() <= 1e-6, "locked blend {a} vs nearest model {b}");
    }
    println!("[PASS] r=0 equals the average baseline (1e-12) and r=1e5 locks onto the nearest saved model");
}

#[test]
fn pilot_is_the_arithmetic_mean_and_single_model_is_bit_exact() {
    let dim = 9;
    let mut rng = stream(4);
    for count in 2..=4 {
        let models: Vec<ParamVector> = (0..count).map(|_| random_vector(dim, &mut rng)).collect();
        let pilot = compute_pilot(&models).unwrap();
        for i in 0..dim {
            // Oracle accumulates in reverse order so it is not the same
            // float-op sequence as the implementation.
            let mut total = 0.0;
            for m in models.iter().rev() {
                total += m.values()[i];
            }
            let expected = total / count as f64;
            assert!(
                (pilot.values()[i] - expected).abs() <= 1e-15,
                "pilot coordinate {i}: {} vs {expected}",
                pilot.values()[i]
            );
        }
    }

    let single = random_vector(dim, &mut rng);
    let pilot = compute_pilot(std::slice::from_ref(&single)).unwrap();
    for (a, b) in pilot.values().iter().zip(single.values()) {
        assert_eq!(a.to_bits(), b.to_bits(), "single-model pilot must be bit-exact");
    }
    let mut store = ArtifactStore::new();
    store.record_last_model(0, single.clone());
    assert!(store.try_form_pilot(1).unwrap());
    for (a, b) in store.pilot().unwrap().values().iter().zip(single.values()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    println!("[PASS] pilot equals the arithmetic mean within 1e-15; one pilot session is stored bit-exactly");
}

#[test]
fn zero_strength_penalties_reduce_to_plain_averaging() {
    let seed = 9;
    let data = gen_gaussian_mixture(4, 40, 2, 0.6, &mut derive_stream(seed, StreamPath::new(0, 0, roles::DATASET)));
    let schedule = fedsession::datahub::build_session_schedule(
        4,
        5,
        3,
        1,
        4,
        0.0,
        2,
        &[],
        fedsession::datahub::PartitionScheme::Dirichlet { alpha: 0.5 },
        &mut derive_stream(seed, StreamPath::new(0, 0, roles::SCHEDULE)),
    )
    .unwrap();
    let spec = ModelSpec::softmax_linear(2, 4);

    let run = |algorithm: Algorithm| {
        let mut config = RunConfig::new(spec, algorithm, Variant::Proposed, seed);
        config.epochs = EpochPlan::Uniform(3);
        config.batch_size = 8;
        config.prox_mu = 0.0;
        config.acg_beta = 0.0;
        config.acg_lambda = 0.0;
        run_training(&data, &schedule, &config).unwrap()
    };

    let plain = run(Algorithm::FedAvg);
    for algorithm in [Algorithm::FedProx, Algorithm::FedAcg] {
        let other = run(algorithm);
        assert_eq!(plain.rows.len(), other.rows.len());
        for (a, b) in plain.rows.iter().zip(&other.rows) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits(), "{algorithm:?} loss diverged");
            assert_eq!(a.test_accuracy.to_bits(), b.test_accuracy.to_bits());
            assert_eq!(a.grad_norm_sq.to_bits(), b.grad_norm_sq.to_bits());
        }
        for (a, b) in plain.final_model.values().iter().zip(other.final_model.values()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{algorithm:?} final model diverged");
        }
    }
    println!("[PASS] zero-strength proximal and anchor penalties reproduce plain averaging bit-for-bit over 3 sessions");
}

#[test]
fn quadratic_clients_respect_the_descent_bound() {
    let started = Instant::now();
    let clients = 5;
    let dim = 3;
    let local_steps = 2;
    let lambda = 0.5;
    let rounds = 50;

    for seed in 0..5u64 {
        let mut rng = derive_stream(seed, StreamPath::new(0, 0, roles::MODEL_INIT));
        let centers: Vec<ParamVector> = (0..clients).map(|_| random_vector(dim, &mut rng)).collect();
        let centroid = ParamVector::mean(&centers).unwrap();
        let w0 = random_vector(dim, &mut rng);

        // Each client's objective is 0.5 of its squared distance to a fixed
        // center, so the gradient map has Lipschitz constant exactly 1.
        let grads: Vec<_> = centers
            .iter()
            .map(|c| {
                let c = c.clone();
                move |w: &ParamVector| w.sub(&c)
            })
            .collect();
        let weights = vec![1.0 / clients as f64; clients];
        let mut near_centroid = centroid.clone();
        near_centroid.values_mut()[0] += 1e-6;
        let probes = vec![w0.clone(), near_centroid, ParamVector::zeros(dim)];
        let (zeta1, zeta2) = estimate_zeta_with(&grads, &weights, &probes).unwrap();

        let eta = match lr_condition(1.0, local_steps, local_steps, lambda, zeta1).unwrap() {
            EtaCondition::Satisfiable { eta_max, .. } => 0.9 * eta_max,
            EtaCondition::Unsatisfiable { .. } => panic!("two local steps must be admissible"),
        };

        let loss = |w: &ParamVector| -> f64 {
            centers.iter().map(|c| 0.5 * w.distance(c).powi(2)).sum::<f64>() / clients as f64
        };
        // e full-batch gradient steps on each client contract its offset by
        // (1-eta)^e; the equal-weight aggregate contracts toward the centroid.
        let rho = (1.0 - eta).powi(local_steps as i32);
        let mut log = BoundLog::default();
        let mut w = w0;
        for round in 0..rounds {
            let loss_start = loss(&w);
            let grad_norm_sq = w.distance(&centroid).powi(2);
            let mut next = centroid.clone();
            next.axpy(rho, &w.sub(&centroid));
            log.rounds.push(BoundRound {
                session: 0,
                round_in_session: round,
                loss_start,
                loss_end: loss(&next),
                grad_norm_sq,
                eta,
                theta: 0.0,
                clients: (0..clients)
                    .map(|_| BoundClientRound {
                        epochs: local_steps,
                        batch: 10,
                        data: 10,
                        sigma_tilde_sq: 1.0,
                    })
                    .collect(),
            });
            w = next;
        }

        let constants = BoundConstants { beta: 1.0, zeta1, zeta2, lambda };
        let terms = bound_terms(&log, &constants).unwrap();
        assert_eq!(terms.b, 0.0, "full batches leave no sampling noise");
        assert_eq!(terms.c, 0.0, "full batches leave no batch-fraction drift");
        assert!(
            terms.lhs_mean_grad_sq <= terms.rhs_total,
            "seed {seed}: mean gradient {} exceeds bound {}",
            terms.lhs_mean_grad_sq,
            terms.rhs_total
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "bound harness took {elapsed:?}");
    println!("[PASS] quadratic five-client harness satisfies the descent bound for all 5 seeds over 50 rounds ({elapsed:?})");
}

fn desk_settings(dir: &std::path::Path) -> fedbench::config::BenchSettings {
    let mut raw = RawSettings::default();
    for (key, value) in [
        ("dataset_name", "gaussian"),
        ("gaussian_classes", "6"),
        ("gaussian_per_class", "100"),
        ("gaussian_dim", "2"),
        ("gaussian_spread", "0.5"),
        ("num_clients", "20"),
        ("num_sessions", "4"),
        ("num_sessions_pilot", "1"),
        ("num_rounds", "30"),
        ("cross_session_label_overlap", "0.0"),
        ("in_session_label_dist", "dirichlet"),
        ("dirichlet_alpha", "0.3"),
        ("labels_per_session", "3"),
        ("recurrence", "1:0,3:1"),
        ("algorithm", "fedavg"),
        ("eta", "0.1"),
        ("num_SGD_training", "5"),
        ("batch_size_training", "32"),
        ("theta_pairs", "0"),
        ("output_dir", dir.to_str().unwrap()),
    ] {
        raw.set(key, value).unwrap();
    }
    raw.resolve().unwrap()
}

#[test]
fn warm_start_recovers_a_revisited_distribution_faster() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let settings = desk_settings(dir.path());
    let window = 10;
    // Sessions run A, A, B, A; the interesting transition is the return to A
    // at session 3, where only the warm start can reach past the B model.
    let revisit_session = 3;

    let mut gaps = Vec::new();
    for seed in [0u64, 1, 2] {
        let dataset = load_dataset(&settings, seed).unwrap();
        let schedule = build_schedule(&settings, &dataset, seed).unwrap();
        let spec = model_spec(settings.model, &dataset);
        let accuracy = |variant: Variant| {
            let config = build_run_config(&settings, spec, variant, seed, 10.0);
            let log = run_training(&dataset, &schedule, &config).unwrap();
            transition_mean(&log.rows, revisit_session, window)
        };
        let proposed = accuracy(Variant::Proposed);
        let previous = accuracy(Variant::Previous);
        gaps.push(proposed - previous);
    }

    let clearly_better = gaps.iter().filter(|g| **g >= 0.05).count();
    assert!(
        clearly_better >= 2,
        "warm start beat the carry-over baseline by 5+ points in only {clearly_better}/3 seeds (gaps {gaps:?})"
    );
    assert!(
        gaps.iter().all(|g| *g >= -0.01),
        "warm start fell more than 1 point behind in some seed (gaps {gaps:?})"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "desk-scale comparison took {elapsed:?}");
    println!(
        "[PASS] warm start recovers the revisited distribution faster (gaps {:?}, {elapsed:?})",
        gaps.iter().map(|g| (g * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
}

#[test]
fn closed_form_costs_equal_simulated_counters() {
    let seed = 21;
    let data = gen_gaussian_mixture(4, 60, 2, 0.6, &mut derive_stream(seed, StreamPath::new(0, 0, roles::DATASET)));
    let clients = 5;
    let configs: [(usize, usize, EpochPlan, Variant); 6] = [
        (1, 1, EpochPlan::Uniform(5), Variant::Proposed),
        (1, 2, EpochPlan::Uniform(5), Variant::Proposed),
        (2, 1, EpochPlan::Uniform(3), Variant::Proposed),
        (2, 2, EpochPlan::Uniform(4), Variant::RandomPilot),
        (1, 1, EpochPlan::PerClient(vec![1, 2, 3, 4, 5]), Variant::Proposed),
        (2, 2, EpochPlan::PerClient(vec![2, 2, 7, 1, 3]), Variant::Previous),
    ];
    for (pilot, grad_rounds, epochs, variant) in configs {
        let schedule = fedsession::datahub::build_session_schedule(
            4,
            clients,
            4,
            pilot,
            3,
            0.0,
            2,
            &[],
            fedsession::datahub::PartitionScheme::Dirichlet { alpha: 0.7 },
            &mut derive_stream(seed, StreamPath::new(0, 0, roles::SCHEDULE)),
        )
        .unwrap();
        let spec = ModelSpec::softmax_linear(2, 4);
        let mut config = RunConfig::new(spec, Algorithm::FedAvg, variant, seed);
        config.epochs = epochs.clone();
        config.grad_rounds = grad_rounds;
        config.grad_epochs = 2;
        config.batch_size = 6;
        config.grad_batch_size = 6;
        let log = run_training(&data, &schedule, &config).unwrap();

        let closed = fedsession::diagnostics::cost_account(
            &schedule,
            variant,
            &epochs,
            grad_rounds,
            config.grad_epochs,
            spec.param_count(),
        );
        assert_eq!(closed.local_epochs_total, log.cost.local_epochs_total, "epochs for P={pilot} V={grad_rounds}");
        assert_eq!(closed.client_uploads, log.cost.client_uploads, "uploads for P={pilot} V={grad_rounds}");
        assert_eq!(closed.server_broadcasts, log.cost.server_broadcasts, "broadcasts for P={pilot} V={grad_rounds}");
        assert_eq!(closed.stored_vectors, log.cost.stored_vectors, "storage for P={pilot} V={grad_rounds}");

        // Stored bytes grow by exactly the advertised amount per post-pilot session.
        let stored_params: usize = log.store.q1().iter().map(|(_, v)| v.dim()).sum::<usize>()
            + log.store.q2().iter().map(|(_, v)| v.dim()).sum::<usize>();
        let post_pilot = schedule.num_sessions - pilot;
        assert_eq!(stored_params, closed.storage_growth_per_session * post_pilot);
    }
    println!("[PASS] closed-form cost counters equal simulated counters across the 6-config matrix");
}

#[test]
fn equal_seeds_produce_identical_metrics_bytes() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let configure = |dir: &std::path::Path| {
        let mut raw = RawSettings::default();
        for (key, value) in [
            ("dataset_name", "gaussian"),
            ("gaussian_classes", "4"),
            ("gaussian_per_class", "40"),
            ("num_clients", "8"),
            ("num_sessions", "3"),
            ("num_rounds", "5"),
            ("num_SGD_training", "3"),
            ("batch_size_training", "8"),
            ("algorithm", "scaffold"),
            ("theta_pairs", "4"),
            ("seed", "7"),
            ("output_dir", dir.to_str().unwrap()),
        ] {
            raw.set(key, value).unwrap();
        }
        raw.resolve().unwrap()
    };
    let first = run_experiment(&configure(dir_a.path())).unwrap();
    let second = run_experiment(&configure(dir_b.path())).unwrap();
    let bytes_a = std::fs::read(&first[0].metrics).unwrap();
    let bytes_b = std::fs::read(&second[0].metrics).unwrap();
    assert!(!bytes_a.is_empty());
    assert_eq!(bytes_a, bytes_b, "equal seeds must produce byte-identical metrics files");
    println!("[PASS] equal seeds produce byte-identical metrics.csv");
}

#[test]
fn learning_rate_cap_spot_values() {
    match lr_condition(1.0, 1, 1, 0.5, 1.0).unwrap() {
        EtaCondition::Satisfiable { eta_max, drift_cap, .. } => {
            assert_eq!(eta_max, 0.5);
            assert!(drift_cap.is_none(), "a single local step leaves no drift cap");
        }
        other => panic!("unexpected {other:?}"),
    }
    match lr_condition(1.0, 1, 2, 0.5, 1.0).unwrap() {
        EtaCondition::Satisfiable { eta_max, .. } => {
            assert!((eta_max - 0.2041).abs() <= 1e-4, "eta_max {eta_max}");
        }
        other => panic!("unexpected {other:?}"),
    }
    match lr_condition(1.0, 4, 4, 0.5, 1.0).unwrap() {
        EtaCondition::Unsatisfiable { smoothness_cap } => assert!(smoothness_cap <= 0.0),
        other => panic!("unexpected {other:?}"),
    }
    println!("[PASS] learning-rate cap spot values: 0.5, 0.2041±1e-4, and the four-step case is unsatisfiable");
}
