//! Convergence diagnostics: the per-round bound on the mean squared gradient
//! norm, its learning-rate condition, estimators for the smoothness /
//! dissimilarity / data-variability constants, and communication-and-storage
//! cost accounting.
//!
//! Estimators are maxima over sampled probes, so they are certified lower
//! bounds of the true constants; reports should carry that caveat.

use serde::Serialize;

use crate::datahub::{ClientDataset, LabeledDataset, SessionSchedule};
use crate::models::{self, Batch, ModelSpec};
use crate::numkit::{ParamVector, RngStream};
use crate::server::{EpochPlan, Variant};
use crate::{Error, Result};

/// Run-level constants entering the bound.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundConstants {
    /// Gradient Lipschitz constant β.
    pub beta: f64,
    /// Relative dissimilarity ζ₁ ≥ 1.
    pub zeta1: f64,
    /// Absolute dissimilarity ζ₂ ≥ 0.
    pub zeta2: f64,
    /// Drift-contraction constant Λ ∈ (0, 1), chosen by the analyst.
    pub lambda: f64,
}

/// Per-client facts for one round.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundClientRound {
    /// Local steps e_k.
    pub epochs: usize,
    /// Effective batch size B_k.
    pub batch: usize,
    /// Local dataset size D_k.
    pub data: usize,
    /// Feature sample variance σ̃_k² (mean squared distance to the client's
    /// feature mean).
    pub sigma_tilde_sq: f64,
}

/// One global round's record.
#[derive(Debug, Clone, Serialize)]
pub struct BoundRound {
    pub session: usize,
    pub round_in_session: usize,
    /// F(w) at the broadcast model.
    pub loss_start: f64,
    /// F(w) at the aggregated model ending the round.
    pub loss_end: f64,
    /// ‖∇F‖² at the broadcast model.
    pub grad_norm_sq: f64,
    pub eta: f64,
    /// Data-variability constant Θ for this round (0 when not estimated).
    pub theta: f64,
    pub clients: Vec<BoundClientRound>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BoundLog {
    pub rounds: Vec<BoundRound>,
}

/// Feature sample variance of a client: mean squared distance of its feature
/// vectors to their mean.
pub fn sigma_tilde_sq(dataset: &LabeledDataset, indices: &[usize]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let d = dataset.feature_dim();
    let mut mean = vec![0.0; d];
    for &i in indices {
        for (m, x) in mean.iter_mut().zip(dataset.features(i)) {
            *m += x;
        }
    }
    let n = indices.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    let mut total = 0.0;
    for &i in indices {
        total += dataset
            .features(i)
            .iter()
            .zip(&mean)
            .map(|(x, m)| (x - m) * (x - m))
            .sum::<f64>();
    }
    total / n
}

/// Smoothness estimate for an arbitrary gradient field: max over probes of
/// ‖∇(w) − ∇(w′)‖ / ‖w − w′‖ with w′ = w + radius·(unit direction).
pub fn estimate_beta_with<F>(
    grad: F,
    dim: usize,
    num_probes: usize,
    radius: f64,
    rng: &mut RngStream,
) -> f64
where
    F: Fn(&ParamVector) -> ParamVector,
{
    assert!(num_probes >= 1 && radius > 0.0);
    let mut best: f64 = 0.0;
    for _ in 0..num_probes {
        let w = ParamVector::new((0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let mut dir = ParamVector::new((0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let norm = dir.norm();
        if norm < 1e-12 {
            continue;
        }
        dir.scale(radius / norm);
        let w2 = w.add(&dir);
        let gap = grad(&w).distance(&grad(&w2));
        best = best.max(gap / w.distance(&w2));
    }
    best
}

/// [`estimate_beta_with`] over the training loss on `batch`.
pub fn estimate_beta(
    spec: &ModelSpec,
    batch: &Batch,
    num_probes: usize,
    radius: f64,
    rng: &mut RngStream,
) -> f64 {
    estimate_beta_with(
        |w| models::grad(spec, w, batch),
        spec.param_count(),
        num_probes,
        radius,
        rng,
    )
}

/// Data-variability estimate at `w`: max over sample pairs of
/// ‖∇f(w, d) − ∇f(w, d′)‖ / ‖x − x′‖, skipping pairs with near-identical
/// features. When `num_pairs` covers every pair, the scan is exhaustive (and
/// therefore permutation-invariant); otherwise pairs are sampled.
pub fn estimate_theta(
    spec: &ModelSpec,
    w: &ParamVector,
    batch: &Batch,
    num_pairs: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::EmptyInput("need at least two samples for variability"));
    }
    let single_grad = |i: usize| {
        let one = Batch::new(vec![batch.features()[i].clone()], vec![batch.labels()[i]]);
        models::grad(spec, w, &one)
    };
    let feature_gap = |i: usize, j: usize| {
        batch.features()[i]
            .iter()
            .zip(&batch.features()[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut best: f64 = 0.0;
    let mut usable = 0usize;
    let all_pairs = n * (n - 1) / 2;
    if num_pairs >= all_pairs {
        for i in 0..n {
            for j in (i + 1)..n {
                let gap = feature_gap(i, j);
                if gap < 1e-12 {
                    continue;
                }
                usable += 1;
                best = best.max(single_grad(i).distance(&single_grad(j)) / gap);
            }
        }
    } else {
        for _ in 0..num_pairs {
            let i = rng.uniform(0.0, n as f64) as usize;
            let mut j = rng.uniform(0.0, (n - 1) as f64) as usize;
            if j >= i {
                j += 1;
            }
            let gap = feature_gap(i, j);
            if gap < 1e-12 {
                continue;
            }
            usable += 1;
            best = best.max(single_grad(i).distance(&single_grad(j)) / gap);
        }
    }
    if usable == 0 {
        return Err(Error::EmptyInput("no pair of samples with distinct features"));
    }
    Ok(best)
}

/// Dissimilarity fit over arbitrary per-client gradient fields: the smallest
/// (ζ₁ ≥ 1, ζ₂ ≥ 0) with Σ a_k‖∇F_k‖² ≤ ζ₁‖Σ a_k∇F_k‖² + ζ₂ at every probe.
pub fn estimate_zeta_with<F>(
    client_grads: &[F],
    weights: &[f64],
    probes: &[ParamVector],
) -> Result<(f64, f64)>
where
    F: Fn(&ParamVector) -> ParamVector,
{
    if probes.is_empty() {
        return Err(Error::EmptyInput("dissimilarity fit needs probe points"));
    }
    if client_grads.len() != weights.len() || client_grads.is_empty() {
        return Err(Error::InvalidConfig("one weight per client required".into()));
    }
    let weight_sum: f64 = weights.iter().sum();
    if (weight_sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "client weights must sum to 1, got {weight_sum}"
        )));
    }
    let mut evaluations = Vec::with_capacity(probes.len());
    for probe in probes {
        let mut mean = ParamVector::zeros(probe.dim());
        let mut weighted_norms = 0.0;
        for (grad, &a) in client_grads.iter().zip(weights) {
            let g = grad(probe);
            weighted_norms += a * g.norm_sq();
            mean.axpy(a, &g);
        }
        evaluations.push((weighted_norms, mean.norm_sq()));
    }
    let mut zeta1: f64 = 1.0;
    for &(num, den) in &evaluations {
        if den > 0.0 {
            zeta1 = zeta1.max(num / den);
        }
    }
    let mut zeta2: f64 = 0.0;
    for &(num, den) in &evaluations {
        zeta2 = zeta2.max(num - zeta1 * den);
    }
    Ok((zeta1, zeta2.max(0.0)))
}

/// [`estimate_zeta_with`] over client training losses; weights a_k = D_k/D.
pub fn estimate_zeta(
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    clients: &[ClientDataset],
    probes: &[ParamVector],
) -> Result<(f64, f64)> {
    if clients.is_empty() {
        return Err(Error::EmptyInput("dissimilarity fit needs clients"));
    }
    let total: usize = clients.iter().map(|c| c.len()).sum();
    let weights: Vec<f64> = clients.iter().map(|c| c.len() as f64 / total as f64).collect();
    let batches: Vec<Batch> = clients.iter().map(|c| dataset.batch(&c.indices)).collect();
    let grads: Vec<_> = batches
        .iter()
        .map(|b| move |w: &ParamVector| models::grad(spec, w, b))
        .collect();
    estimate_zeta_with(&grads, &weights, probes)
}

/// Outcome of the learning-rate condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum EtaCondition {
    Satisfiable {
        /// The admissible range is (0, eta_max).
        eta_max: f64,
        /// Cap from the smoothness term.
        smoothness_cap: f64,
        /// Cap from the drift term; `None` when e_max = 1 leaves it
        /// unconstrained.
        drift_cap: Option<f64>,
    },
    Unsatisfiable {
        /// The (non-positive) smoothness cap that rules every η out.
        smoothness_cap: f64,
    },
}

/// Largest admissible learning rate:
/// min{(0.5 − (1/e_min − 1)²)/β, √Λ/(2β√((ζ₁+Λ)·e_max(e_max−1)))}.
/// The second cap disappears at e_max = 1; a non-positive first cap means no
/// learning rate satisfies the condition.
pub fn lr_condition(
    beta: f64,
    e_min: usize,
    e_max: usize,
    lambda: f64,
    zeta1: f64,
) -> Result<EtaCondition> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    if e_min < 1 || e_max < e_min {
        return Err(Error::InvalidConfig(format!(
            "need 1 ≤ e_min ≤ e_max, got {e_min} and {e_max}"
        )));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda must lie in (0, 1), got {lambda}"
        )));
    }
    if zeta1 < 1.0 {
        return Err(Error::InvalidConfig(format!("zeta1 must be ≥ 1, got {zeta1}")));
    }
    let gap = 1.0 / e_min as f64 - 1.0;
    let smoothness_cap = (0.5 - gap * gap) / beta;
    if smoothness_cap <= 0.0 {
        return Ok(EtaCondition::Unsatisfiable { smoothness_cap });
    }
    let drift_cap = if e_max > 1 {
        let e = e_max as f64;
        Some(lambda.sqrt() / (2.0 * beta * ((zeta1 + lambda) * e * (e - 1.0)).sqrt()))
    } else {
        None
    };
    let eta_max = match drift_cap {
        Some(d) => smoothness_cap.min(d),
        None => smoothness_cap,
    };
    Ok(EtaCondition::Satisfiable {
        eta_max,
        smoothness_cap,
        drift_cap,
    })
}

/// The evaluated bound: per-term round averages, their total, and the
/// left-hand side they must dominate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundTerms {
    /// Loss-descent term.
    pub a: f64,
    /// Mini-batch sampling-noise term.
    pub b: f64,
    /// Batch-fraction drift term.
    pub c: f64,
    /// Inter-client dissimilarity term.
    pub d: f64,
    pub rhs_total: f64,
    pub lhs_mean_grad_sq: f64,
}

/// Evaluates the four bound terms as averages over the logged rounds.
/// Expectations are replaced by single-trajectory realized values.
pub fn bound_terms(log: &BoundLog, constants: &BoundConstants) -> Result<BoundTerms> {
    if log.rounds.is_empty() {
        return Err(Error::EmptyInput("bound log has no rounds"));
    }
    let lam = constants.lambda;
    if !(lam > 0.0 && lam < 1.0) {
        return Err(Error::InvalidConfig(format!("lambda must lie in (0, 1), got {lam}")));
    }
    let beta = constants.beta;
    let g = log.rounds.len() as f64;
    let (mut a, mut b, mut c, mut d, mut lhs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for round in &log.rounds {
        if round.clients.is_empty() {
            return Err(Error::EmptyInput("bound round has no clients"));
        }
        let eta = round.eta;
        let one_minus = 1.0 - lam;
        a += 2.0 * (round.loss_start - round.loss_end) / (eta * one_minus);

        let mut noise = 0.0;
        let mut drift = 0.0;
        let mut total_data = 0usize;
        let mut e_max = 1usize;
        for k in &round.clients {
            let (e_k, b_k, d_k) = (k.epochs as f64, k.batch as f64, k.data as f64);
            total_data += k.data;
            e_max = e_max.max(k.epochs);
            noise += k.sigma_tilde_sq * e_k * (d_k - b_k) / (b_k * d_k * d_k);
            drift += (e_k - 1.0) * (1.0 - b_k / d_k) * round.theta * k.sigma_tilde_sq / b_k;
        }
        b += 4.0 * beta * round.theta * round.theta * eta / one_minus * noise;
        c += 4.0 * beta * beta * eta * eta / (total_data as f64 * one_minus) * drift;
        let em = e_max as f64;
        d += 8.0 * beta * beta * eta * eta * em * (em - 1.0) * constants.zeta2 / one_minus;
        lhs += round.grad_norm_sq;
    }
    let (a, b, c, d) = (a / g, b / g, c / g, d / g);
    Ok(BoundTerms {
        a,
        b,
        c,
        d,
        rhs_total: a + b + c + d,
        lhs_mean_grad_sq: lhs / g,
    })
}

/// A round where the chosen Λ falls outside its admissible window.
#[derive(Debug, Clone, Serialize)]
pub struct LambdaFlag {
    pub session: usize,
    pub round_in_session: usize,
    pub detail: String,
}

/// Checks, per logged round, that Λ clears its lower bound
/// 4η²β²Θ²e_max(e_max−1)ζ₁ / (1 − 4η²β²e_max(e_max−1)) and stays below both
/// 1 and ζ₁. Violations are reported, never fatal.
pub fn lambda_condition_flags(log: &BoundLog, constants: &BoundConstants) -> Vec<LambdaFlag> {
    let mut flags = Vec::new();
    let lam = constants.lambda;
    for round in &log.rounds {
        let mut problems = Vec::new();
        if lam >= 1.0 {
            problems.push("Λ ≥ 1".to_string());
        }
        if lam >= constants.zeta1 {
            problems.push(format!("Λ ≥ ζ₁ = {}", constants.zeta1));
        }
        let e_max = round.clients.iter().map(|k| k.epochs).max().unwrap_or(1);
        if e_max > 1 {
            let e = e_max as f64;
            let core = 4.0 * round.eta * round.eta * constants.beta * constants.beta * e * (e - 1.0);
            let denom = 1.0 - core;
            if denom <= 0.0 {
                problems.push(format!(
                    "η = {} too large for drift contraction (1 − 4η²β²e_max(e_max−1) = {denom:.3e})",
                    round.eta
                ));
            } else {
                let lower = core * round.theta * round.theta * constants.zeta1 / denom;
                if lam <= lower {
                    problems.push(format!("Λ = {lam} ≤ lower bound {lower:.3e}"));
                }
            }
        }
        if !problems.is_empty() {
            flags.push(LambdaFlag {
                session: round.session,
                round_in_session: round.round_in_session,
                detail: problems.join("; "),
            });
        }
    }
    flags
}

/// Closed-form communication and storage counters for a full run at full
/// participation. Matches the simulator's accumulated counters exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub local_epochs_total: usize,
    pub client_uploads: usize,
    pub server_broadcasts: usize,
    /// Vectors held at run end: one last-model per post-pilot session, plus
    /// one gradient each for the warm-start variants.
    pub stored_vectors: usize,
    /// Per-post-pilot-session storage growth in parameter counts.
    pub storage_growth_per_session: usize,
}

/// Evaluates the counters for `schedule` run under `variant`.
pub fn cost_account(
    schedule: &SessionSchedule,
    variant: Variant,
    epochs: &EpochPlan,
    grad_rounds: usize,
    grad_epochs: usize,
    param_count: usize,
) -> CostReport {
    let s = schedule.num_sessions;
    let p = schedule.pilot_sessions;
    let t = schedule.rounds_per_session;
    let k = schedule.sessions.first().map_or(0, |plan| plan.clients.len());
    let epoch_sum: usize = (0..k).map(|c| epochs.for_client(c)).sum();
    let post_pilot = s - p;
    let warm = variant.runs_gradient_rounds();

    let mut local_epochs_total = s * t * epoch_sum;
    let mut client_uploads = s * t * k;
    let mut server_broadcasts = s * t;
    if warm {
        local_epochs_total += post_pilot * grad_rounds * k * grad_epochs;
        client_uploads += post_pilot * grad_rounds * k;
        server_broadcasts += post_pilot * grad_rounds;
    }
    let per_session_vectors = if warm { 2 } else { 1 };
    CostReport {
        local_epochs_total,
        client_uploads,
        server_broadcasts,
        stored_vectors: post_pilot * per_session_vectors,
        storage_growth_per_session: if post_pilot == 0 {
            0
        } else {
            per_session_vectors * param_count
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::{build_session_schedule, gen_gaussian_mixture, PartitionScheme};
    use crate::numkit::{derive_stream, roles, StreamPath};

    fn stream(seed: u64, tag: u64) -> RngStream {
        derive_stream(seed, StreamPath::new(0, tag, roles::THETA))
    }

    #[test]
    fn beta_estimate_recovers_quadratic_curvature() {
        for a in [1.0, 3.5] {
            let center = ParamVector::new(vec![0.3, -0.7, 1.1]);
            let grad = |w: &ParamVector| {
                let mut g = w.sub(&center);
                g.scale(a);
                g
            };
            let est = estimate_beta_with(grad, 3, 5, 0.5, &mut stream(60, a as u64));
            assert!((est - a).abs() < 1e-9, "a={a} est={est}");
        }
    }

    #[test]
    fn beta_estimate_grows_with_more_probes() {
        let data = gen_gaussian_mixture(3, 30, 2, 0.6, &mut stream(61, 0));
        let spec = ModelSpec::softmax_linear(2, 3);
        let batch = data.batch(&(0..data.len()).collect::<Vec<_>>());
        let few = estimate_beta(&spec, &batch, 3, 0.5, &mut stream(61, 1));
        let many = estimate_beta(&spec, &batch, 12, 0.5, &mut stream(61, 1));
        assert!(many >= few);
        assert!(few > 0.0 && many.is_finite());
    }

    #[test]
    fn theta_skips_degenerate_pairs_and_is_permutation_invariant() {
        let spec = ModelSpec::softmax_linear(2, 2);
        let w = ParamVector::new(vec![0.4, -0.2, 0.1, 0.0, 0.3, -0.3]);
        // Two identical feature rows with different labels plus one distinct.
        let batch = Batch::new(
            vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![-1.0, 0.5]],
            vec![0, 1, 1],
        );
        let theta = estimate_theta(&spec, &w, &batch, 100, &mut stream(62, 0)).unwrap();
        assert!(theta.is_finite() && theta > 0.0);

        let permuted = Batch::new(
            vec![vec![-1.0, 0.5], vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![1, 1, 0],
        );
        let theta_p = estimate_theta(&spec, &w, &permuted, 100, &mut stream(62, 1)).unwrap();
        assert_eq!(theta, theta_p);

        let degenerate = Batch::new(vec![vec![2.0, 2.0], vec![2.0, 2.0]], vec![0, 1]);
        let err = estimate_theta(&spec, &w, &degenerate, 10, &mut stream(62, 2)).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn theta_dominates_any_hand_picked_pair() {
        let spec = ModelSpec::softmax_linear(2, 2);
        let w = ParamVector::new(vec![0.2, 0.1, -0.4, 0.2, 0.05, -0.05]);
        let batch = Batch::new(
            vec![vec![0.0, 1.0], vec![1.5, -0.5], vec![0.5, 0.5], vec![-1.0, -1.0]],
            vec![0, 1, 0, 1],
        );
        let theta = estimate_theta(&spec, &w, &batch, 1000, &mut stream(63, 0)).unwrap();
        let single = |i: usize| {
            let one = Batch::new(vec![batch.features()[i].clone()], vec![batch.labels()[i]]);
            models::grad(&spec, &w, &one)
        };
        let hand = single(0).distance(&single(3))
            / batch.features()[0]
                .iter()
                .zip(&batch.features()[3])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        assert!(theta >= hand - 1e-12);
    }

    #[test]
    fn zeta_is_one_zero_for_identical_clients() {
        let grad = |w: &ParamVector| w.scaled(2.0);
        let grads = [grad, grad, grad];
        let probes = vec![
            ParamVector::new(vec![1.0, 0.0]),
            ParamVector::new(vec![-0.5, 2.0]),
        ];
        let (z1, z2) = estimate_zeta_with(&grads, &[0.25, 0.25, 0.5], &probes).unwrap();
        assert!((z1 - 1.0).abs() < 1e-12);
        assert!(z2.abs() < 1e-12);
    }

    #[test]
    fn zeta_catches_opposed_quadratic_clients() {
        let c = ParamVector::new(vec![2.0, -1.0]);
        let c2 = c.clone();
        let grads: Vec<Box<dyn Fn(&ParamVector) -> ParamVector>> = vec![
            Box::new(move |w: &ParamVector| w.sub(&c)),
            Box::new(move |w: &ParamVector| w.add(&c2)),
        ];
        let probes = vec![ParamVector::zeros(2), ParamVector::new(vec![0.3, 0.4])];
        let (z1, z2) = estimate_zeta_with(&grads, &[0.5, 0.5], &probes).unwrap();
        let c_norm_sq = 5.0;
        assert!(z2 >= c_norm_sq - 1e-9, "z2={z2}");
        // The fitted pair satisfies the inequality at every probe.
        for probe in &probes {
            let g1 = probe.sub(&ParamVector::new(vec![2.0, -1.0]));
            let g2 = probe.add(&ParamVector::new(vec![2.0, -1.0]));
            let num = 0.5 * g1.norm_sq() + 0.5 * g2.norm_sq();
            let mut mean = g1.scaled(0.5);
            mean.axpy(0.5, &g2);
            assert!(num <= z1 * mean.norm_sq() + z2 + 1e-9);
        }
    }

    #[test]
    fn zeta_on_real_clients_satisfies_its_inequality() {
        let data = gen_gaussian_mixture(4, 30, 2, 0.5, &mut stream(64, 0));
        let spec = ModelSpec::softmax_linear(2, 4);
        let half = data.len() / 2;
        let clients = vec![
            ClientDataset { client_id: 0, session: 0, indices: (0..half).collect() },
            ClientDataset { client_id: 1, session: 0, indices: (half..data.len()).collect() },
        ];
        let probes: Vec<ParamVector> = (0..4)
            .map(|i| {
                let mut rng = stream(64, 10 + i);
                ParamVector::new((0..spec.param_count()).map(|_| rng.uniform(-1.0, 1.0)).collect())
            })
            .collect();
        let (z1, z2) = estimate_zeta(&spec, &data, &clients, &probes).unwrap();
        assert!(z1 >= 1.0 && z2 >= 0.0);
        let weights = [half as f64 / data.len() as f64, (data.len() - half) as f64 / data.len() as f64];
        for probe in &probes {
            let g0 = models::grad(&spec, probe, &data.batch(&clients[0].indices));
            let g1 = models::grad(&spec, probe, &data.batch(&clients[1].indices));
            let num = weights[0] * g0.norm_sq() + weights[1] * g1.norm_sq();
            let mut mean = g0.scaled(weights[0]);
            mean.axpy(weights[1], &g1);
            assert!(num <= z1 * mean.norm_sq() + z2 + 1e-9);
        }
    }

    #[test]
    fn lr_condition_spot_values() {
        match lr_condition(1.0, 1, 1, 0.5, 1.0).unwrap() {
            EtaCondition::Satisfiable { eta_max, drift_cap, .. } => {
                assert!((eta_max - 0.5).abs() < 1e-12);
                assert!(drift_cap.is_none());
            }
            other => panic!("unexpected {other:?}"),
        }
        match lr_condition(1.0, 1, 2, 0.5, 1.0).unwrap() {
            EtaCondition::Satisfiable { eta_max, .. } => {
                assert!((eta_max - 0.2041).abs() < 1e-4, "eta_max={eta_max}");
            }
            other => panic!("unexpected {other:?}"),
        }
        match lr_condition(1.0, 4, 4, 0.5, 1.0).unwrap() {
            EtaCondition::Unsatisfiable { smoothness_cap } => assert!(smoothness_cap <= 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lr_condition_caps_shrink_with_beta_and_steps() {
        let eta = |beta: f64, e_max: usize| match lr_condition(beta, 1, e_max, 0.5, 1.5).unwrap() {
            EtaCondition::Satisfiable { eta_max, .. } => eta_max,
            other => panic!("unexpected {other:?}"),
        };
        assert!(eta(2.0, 2) < eta(1.0, 2));
        assert!(eta(1.0, 5) < eta(1.0, 2));
        assert!(eta(1.0, 1) >= eta(1.0, 2));
    }

    fn constant_round(
        eta: f64,
        theta: f64,
        clients: Vec<BoundClientRound>,
        losses: (f64, f64),
        grad_sq: f64,
    ) -> BoundRound {
        BoundRound {
            session: 0,
            round_in_session: 0,
            loss_start: losses.0,
            loss_end: losses.1,
            grad_norm_sq: grad_sq,
            eta,
            theta,
            clients,
        }
    }

    #[test]
    fn bound_terms_match_hand_computed_values() {
        // Single round, β=1, η=0.1, e_max=2, ζ₂=0.5, Λ=0.5, full batch.
        let constants = BoundConstants { beta: 1.0, zeta1: 1.0, zeta2: 0.5, lambda: 0.5 };
        let clients = vec![BoundClientRound { epochs: 2, batch: 10, data: 10, sigma_tilde_sq: 1.0 }];
        let log = BoundLog {
            rounds: vec![constant_round(0.1, 3.0, clients, (1.0, 0.8), 0.7)],
        };
        let terms = bound_terms(&log, &constants).unwrap();
        // (a) 2·0.2/(0.1·0.5) = 8; (b),(c) vanish at full batch;
        // (d) 8·1·0.01·2·1·0.5/0.5 = 0.16.
        assert!((terms.a - 8.0).abs() < 1e-12);
        assert_eq!(terms.b, 0.0);
        assert_eq!(terms.c, 0.0);
        assert!((terms.d - 0.16).abs() < 1e-12);
        assert!((terms.rhs_total - 8.16).abs() < 1e-12);
        assert!((terms.lhs_mean_grad_sq - 0.7).abs() < 1e-15);
    }

    #[test]
    fn bound_terms_vanish_for_single_step_clients() {
        let constants = BoundConstants { beta: 2.0, zeta1: 1.5, zeta2: 0.3, lambda: 0.5 };
        let clients = vec![
            BoundClientRound { epochs: 1, batch: 4, data: 9, sigma_tilde_sq: 2.0 },
            BoundClientRound { epochs: 1, batch: 3, data: 7, sigma_tilde_sq: 1.0 },
        ];
        let log = BoundLog {
            rounds: vec![constant_round(0.05, 1.0, clients, (2.0, 1.9), 0.4)],
        };
        let terms = bound_terms(&log, &constants).unwrap();
        // e_k = 1 kills (c) and (d); partial batches keep (b) alive.
        assert!(terms.b > 0.0);
        assert_eq!(terms.c, 0.0);
        assert_eq!(terms.d, 0.0);
    }

    #[test]
    fn quadratic_harness_respects_the_bound() {
        // Five quadratic clients, e local steps, full batch, uniform weights.
        // Updates are deterministic, so realized values equal expectations.
        for seed in 0..2u64 {
            let dim = 3;
            let mut rng = stream(65, seed);
            let centers: Vec<ParamVector> = (0..5)
                .map(|_| ParamVector::new((0..dim).map(|_| rng.uniform(-2.0, 2.0)).collect()))
                .collect();
            let weights = vec![0.2; 5];
            let grads: Vec<_> = centers
                .iter()
                .map(|c| {
                    let c = c.clone();
                    move |w: &ParamVector| w.sub(&c)
                })
                .collect();
            let mut probes: Vec<ParamVector> = centers.iter().map(|c| c.scaled(1.5)).collect();
            probes.push(ParamVector::zeros(dim));
            let (z1, z2) = estimate_zeta_with(&grads, &weights, &probes).unwrap();
            let e = 2usize;
            let eta = match lr_condition(1.0, e, e, 0.5, z1).unwrap() {
                EtaCondition::Satisfiable { eta_max, .. } => 0.9 * eta_max,
                other => panic!("unexpected {other:?}"),
            };

            let mean_center = ParamVector::mean(&centers).unwrap();
            let loss = |w: &ParamVector| -> f64 {
                centers.iter().map(|c| 0.1 * w.distance(c).powi(2)).sum()
            };
            let mut w = ParamVector::new((0..dim).map(|_| rng.uniform(-3.0, 3.0)).collect());
            let mut log = BoundLog::default();
            for g in 0..50 {
                let loss_start = loss(&w);
                let grad_sq = w.distance(&mean_center).powi(2);
                let mut agg = ParamVector::zeros(dim);
                for c in &centers {
                    let mut local = w.clone();
                    for _ in 0..e {
                        local.axpy(-eta, &local.sub(c));
                    }
                    agg.axpy(0.2, &local);
                }
                log.rounds.push(BoundRound {
                    session: 0,
                    round_in_session: g,
                    loss_start,
                    loss_end: loss(&agg),
                    grad_norm_sq: grad_sq,
                    eta,
                    theta: 0.0,
                    clients: (0..5)
                        .map(|_| BoundClientRound { epochs: e, batch: 1, data: 1, sigma_tilde_sq: 0.0 })
                        .collect(),
                });
                w = agg;
            }
            let constants = BoundConstants { beta: 1.0, zeta1: z1, zeta2: z2, lambda: 0.5 };
            let terms = bound_terms(&log, &constants).unwrap();
            assert!(
                terms.lhs_mean_grad_sq <= terms.rhs_total,
                "seed {seed}: lhs {} > rhs {}",
                terms.lhs_mean_grad_sq,
                terms.rhs_total
            );
            assert!(lambda_condition_flags(&log, &constants).is_empty());
        }
    }

    #[test]
    fn lambda_flags_fire_on_oversized_eta() {
        let constants = BoundConstants { beta: 1.0, zeta1: 1.2, zeta2: 0.0, lambda: 0.5 };
        let clients = vec![BoundClientRound { epochs: 3, batch: 2, data: 8, sigma_tilde_sq: 1.0 }];
        let log = BoundLog {
            rounds: vec![constant_round(0.9, 1.0, clients, (1.0, 0.9), 0.5)],
        };
        let flags = lambda_condition_flags(&log, &constants);
        assert_eq!(flags.len(), 1);
        assert!(flags[0].detail.contains("drift contraction"));
    }

    #[test]
    fn sigma_tilde_matches_hand_computation() {
        let data = crate::datahub::parse_csv(
            "t",
            "label,f0,f1\n0,0,0\n0,2,0\n1,0,2\n",
        )
        .unwrap();
        // Mean (2/3, 2/3); squared distances: 8/9, 16/9+4/9=20/9, 4/9+16/9=20/9.
        let expected = (8.0 / 9.0 + 20.0 / 9.0 + 20.0 / 9.0) / 3.0;
        let got = sigma_tilde_sq(&data, &[0, 1, 2]);
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(sigma_tilde_sq(&data, &[1]), 0.0);
    }

    #[test]
    fn cost_account_matches_worked_examples() {
        let mut rng = stream(66, 0);
        // S = P = 1, T = 2, K = 3, e = 5.
        let schedule = build_session_schedule(
            4, 3, 1, 1, 2, 0.0, 2, &[], PartitionScheme::Dirichlet { alpha: 0.5 }, &mut rng,
        )
        .unwrap();
        let report = cost_account(&schedule, Variant::Proposed, &EpochPlan::Uniform(5), 1, 5, 11);
        assert_eq!(report.local_epochs_total, 30);
        assert_eq!(report.client_uploads, 6);
        assert_eq!(report.server_broadcasts, 2);
        assert_eq!(report.stored_vectors, 0);
        assert_eq!(report.storage_growth_per_session, 0);

        // One post-pilot session, V = 1: 3 extra uploads, 1 extra broadcast.
        let schedule2 = build_session_schedule(
            4, 3, 2, 1, 2, 0.0, 2, &[], PartitionScheme::Dirichlet { alpha: 0.5 }, &mut rng,
        )
        .unwrap();
        let r2 = cost_account(&schedule2, Variant::Proposed, &EpochPlan::Uniform(5), 1, 4, 11);
        assert_eq!(r2.client_uploads, 2 * 2 * 3 + 3);
        assert_eq!(r2.server_broadcasts, 2 * 2 + 1);
        assert_eq!(r2.local_epochs_total, 2 * 2 * 15 + 1 * 1 * 3 * 4);
        assert_eq!(r2.stored_vectors, 2);
        assert_eq!(r2.storage_growth_per_session, 22);

        let r3 = cost_account(&schedule2, Variant::Previous, &EpochPlan::Uniform(5), 1, 4, 11);
        assert_eq!(r3.client_uploads, 12);
        assert_eq!(r3.server_broadcasts, 4);
        assert_eq!(r3.stored_vectors, 1);
        assert_eq!(r3.storage_growth_per_session, 11);
    }
}
