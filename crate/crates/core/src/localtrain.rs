//! One client's local training for one global round.
//!
//! The server hands a start model plus algorithm signals; the client runs
//! `epochs` SGD steps on freshly drawn mini-batches and returns its final
//! model, updated per-client state, and cost counters. Invocations for
//! distinct clients own disjoint rng streams, so they may run in parallel.

use serde::{Deserialize, Serialize};

use crate::datahub::{ClientDataset, LabeledDataset};
use crate::models::{self, ModelSpec};
use crate::numkit::{ParamVector, RngStream};
use crate::{Error, Result};

/// The per-client optimization rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    FedAvg,
    FedProx,
    Scaffold,
    FedAcg,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::Scaffold => "scaffold",
            Algorithm::FedAcg => "fedacg",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedprox" => Ok(Algorithm::FedProx),
            "scaffold" => Ok(Algorithm::Scaffold),
            "fedacg" => Ok(Algorithm::FedAcg),
            other => Err(Error::InvalidConfig(format!(
                "unknown algorithm `{other}` (expected fedavg, fedprox, scaffold, or fedacg)"
            ))),
        }
    }
}

/// Local-step hyperparameters. `epochs` is the number of local SGD steps
/// e_k; with `batch_size ≥ D_k` each step sweeps the whole local dataset.
#[derive(Debug, Clone)]
pub struct LocalHyper {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// FedProx proximal strength μ; gradient gains μ·(w − w_start).
    pub prox_mu: f64,
    /// FedACG anchor pull; gradient gains acg_beta·(w − anchor).
    pub acg_beta: f64,
    /// Distillation strength against `ServerSignals::distill_anchor`.
    pub kl_coefficient: f64,
}

impl LocalHyper {
    pub fn new(algorithm: Algorithm, eta: f64, epochs: usize, batch_size: usize) -> Self {
        Self {
            algorithm,
            eta,
            epochs,
            batch_size,
            prox_mu: 0.0,
            acg_beta: 0.0,
            kl_coefficient: 0.0,
        }
    }
}

/// State a client carries across rounds within one session.
#[derive(Debug, Clone, Default)]
pub struct ClientState {
    /// SCAFFOLD control variate cᵢ; `None` reads as zero.
    pub control: Option<ParamVector>,
}

/// Algorithm inputs the server supplies alongside the start model. For
/// FedACG the start model itself is the accelerated anchor w̃.
#[derive(Debug, Clone, Copy, Default)]
pub struct ServerSignals<'a> {
    /// SCAFFOLD global control variate c. Required for that algorithm.
    pub scaffold_control: Option<&'a ParamVector>,
    /// Teacher model for the distillation penalty; applied only when both
    /// the anchor and a positive `kl_coefficient` are present.
    pub distill_anchor: Option<&'a ParamVector>,
}

/// What one local_train call consumed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LocalCost {
    /// Local steps executed (the e_k of the cost accounting).
    pub epochs_run: usize,
    /// Gradient evaluations, counting the distillation backprop separately.
    pub grad_evals: usize,
    pub samples_touched: usize,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ParamVector,
    pub state: ClientState,
    pub cost: LocalCost,
}

/// Draws the batch index lists (into the parent dataset) for `steps` local
/// steps: min(batch_size, D_k) distinct samples per step, re-drawn fresh
/// each step. A covering batch uses the client's indices in dataset order
/// and consumes no randomness.
pub fn sample_epoch_batches(
    client: &ClientDataset,
    batch_size: usize,
    steps: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>> {
    if client.is_empty() {
        return Err(Error::EmptyInput("client dataset"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let d_k = client.len();
    let b = if batch_size > d_k {
        log::warn!(
            "client {}: batch_size {} exceeds local dataset size {}; clamping",
            client.client_id,
            batch_size,
            d_k
        );
        d_k
    } else {
        batch_size
    };
    let mut batches = Vec::with_capacity(steps);
    for _ in 0..steps {
        if b == d_k {
            batches.push(client.indices.clone());
        } else {
            let mut chosen: Vec<usize> = rand::seq::index::sample(rng, d_k, b)
                .into_iter()
                .map(|i| client.indices[i])
                .collect();
            chosen.sort_unstable();
            batches.push(chosen);
        }
    }
    Ok(batches)
}

/// Runs one round of local training and returns the final model, the
/// updated client state, and cost counters.
pub fn local_train(
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    client: &ClientDataset,
    w_start: &ParamVector,
    signals: &ServerSignals,
    hyper: &LocalHyper,
    state: &ClientState,
    rng: &mut RngStream,
) -> Result<LocalOutcome> {
    let dim = spec.param_count();
    if w_start.dim() != dim {
        return Err(Error::InvalidConfig(format!(
            "start model has {} parameters, model expects {dim}",
            w_start.dim()
        )));
    }
    if !(hyper.eta > 0.0 && hyper.eta.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be positive and finite, got {}",
            hyper.eta
        )));
    }
    if hyper.epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be at least 1".into()));
    }

    // SCAFFOLD needs the server's control variate; a client without history
    // starts from a zero control.
    let scaffold = hyper.algorithm == Algorithm::Scaffold;
    let server_control = if scaffold {
        let c = signals.scaffold_control.ok_or(Error::MissingSignal {
            algorithm: "scaffold",
            what: "server control variate",
        })?;
        if c.dim() != dim {
            return Err(Error::InvalidConfig("control variate dimension mismatch".into()));
        }
        Some(c)
    } else {
        None
    };
    let client_control = if scaffold {
        match &state.control {
            Some(c) if c.dim() == dim => Some(c.clone()),
            Some(_) => {
                return Err(Error::InvalidConfig(
                    "client control variate dimension mismatch".into(),
                ))
            }
            None => Some(ParamVector::zeros(dim)),
        }
    } else {
        None
    };
    let distill = match signals.distill_anchor {
        Some(anchor) if hyper.kl_coefficient > 0.0 => {
            if anchor.dim() != dim {
                return Err(Error::InvalidConfig("distillation anchor dimension mismatch".into()));
            }
            Some(anchor)
        }
        _ => None,
    };

    let batches = sample_epoch_batches(client, hyper.batch_size, hyper.epochs, rng)?;
    let mut w = w_start.clone();
    let mut cost = LocalCost::default();
    for indices in &batches {
        let batch = dataset.batch(indices);
        let mut g = models::grad(spec, &w, &batch);
        cost.grad_evals += 1;
        // Zero-strength penalties are skipped outright so the arithmetic is
        // bit-for-bit the plain FedAvg path.
        match hyper.algorithm {
            Algorithm::FedAvg => {}
            Algorithm::FedProx if hyper.prox_mu != 0.0 => {
                g.axpy(hyper.prox_mu, &w.sub(w_start));
            }
            Algorithm::Scaffold => {
                g.axpy(-1.0, client_control.as_ref().expect("scaffold state"));
                g.axpy(1.0, server_control.expect("scaffold signal"));
            }
            Algorithm::FedAcg if hyper.acg_beta != 0.0 => {
                g.axpy(hyper.acg_beta, &w.sub(w_start));
            }
            Algorithm::FedProx | Algorithm::FedAcg => {}
        }
        if let Some(anchor) = distill {
            g.axpy(
                hyper.kl_coefficient,
                &models::distill_kl_grad(spec, &w, anchor, &batch),
            );
            cost.grad_evals += 1;
        }
        w.axpy(-hyper.eta, &g);
        cost.epochs_run += 1;
        cost.samples_touched += batch.len();
    }

    let new_state = if scaffold {
        // Option-II control update: cᵢ′ = cᵢ − c + (w_start − w_final)/(e·η).
        let mut next = client_control.expect("scaffold state");
        next.axpy(-1.0, server_control.expect("scaffold signal"));
        next.axpy(
            1.0 / (hyper.epochs as f64 * hyper.eta),
            &w_start.sub(&w),
        );
        ClientState { control: Some(next) }
    } else {
        state.clone()
    };

    Ok(LocalOutcome {
        params: w,
        state: new_state,
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::gen_gaussian_mixture;
    use crate::numkit::{derive_stream, roles, StreamPath};

    fn stream(seed: u64, tag: u64) -> RngStream {
        derive_stream(seed, StreamPath::new(0, tag, roles::DATASET))
    }

    fn setup(per_class: usize) -> (ModelSpec, LabeledDataset, ClientDataset) {
        let data = gen_gaussian_mixture(3, per_class, 2, 0.4, &mut stream(40, 0));
        let spec = ModelSpec::softmax_linear(2, 3);
        let client = ClientDataset {
            client_id: 0,
            session: 0,
            indices: (0..data.len()).collect(),
        };
        (spec, data, client)
    }

    #[test]
    fn covering_batches_enumerate_the_client_in_order() {
        let (_, _, client) = setup(4);
        let batches = sample_epoch_batches(&client, 12, 3, &mut stream(41, 0)).unwrap();
        assert_eq!(batches.len(), 3);
        for b in &batches {
            assert_eq!(*b, client.indices);
        }
        // Oversized requests clamp to the full dataset.
        let clamped = sample_epoch_batches(&client, 500, 2, &mut stream(41, 1)).unwrap();
        assert_eq!(clamped[0], client.indices);
    }

    #[test]
    fn partial_batches_are_distinct_and_reproducible() {
        let (_, _, client) = setup(10);
        let a = sample_epoch_batches(&client, 7, 5, &mut stream(42, 0)).unwrap();
        let b = sample_epoch_batches(&client, 7, 5, &mut stream(42, 0)).unwrap();
        assert_eq!(a, b);
        for batch in &a {
            assert_eq!(batch.len(), 7);
            let mut sorted = batch.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), 7, "repeated index within a step");
        }
        // Across steps the draws differ (30 samples, astronomically unlikely
        // to coincide).
        assert!(a.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn single_full_batch_step_is_exact_gradient_descent() {
        let (spec, data, client) = setup(4);
        let mut rng = stream(43, 0);
        let w0 = models::init_params(&spec, &mut rng);
        let hyper = LocalHyper::new(Algorithm::FedAvg, 0.3, 1, client.len());
        let out = local_train(
            &spec,
            &data,
            &client,
            &w0,
            &ServerSignals::default(),
            &hyper,
            &ClientState::default(),
            &mut stream(43, 1),
        )
        .unwrap();
        let full = data.batch(&client.indices);
        let mut expected = w0.clone();
        expected.axpy(-0.3, &models::grad(&spec, &w0, &full));
        for (a, b) in out.params.values().iter().zip(expected.values()) {
            assert!((a - b).abs() <= 1e-15, "coordinate drift {a} vs {b}");
        }
        assert_eq!(out.cost.epochs_run, 1);
        assert_eq!(out.cost.grad_evals, 1);
        assert_eq!(out.cost.samples_touched, client.len());
    }

    #[test]
    fn vanishing_penalties_reduce_to_fedavg_exactly() {
        let (spec, data, client) = setup(6);
        let w0 = models::init_params(&spec, &mut stream(44, 0));
        let run = |algorithm: Algorithm| {
            let mut hyper = LocalHyper::new(algorithm, 0.1, 5, 8);
            hyper.prox_mu = 0.0;
            hyper.acg_beta = 0.0;
            local_train(
                &spec,
                &data,
                &client,
                &w0,
                &ServerSignals::default(),
                &hyper,
                &ClientState::default(),
                &mut stream(44, 1),
            )
            .unwrap()
            .params
        };
        let fedavg = run(Algorithm::FedAvg);
        assert_eq!(fedavg.values(), run(Algorithm::FedProx).values());
        assert_eq!(fedavg.values(), run(Algorithm::FedAcg).values());
    }

    #[test]
    fn zero_controls_make_scaffold_match_fedavg() {
        let (spec, data, client) = setup(6);
        let w0 = models::init_params(&spec, &mut stream(45, 0));
        let hyper = LocalHyper::new(Algorithm::FedAvg, 0.2, 4, 6);
        let fedavg = local_train(
            &spec,
            &data,
            &client,
            &w0,
            &ServerSignals::default(),
            &hyper,
            &ClientState::default(),
            &mut stream(45, 1),
        )
        .unwrap();
        let zero = ParamVector::zeros(spec.param_count());
        let mut hyper_sc = hyper.clone();
        hyper_sc.algorithm = Algorithm::Scaffold;
        let scaffold = local_train(
            &spec,
            &data,
            &client,
            &w0,
            &ServerSignals {
                scaffold_control: Some(&zero),
                distill_anchor: None,
            },
            &hyper_sc,
            &ClientState::default(),
            &mut stream(45, 1),
        )
        .unwrap();
        assert_eq!(fedavg.params.values(), scaffold.params.values());
        // The control update equals the mean displacement per step.
        let control = scaffold.state.control.unwrap();
        let mut expected = w0.sub(&scaffold.params);
        expected.scale(1.0 / (4.0 * 0.2));
        for (a, b) in control.values().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scaffold_requires_the_server_control() {
        let (spec, data, client) = setup(4);
        let w0 = models::init_params(&spec, &mut stream(46, 0));
        let hyper = LocalHyper::new(Algorithm::Scaffold, 0.2, 2, 4);
        let err = local_train(
            &spec,
            &data,
            &client,
            &w0,
            &ServerSignals::default(),
            &hyper,
            &ClientState::default(),
            &mut stream(46, 1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingSignal { algorithm: "scaffold", .. }));
    }

    #[test]
    fn distillation_pulls_toward_the_anchor_predictions() {
        let (spec, data, client) = setup(6);
        let w0 = models::init_params(&spec, &mut stream(47, 0));
        let mut anchor = models::init_params(&spec, &mut stream(47, 1));
        anchor.scale(4.0); // confident teacher away from the init
        let full = data.batch(&client.indices);

        let mut plain = LocalHyper::new(Algorithm::FedAvg, 0.1, 10, client.len());
        plain.kl_coefficient = 0.0;
        let mut distilled = plain.clone();
        distilled.kl_coefficient = 2.0;

        let run = |hyper: &LocalHyper| {
            local_train(
                &spec,
                &data,
                &client,
                &w0,
                &ServerSignals {
                    scaffold_control: None,
                    distill_anchor: Some(&anchor),
                },
                hyper,
                &ClientState::default(),
                &mut stream(47, 2),
            )
            .unwrap()
        };
        let base = run(&plain);
        let pulled = run(&distilled);
        let kl_base = models::distill_kl(&spec, &base.params, &anchor, &full);
        let kl_pulled = models::distill_kl(&spec, &pulled.params, &anchor, &full);
        assert!(
            kl_pulled < kl_base,
            "distillation should reduce anchor KL ({kl_pulled} vs {kl_base})"
        );
        // The distillation backprop is counted as its own gradient pass.
        assert_eq!(base.cost.grad_evals, 10);
        assert_eq!(pulled.cost.grad_evals, 20);
    }

    #[test]
    fn cost_counters_track_steps_and_samples() {
        let (spec, data, client) = setup(5); // 15 samples
        let w0 = models::init_params(&spec, &mut stream(48, 0));
        let hyper = LocalHyper::new(Algorithm::FedAvg, 0.05, 7, 4);
        let out = local_train(
            &spec,
            &data,
            &client,
            &w0,
            &ServerSignals::default(),
            &hyper,
            &ClientState::default(),
            &mut stream(48, 1),
        )
        .unwrap();
        assert_eq!(out.cost.epochs_run, 7);
        assert_eq!(out.cost.grad_evals, 7);
        assert_eq!(out.cost.samples_touched, 28);
    }
}
