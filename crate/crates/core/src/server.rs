//! Server orchestration: the session/round loop, aggregation, the pilot
//! model, per-session gradient signatures, similarity-weighted warm starts,
//! baseline initializations, and the two artifact stores.
//!
//! A run walks sessions in order. During the pilot phase the model simply
//! carries over between sessions. From the first post-pilot session on, the
//! warm-start variants measure the new session by training briefly from the
//! pilot, compare that movement against earlier sessions' movements, and
//! blend the corresponding saved models into the session's initial model.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datahub::{
    partition_dirichlet, partition_named, ClientDataset, LabeledDataset, PartitionScheme,
    SessionSchedule,
};
use crate::diagnostics::{self, BoundClientRound, BoundLog, BoundRound};
use crate::localtrain::{local_train, Algorithm, ClientState, LocalHyper, ServerSignals};
use crate::models::{self, Batch, ModelSpec};
use crate::numkit::{derive_stream, roles, ParamVector, RngStream, StreamPath};
use crate::{Error, Result};

/// Round ids for the gradient-computation rounds live above any real
/// round-in-session index, so their rng streams never collide with training.
const GRAD_ROUND_BASE: u64 = 1 << 32;

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct WeightedUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub weight: f64,
}

/// Weighted mean of client models, Σ D_k·w_k / Σ D_k. Accumulation runs in
/// client-id order, so the result is independent of the caller's ordering.
pub fn aggregate(updates: &[WeightedUpdate]) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::EmptyInput("aggregate needs at least one update"));
    }
    if updates.len() == 1 {
        return Ok(updates[0].params.clone());
    }
    let dim = updates[0].params.dim();
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    for pair in order.windows(2) {
        if updates[pair[0]].client_id == updates[pair[1]].client_id {
            return Err(Error::InvalidConfig(format!(
                "duplicate update from client {}",
                updates[pair[0]].client_id
            )));
        }
    }
    let mut sum = ParamVector::zeros(dim);
    let mut total = 0.0;
    for &i in &order {
        let u = &updates[i];
        if u.params.dim() != dim {
            return Err(Error::InvalidConfig("update dimension mismatch".into()));
        }
        if !(u.weight > 0.0 && u.weight.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "client {} has non-positive weight {}",
                u.client_id, u.weight
            )));
        }
        sum.axpy(u.weight, &u.params);
        total += u.weight;
    }
    sum.scale(1.0 / total);
    Ok(sum)
}

/// Arithmetic mean of the pilot-phase final models.
pub fn compute_pilot(models: &[ParamVector]) -> Result<ParamVector> {
    ParamVector::mean(models)
}

/// Softmax weights over distances: αⱼ ∝ exp(−R·dⱼ), computed with the max
/// exponent shifted to zero. R = 0 yields uniform weights; large R
/// concentrates all weight on the nearest entry.
pub fn similarity_weights(distances: &[f64], r: f64) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::EmptyInput("similarity weights need distances"));
    }
    if !(r >= 0.0 && r.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "similarity scale must be non-negative and finite, got {r}"
        )));
    }
    if distances.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::InvalidConfig("distances must be non-negative".into()));
    }
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = distances.iter().map(|d| (-r * (d - min)).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / total).collect())
}

/// Saved artifacts: Q₁ holds end-of-session models, Q₂ holds per-session
/// gradient signatures, and the pilot is formed once from the first P
/// entries of Q₁ (which are deleted in the process).
#[derive(Debug, Clone, Default)]
pub struct ArtifactStore {
    q1: Vec<(usize, ParamVector)>,
    q2: Vec<(usize, ParamVector)>,
    pilot: Option<ParamVector>,
}

impl ArtifactStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pilot(&self) -> Option<&ParamVector> {
        self.pilot.as_ref()
    }

    /// Saved (session, end-of-session model) pairs; post-pilot only once the
    /// pilot has been formed.
    pub fn q1(&self) -> &[(usize, ParamVector)] {
        &self.q1
    }

    /// Saved (session, gradient signature) pairs.
    pub fn q2(&self) -> &[(usize, ParamVector)] {
        &self.q2
    }

    pub fn stored_vectors(&self) -> usize {
        self.q1.len() + self.q2.len()
    }

    pub fn record_last_model(&mut self, session: usize, model: ParamVector) {
        self.q1.push((session, model));
    }

    pub fn record_session_gradient(&mut self, session: usize, gradient: ParamVector) {
        self.q2.push((session, gradient));
    }

    /// Once Q₁ holds exactly `pilot_sessions` models and no pilot exists yet,
    /// averages them into the pilot and deletes them. Returns whether the
    /// pilot was formed by this call.
    pub fn try_form_pilot(&mut self, pilot_sessions: usize) -> Result<bool> {
        if self.pilot.is_some() || self.q1.len() != pilot_sessions {
            return Ok(false);
        }
        let models: Vec<ParamVector> = self.q1.drain(..).map(|(_, m)| m).collect();
        self.pilot = Some(compute_pilot(&models)?);
        Ok(true)
    }

    /// Writes the store as one flat little-endian f64 binary file per vector
    /// plus a JSON manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let dim = self
            .q1
            .iter()
            .chain(self.q2.iter())
            .map(|(_, v)| v.dim())
            .next()
            .or(self.pilot.as_ref().map(|p| p.dim()))
            .unwrap_or(0);
        let write_vec = |name: &str, v: &ParamVector| -> Result<()> {
            let mut bytes = Vec::with_capacity(v.dim() * 8);
            for x in v.values() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            std::fs::write(dir.join(name), bytes)?;
            Ok(())
        };
        let mut manifest = serde_json::Map::new();
        manifest.insert("schema".into(), 1.into());
        manifest.insert("dim".into(), dim.into());
        let mut q1_entries = Vec::new();
        for (session, v) in &self.q1 {
            let file = format!("q1_s{session}.bin");
            write_vec(&file, v)?;
            q1_entries.push(serde_json::json!({ "session": session, "file": file }));
        }
        manifest.insert("q1".into(), q1_entries.into());
        let mut q2_entries = Vec::new();
        for (session, v) in &self.q2 {
            let file = format!("q2_s{session}.bin");
            write_vec(&file, v)?;
            q2_entries.push(serde_json::json!({ "session": session, "file": file }));
        }
        manifest.insert("q2".into(), q2_entries.into());
        match &self.pilot {
            Some(p) => {
                write_vec("pilot.bin", p)?;
                manifest.insert("pilot".into(), "pilot.bin".into());
            }
            None => {
                manifest.insert("pilot".into(), serde_json::Value::Null);
            }
        }
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(manifest))?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.get("schema").and_then(|v| v.as_u64()) != Some(1) {
            return Err(Error::CorruptCheckpoint("unknown manifest schema".into()));
        }
        let dim = manifest
            .get("dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CorruptCheckpoint("manifest missing dim".into()))?
            as usize;
        let read_vec = |file: &str| -> Result<ParamVector> {
            let bytes = std::fs::read(dir.join(file))?;
            if bytes.len() != dim * 8 {
                return Err(Error::CorruptCheckpoint(format!(
                    "{file}: expected {} bytes for {dim} parameters, found {}",
                    dim * 8,
                    bytes.len()
                )));
            }
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect::<Vec<f64>>();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptCheckpoint(format!("{file}: non-finite value")));
            }
            Ok(ParamVector::new(values))
        };
        let read_list = |key: &str| -> Result<Vec<(usize, ParamVector)>> {
            let mut out = Vec::new();
            let entries = manifest
                .get(key)
                .and_then(|v| v.as_array())
                .ok_or_else(|| Error::CorruptCheckpoint(format!("manifest missing {key}")))?;
            for entry in entries {
                let session = entry
                    .get("session")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("{key} entry missing session")))?;
                let file = entry
                    .get("file")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("{key} entry missing file")))?;
                out.push((session as usize, read_vec(file)?));
            }
            Ok(out)
        };
        let pilot = match manifest.get("pilot") {
            Some(serde_json::Value::String(file)) => Some(read_vec(file)?),
            Some(serde_json::Value::Null) | None => None,
            Some(_) => return Err(Error::CorruptCheckpoint("pilot entry must be a file name".into())),
        };
        Ok(Self {
            q1: read_list("q1")?,
            q2: read_list("q2")?,
            pilot,
        })
    }
}

/// Blends the saved end-of-session models, weighting each saved session by
/// how close its gradient signature lies to the current session's.
pub fn construct_initial_model(
    store: &ArtifactStore,
    current_gradient: &ParamVector,
    similarity_scale: f64,
) -> Result<ParamVector> {
    if store.q1.is_empty() {
        return Err(Error::UnavailableHistory(
            "no saved post-pilot sessions to blend; start from the pilot instead",
        ));
    }
    let mut members = Vec::with_capacity(store.q1.len());
    for (session, last_model) in &store.q1 {
        let gradient = store
            .q2
            .iter()
            .find(|(s, _)| s == session)
            .map(|(_, g)| g)
            .ok_or(Error::UnavailableHistory(
                "saved session lacks a gradient signature",
            ))?;
        members.push((last_model, current_gradient.distance(gradient)));
    }
    let distances: Vec<f64> = members.iter().map(|(_, d)| *d).collect();
    let weights = similarity_weights(&distances, similarity_scale)?;
    let mut init = ParamVector::zeros(current_gradient.dim());
    for ((model, _), alpha) in members.iter().zip(&weights) {
        init.axpy(*alpha, model);
    }
    Ok(init)
}

/// Baseline initialization rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// The preceding session's final model.
    Previous,
    /// Unweighted mean of the saved post-pilot models (the pilot itself
    /// before any are saved).
    Average,
    /// The pilot model.
    Pilot,
    /// A fresh random initialization.
    Random,
}

pub fn baseline_init(
    kind: BaselineKind,
    store: &ArtifactStore,
    previous_last: Option<&ParamVector>,
    spec: &ModelSpec,
    rng: &mut RngStream,
) -> Result<ParamVector> {
    match kind {
        BaselineKind::Previous => previous_last.cloned().ok_or(Error::UnavailableHistory(
            "previous-session model requested before any session finished",
        )),
        BaselineKind::Average => {
            if store.q1.is_empty() {
                store.pilot.clone().ok_or(Error::UnavailableHistory(
                    "average init requested before any model was saved",
                ))
            } else {
                let models: Vec<ParamVector> =
                    store.q1.iter().map(|(_, m)| m.clone()).collect();
                ParamVector::mean(&models)
            }
        }
        BaselineKind::Pilot => store.pilot.clone().ok_or(Error::UnavailableHistory(
            "pilot requested before being formed",
        )),
        BaselineKind::Random => Ok(models::init_params(spec, rng)),
    }
}

/// Initialization policy compared in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Similarity-weighted warm start.
    Proposed,
    /// Continue from the previous session's final model.
    Previous,
    /// Unweighted mean of saved models.
    Average,
    /// Continue from the previous model with a distillation pull toward it.
    Continuous,
    /// Warm start whose gradient signatures are measured from a fixed random
    /// model instead of the pilot.
    RandomPilot,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::Previous => "previous",
            Variant::Average => "average",
            Variant::Continuous => "continuous",
            Variant::RandomPilot => "random_pilot",
        }
    }

    /// Whether this variant runs the per-session gradient-computation rounds
    /// and stores gradient signatures.
    pub fn runs_gradient_rounds(self) -> bool {
        matches!(self, Variant::Proposed | Variant::RandomPilot)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Variant::Proposed),
            "previous" => Ok(Variant::Previous),
            "average" => Ok(Variant::Average),
            "continuous" => Ok(Variant::Continuous),
            "random_pilot" => Ok(Variant::RandomPilot),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant `{other}` (expected proposed, previous, average, continuous, or random_pilot)"
            ))),
        }
    }
}

/// Local step counts, uniform or per client id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EpochPlan {
    Uniform(usize),
    PerClient(Vec<usize>),
}

impl EpochPlan {
    pub fn for_client(&self, client_id: usize) -> usize {
        match self {
            EpochPlan::Uniform(e) => *e,
            EpochPlan::PerClient(list) => list[client_id],
        }
    }

    pub fn min_max(&self, num_clients: usize) -> (usize, usize) {
        let values: Vec<usize> = (0..num_clients).map(|c| self.for_client(c)).collect();
        (
            values.iter().copied().min().unwrap_or(1),
            values.iter().copied().max().unwrap_or(1),
        )
    }
}

/// Polynomial learning-rate decay over the rounds of one session; the
/// schedule restarts at every session boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyDecay {
    pub base_lr: f64,
    pub end_lr: f64,
    pub power: f64,
}

impl PolyDecay {
    pub fn eta_at(&self, round_in_session: usize, rounds_per_session: usize) -> f64 {
        let frac = round_in_session as f64 / rounds_per_session as f64;
        self.end_lr + (self.base_lr - self.end_lr) * (1.0 - frac).powf(self.power)
    }
}

/// Everything a run needs beyond the dataset and schedule.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub algorithm: Algorithm,
    pub variant: Variant,
    pub eta: f64,
    pub lr_schedule: Option<PolyDecay>,
    pub epochs: EpochPlan,
    pub batch_size: usize,
    /// Gradient-computation rounds per post-pilot session (V).
    pub grad_rounds: usize,
    pub grad_epochs: usize,
    pub grad_batch_size: usize,
    /// Similarity sensitivity R.
    pub similarity_scale: f64,
    pub prox_mu: f64,
    pub acg_beta: f64,
    pub acg_lambda: f64,
    pub kl_coefficient: f64,
    pub participation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    /// Probe pairs per client for the per-round data-variability estimate;
    /// 0 skips the estimate (bound reports then carry Θ = 0).
    pub theta_pairs: usize,
}

impl RunConfig {
    /// Sensible defaults around a model and seed; callers override fields.
    pub fn new(model: ModelSpec, algorithm: Algorithm, variant: Variant, seed: u64) -> Self {
        Self {
            model,
            algorithm,
            variant,
            eta: 0.1,
            lr_schedule: None,
            epochs: EpochPlan::Uniform(1),
            batch_size: 32,
            grad_rounds: 1,
            grad_epochs: 1,
            grad_batch_size: 32,
            similarity_scale: 10.0,
            prox_mu: 0.0,
            acg_beta: 0.0,
            acg_lambda: 0.0,
            kl_coefficient: 0.0,
            participation_fraction: 1.0,
            test_fraction: 0.2,
            seed,
            theta_pairs: 8,
        }
    }

    fn validate(&self, dataset: &LabeledDataset, schedule: &SessionSchedule) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if schedule.num_sessions < schedule.pilot_sessions || schedule.pilot_sessions < 1 {
            return fail(format!(
                "schedule needs num_sessions ≥ pilot_sessions ≥ 1, got {} and {}",
                schedule.num_sessions, schedule.pilot_sessions
            ));
        }
        if schedule.sessions.len() != schedule.num_sessions {
            return fail("schedule session list length disagrees with num_sessions".into());
        }
        if self.model.input_dim != dataset.feature_dim() {
            return fail(format!(
                "model expects {} input features, dataset has {}",
                self.model.input_dim,
                dataset.feature_dim()
            ));
        }
        if self.model.num_classes != dataset.num_classes {
            return fail(format!(
                "model expects {} classes, dataset has {}",
                self.model.num_classes, dataset.num_classes
            ));
        }
        if self.lr_schedule.is_none() && !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.eta));
        }
        if let Some(p) = &self.lr_schedule {
            if !(p.base_lr > 0.0 && p.end_lr > 0.0 && p.end_lr <= p.base_lr && p.power >= 0.0) {
                return fail(format!(
                    "polynomial decay needs 0 < end_lr ≤ base_lr and power ≥ 0, got {p:?}"
                ));
            }
        }
        let num_clients = schedule.sessions[0].clients.len();
        if let EpochPlan::PerClient(list) = &self.epochs {
            if list.len() != num_clients {
                return fail(format!(
                    "per-client epoch list has {} entries for {} clients",
                    list.len(),
                    num_clients
                ));
            }
        }
        let (e_min, _) = self.epochs.min_max(num_clients);
        if e_min < 1 {
            return fail("every client needs at least one local step".into());
        }
        if self.batch_size < 1 || self.grad_batch_size < 1 {
            return fail("batch sizes must be at least 1".into());
        }
        if self.grad_rounds < 1 || self.grad_epochs < 1 {
            return fail("gradient-computation rounds and steps must be at least 1".into());
        }
        if !(self.similarity_scale >= 0.0 && self.similarity_scale.is_finite()) {
            return fail(format!(
                "similarity scale must be non-negative, got {}",
                self.similarity_scale
            ));
        }
        if self.prox_mu < 0.0 || self.acg_beta < 0.0 || self.kl_coefficient < 0.0 {
            return fail("penalty strengths must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.acg_lambda) {
            return fail(format!("acg_lambda must lie in [0, 1), got {}", self.acg_lambda));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return fail(format!(
                "participation fraction must lie in (0, 1], got {}",
                self.participation_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return fail(format!(
                "test fraction must lie in [0, 1), got {}",
                self.test_fraction
            ));
        }
        Ok(())
    }

    fn eta_for(&self, round_in_session: usize, rounds_per_session: usize) -> f64 {
        match &self.lr_schedule {
            None => self.eta,
            Some(p) => p.eta_at(round_in_session, rounds_per_session),
        }
    }
}

/// Which kind of round a metrics row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    GradCompute,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::GradCompute => "grad_compute",
        }
    }
}

/// One executed round. Model-dependent fields (loss, accuracy, gradient
/// norm) describe the model the server broadcast at the round's start; the
/// counters describe the work done during the round. `wall_ms` is pinned to
/// zero so logs are byte-identical across replays.
#[derive(Debug, Clone, Serialize)]
pub struct RoundMetrics {
    pub session: usize,
    pub round_in_session: usize,
    pub global_round: usize,
    pub phase: Phase,
    pub variant: Variant,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub grad_norm_sq: f64,
    pub eta: f64,
    pub comm_up: usize,
    pub comm_down: usize,
    pub epochs_this_round: usize,
    pub wall_ms: u64,
}

/// Counters accumulated over a whole run; field meanings match the
/// closed-form cost report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunCost {
    pub local_epochs_total: usize,
    pub client_uploads: usize,
    pub server_broadcasts: usize,
    pub stored_vectors: usize,
}

/// Everything a finished run hands back.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub variant: Variant,
    pub rows: Vec<RoundMetrics>,
    pub bound: BoundLog,
    pub cost: RunCost,
    /// The model entering round 0 of each session (after any warm start).
    pub session_inits: Vec<ParamVector>,
    pub final_model: ParamVector,
    pub store: ArtifactStore,
}

struct SessionRuntime<'a> {
    dataset: &'a LabeledDataset,
    config: &'a RunConfig,
    session: usize,
    clients: Vec<ClientDataset>,
    sigma_sq: Vec<f64>,
    train_batch: Batch,
    test_batch: Option<Batch>,
    client_states: Vec<ClientState>,
    server_control: ParamVector,
    momentum: ParamVector,
    distill_anchor: Option<ParamVector>,
}

struct RoundOutput {
    new_model: ParamVector,
    metrics: RoundMetrics,
    bound: BoundRound,
}

/// Rebuilds the train pool, held-out test pool, and client partition that a
/// run with this config uses for one session, so post-hoc analysis can see
/// exactly the data each client trained on.
pub fn session_split(
    dataset: &LabeledDataset,
    schedule: &SessionSchedule,
    config: &RunConfig,
    session: usize,
) -> Result<(Vec<usize>, Vec<usize>, Vec<ClientDataset>)> {
    let plan = &schedule.sessions[session];
    let pool = dataset.indices_with_labels(&plan.labels);
    if pool.is_empty() {
        return Err(Error::InfeasibleSchedule(format!(
            "session {session} has no samples for labels {:?}",
            plan.labels
        )));
    }
    let (train_pool, test_pool) = hold_out_test(
        dataset,
        &pool,
        config.test_fraction,
        &mut derive_stream(
            config.seed,
            StreamPath::new(session as u64, 0, roles::TEST_SPLIT),
        ),
    );
    let mut rng = derive_stream(
        config.seed,
        StreamPath::new(session as u64, 0, roles::PARTITION),
    );
    let num_clients = plan.clients.len();
    let clients = match plan.partition {
        PartitionScheme::Dirichlet { alpha } => {
            partition_dirichlet(dataset, &train_pool, alpha, num_clients, session, &mut rng)?
        }
        scheme => partition_named(dataset, &train_pool, scheme, num_clients, session, &mut rng)?,
    };
    Ok((train_pool, test_pool, clients))
}

impl<'a> SessionRuntime<'a> {
    fn new(
        dataset: &'a LabeledDataset,
        config: &'a RunConfig,
        schedule: &SessionSchedule,
        session: usize,
    ) -> Result<Self> {
        let (train_pool, test_pool, clients) = session_split(dataset, schedule, config, session)?;
        let sigma_sq = clients
            .iter()
            .map(|c| diagnostics::sigma_tilde_sq(dataset, &c.indices))
            .collect();
        let dim = config.model.param_count();
        Ok(Self {
            dataset,
            config,
            session,
            train_batch: dataset.batch(&train_pool),
            test_batch: if test_pool.is_empty() {
                None
            } else {
                Some(dataset.batch(&test_pool))
            },
            client_states: vec![ClientState::default(); clients.len()],
            server_control: ParamVector::zeros(dim),
            momentum: ParamVector::zeros(dim),
            distill_anchor: None,
            clients,
            sigma_sq,
        })
    }

    fn reset_optimizer_state(&mut self) {
        let dim = self.config.model.param_count();
        for state in &mut self.client_states {
            *state = ClientState::default();
        }
        self.server_control = ParamVector::zeros(dim);
        self.momentum = ParamVector::zeros(dim);
    }

    fn participants(&self, round_id: u64) -> Vec<usize> {
        let k = self.clients.len();
        let frac = self.config.participation_fraction;
        if frac >= 1.0 {
            return (0..k).collect();
        }
        let m = ((frac * k as f64).round() as usize).clamp(1, k);
        let mut rng = derive_stream(
            self.config.seed,
            StreamPath::new(self.session as u64, round_id, roles::PARTICIPATION),
        );
        let mut chosen = rand::seq::index::sample(&mut rng, k, m).into_vec();
        chosen.sort_unstable();
        chosen
    }

    fn run_round(
        &mut self,
        w: &ParamVector,
        round_id: u64,
        round_label: usize,
        global_round: usize,
        eta: f64,
        phase: Phase,
    ) -> Result<RoundOutput> {
        let config = self.config;
        let spec = &config.model;
        let grad_phase = phase == Phase::GradCompute;

        // FedACG broadcasts a momentum-shifted anchor; everyone else
        // broadcasts the model itself.
        let broadcast = if config.algorithm == Algorithm::FedAcg && config.acg_lambda != 0.0 {
            let mut anchor = w.clone();
            anchor.axpy(config.acg_lambda, &self.momentum);
            anchor
        } else {
            w.clone()
        };

        let participants = self.participants(round_id);
        let train_loss = models::loss(spec, &broadcast, &self.train_batch);
        let grad_norm_sq = models::grad(spec, &broadcast, &self.train_batch).norm_sq();
        let eval_batch = self.test_batch.as_ref().unwrap_or(&self.train_batch);
        let test_accuracy = models::accuracy(spec, &broadcast, eval_batch);

        let theta = if config.theta_pairs > 0 {
            let mut rng = derive_stream(
                config.seed,
                StreamPath::new(self.session as u64, round_id, roles::THETA),
            );
            let mut best: f64 = 0.0;
            for &pos in &participants {
                let client_batch = self.dataset.batch(&self.clients[pos].indices);
                if client_batch.len() < 2 {
                    continue;
                }
                if let Ok(t) =
                    diagnostics::estimate_theta(spec, &broadcast, &client_batch, config.theta_pairs, &mut rng)
                {
                    best = best.max(t);
                }
            }
            best
        } else {
            0.0
        };

        let epochs_of = |client_id: usize| -> usize {
            if grad_phase {
                config.grad_epochs
            } else {
                config.epochs.for_client(client_id)
            }
        };
        let batch_size = if grad_phase {
            config.grad_batch_size
        } else {
            config.batch_size
        };
        let scaffold = config.algorithm == Algorithm::Scaffold;
        let seed = config.seed;
        let session = self.session as u64;
        let states = &self.client_states;
        let clients = &self.clients;
        let dataset = self.dataset;
        let server_control = &self.server_control;
        let distill_anchor = self.distill_anchor.as_ref().filter(|_| !grad_phase);
        let outcomes: Vec<(usize, crate::localtrain::LocalOutcome)> = participants
            .par_iter()
            .map(|&pos| {
                let client = &clients[pos];
                let hyper = LocalHyper {
                    algorithm: config.algorithm,
                    eta,
                    epochs: epochs_of(client.client_id),
                    batch_size,
                    prox_mu: config.prox_mu,
                    acg_beta: config.acg_beta,
                    kl_coefficient: config.kl_coefficient,
                };
                let signals = ServerSignals {
                    scaffold_control: scaffold.then_some(server_control),
                    distill_anchor,
                };
                let mut rng = derive_stream(
                    seed,
                    StreamPath::new(session, round_id, client.client_id as u64),
                );
                local_train(spec, dataset, client, &broadcast, &signals, &hyper, &states[pos], &mut rng)
                    .map(|out| (pos, out))
            })
            .collect::<Result<Vec<_>>>()?;

        let updates: Vec<WeightedUpdate> = outcomes
            .iter()
            .map(|(pos, out)| WeightedUpdate {
                client_id: self.clients[*pos].client_id,
                params: out.params.clone(),
                weight: self.clients[*pos].len() as f64,
            })
            .collect();
        let aggregated = aggregate(&updates)?;

        let new_model = if config.algorithm == Algorithm::FedAcg {
            let mut delta = aggregated.clone();
            delta.axpy(-1.0, &broadcast);
            self.momentum.scale(config.acg_lambda);
            self.momentum.axpy(1.0, &delta);
            aggregated
        } else {
            aggregated
        };

        if scaffold {
            // c ← c + Σ(cᵢ′ − cᵢ)/K over participants, K the session size.
            let k_total = self.clients.len() as f64;
            let mut shift = ParamVector::zeros(spec.param_count());
            for (pos, out) in &outcomes {
                let new_control = out.state.control.as_ref().expect("scaffold returns control");
                shift.axpy(1.0 / k_total, new_control);
                if let Some(old) = &self.client_states[*pos].control {
                    shift.axpy(-1.0 / k_total, old);
                }
            }
            self.server_control.axpy(1.0, &shift);
        }
        let mut epochs_this_round = 0;
        for (pos, out) in outcomes {
            epochs_this_round += out.cost.epochs_run;
            self.client_states[pos] = out.state;
        }

        let bound_clients = participants
            .iter()
            .map(|&pos| {
                let d_k = self.clients[pos].len();
                BoundClientRound {
                    epochs: epochs_of(self.clients[pos].client_id),
                    batch: batch_size.min(d_k),
                    data: d_k,
                    sigma_tilde_sq: self.sigma_sq[pos],
                }
            })
            .collect();
        let loss_end = models::loss(spec, &new_model, &self.train_batch);

        Ok(RoundOutput {
            metrics: RoundMetrics {
                session: self.session,
                round_in_session: round_label,
                global_round,
                phase,
                variant: config.variant,
                train_loss,
                test_accuracy,
                grad_norm_sq,
                eta,
                comm_up: participants.len(),
                comm_down: 1,
                epochs_this_round,
                wall_ms: 0,
            },
            bound: BoundRound {
                session: self.session,
                round_in_session: round_label,
                loss_start: train_loss,
                loss_end,
                grad_norm_sq,
                eta,
                theta,
                clients: bound_clients,
            },
            new_model,
        })
    }
}

/// Splits a session pool into train and held-out test indices, stratified by
/// label. Both halves come back sorted.
fn hold_out_test(
    dataset: &LabeledDataset,
    pool: &[usize],
    test_fraction: f64,
    rng: &mut RngStream,
) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut train = Vec::with_capacity(pool.len());
    let mut test = Vec::new();
    if test_fraction <= 0.0 {
        return (pool.to_vec(), test);
    }
    let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in pool {
        by_label.entry(dataset.label(i)).or_default().push(i);
    }
    for (_, mut indices) in by_label {
        indices.shuffle(rng);
        let n_test = ((test_fraction * indices.len() as f64).round() as usize)
            .min(indices.len().saturating_sub(1));
        test.extend_from_slice(&indices[..n_test]);
        train.extend_from_slice(&indices[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Runs the full schedule under `config` and returns every log the
/// diagnostics and reporting layers need.
pub fn run_training(
    dataset: &LabeledDataset,
    schedule: &SessionSchedule,
    config: &RunConfig,
) -> Result<RunLog> {
    config.validate(dataset, schedule)?;
    let spec = &config.model;
    let pilot_sessions = schedule.pilot_sessions;
    let t_rounds = schedule.rounds_per_session;

    let mut store = ArtifactStore::new();
    let mut w = models::init_params(
        spec,
        &mut derive_stream(config.seed, StreamPath::new(0, 0, roles::MODEL_INIT)),
    );
    let mut rows: Vec<RoundMetrics> = Vec::new();
    let mut bound = BoundLog::default();
    let mut cost = RunCost::default();
    let mut session_inits = Vec::with_capacity(schedule.num_sessions);
    let mut random_anchor: Option<ParamVector> = None;

    for plan in &schedule.sessions {
        let s = plan.index;
        let mut runtime = SessionRuntime::new(dataset, config, schedule, s)?;

        if s >= pilot_sessions {
            if config.variant.runs_gradient_rounds() {
                let anchor = match config.variant {
                    Variant::RandomPilot => random_anchor
                        .clone()
                        .expect("random anchor drawn at pilot formation"),
                    _ => store
                        .pilot()
                        .expect("pilot formed at the end of the pilot phase")
                        .clone(),
                };
                // Brief training from the anchor; the movement, not the
                // resulting model, is what gets kept.
                let mut probe_model = anchor.clone();
                let eta0 = config.eta_for(0, t_rounds);
                for v in 0..config.grad_rounds {
                    let out = runtime.run_round(
                        &probe_model,
                        GRAD_ROUND_BASE + v as u64,
                        v,
                        s * t_rounds,
                        eta0,
                        Phase::GradCompute,
                    )?;
                    probe_model = out.new_model;
                    cost.local_epochs_total += out.metrics.epochs_this_round;
                    cost.client_uploads += out.metrics.comm_up;
                    cost.server_broadcasts += out.metrics.comm_down;
                    rows.push(out.metrics);
                }
                runtime.reset_optimizer_state();
                let session_gradient = probe_model.sub(&anchor);
                store.record_session_gradient(s, session_gradient.clone());
                w = if s > pilot_sessions {
                    construct_initial_model(&store, &session_gradient, config.similarity_scale)?
                } else {
                    store.pilot().expect("pilot exists").clone()
                };
            } else {
                w = match config.variant {
                    Variant::Previous | Variant::Continuous => w,
                    Variant::Average => baseline_init(
                        BaselineKind::Average,
                        &store,
                        Some(&w),
                        spec,
                        &mut derive_stream(
                            config.seed,
                            StreamPath::new(s as u64, 0, roles::MODEL_INIT),
                        ),
                    )?,
                    Variant::Proposed | Variant::RandomPilot => unreachable!(),
                };
                if config.variant == Variant::Continuous {
                    runtime.distill_anchor = Some(w.clone());
                }
            }
        }

        session_inits.push(w.clone());
        for t in 0..t_rounds {
            let eta = config.eta_for(t, t_rounds);
            let out = runtime.run_round(
                &w,
                t as u64,
                t,
                s * t_rounds + t,
                eta,
                Phase::Train,
            )?;
            w = out.new_model;
            cost.local_epochs_total += out.metrics.epochs_this_round;
            cost.client_uploads += out.metrics.comm_up;
            cost.server_broadcasts += out.metrics.comm_down;
            rows.push(out.metrics);
            bound.rounds.push(out.bound);
        }

        store.record_last_model(s, w.clone());
        if store.try_form_pilot(pilot_sessions)? && config.variant == Variant::RandomPilot {
            random_anchor = Some(models::init_params(
                spec,
                &mut derive_stream(
                    config.seed,
                    StreamPath::new(s as u64, 0, roles::RANDOM_PILOT),
                ),
            ));
        }
    }

    cost.stored_vectors = store.stored_vectors();
    Ok(RunLog {
        variant: config.variant,
        rows,
        bound,
        cost,
        session_inits,
        final_model: w,
        store,
    })
}
