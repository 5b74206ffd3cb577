//! Datasets, session schedules, and client partitions.
//!
//! A session is a span of rounds over a fixed label subset and client
//! population. The schedule fixes each session's label set (with a controlled
//! overlap between consecutive sessions, and optional verbatim reuse of an
//! earlier session's labels); partitions then split each session's sample pool
//! across clients, either by Dirichlet proportions or by one of the named
//! label-sharding schemes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::models::Batch;
use crate::numkit::RngStream;
use crate::{Error, Result};

/// An in-memory labeled dataset. Feature rows share one dimension; labels are
/// class indices below `num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub num_classes: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Self {
        assert_eq!(features.len(), labels.len(), "features/labels length mismatch");
        assert!(!features.is_empty(), "empty dataset");
        let dim = features[0].len();
        assert!(features.iter().all(|f| f.len() == dim), "ragged feature rows");
        assert!(labels.iter().all(|&y| y < num_classes), "label out of range");
        Self {
            name: name.into(),
            num_classes,
            features,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty datasets
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self, index: usize) -> &[f64] {
        &self.features[index]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    /// Indices (ascending) of all samples whose label is in `labels`.
    pub fn indices_with_labels(&self, labels: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| labels.contains(&self.labels[i]))
            .collect()
    }

    /// Materializes the rows at `indices` into a batch, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let features = indices.iter().map(|&i| self.features[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(features, labels)
    }

    /// Returns a copy with per-coordinate zero mean and unit variance
    /// (population normalization over the full dataset). Coordinates with
    /// near-zero variance are centered but not rescaled. Applied by the
    /// experiment pipeline at ingestion so heterogeneity constants stay on
    /// comparable scales across data sources.
    pub fn standardized(&self) -> Self {
        let d = self.feature_dim();
        let n = self.len() as f64;
        let mut mean = vec![0.0; d];
        for row in &self.features {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for row in &self.features {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        let features = self
            .features
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(&scale)
                    .map(|((x, m), s)| (x - m) / s)
                    .collect()
            })
            .collect();
        Self {
            name: self.name.clone(),
            num_classes: self.num_classes,
            features,
            labels: self.labels.clone(),
        }
    }

    /// Serializes to the `label,f0,f1,...` CSV format. Floats use shortest
    /// round-trip formatting, so `load` of the output reproduces this dataset
    /// exactly.
    pub fn to_csv_string(&self) -> String {
        let d = self.feature_dim();
        let mut out = String::from("label");
        for j in 0..d {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for (row, y) in self.features.iter().zip(&self.labels) {
            let _ = write!(out, "{y}");
            for x in row {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Parses the `label,f0,f1,...` format. Errors carry 1-based line numbers
/// (the header is line 1). The dataset's class count is max label + 1.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".to_string());
    let content = std::fs::read_to_string(path)?;
    parse_csv(&name, &content)
}

/// [`load_csv`] over an in-memory string.
pub fn parse_csv(name: &str, content: &str) -> Result<LabeledDataset> {
    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::CsvParse {
        line: 1,
        reason: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::CsvParse {
            line: 1,
            reason: format!("expected header `label,f0,f1,...`, got `{header}`"),
        });
    }
    for (j, col) in cols[1..].iter().enumerate() {
        let expected = format!("f{j}");
        if *col != expected {
            return Err(Error::CsvParse {
                line: 1,
                reason: format!("expected column `{expected}`, got `{col}`"),
            });
        }
    }
    let dim = cols.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::CsvParse {
                line: line_no,
                reason: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::CsvParse {
            line: line_no,
            reason: format!("invalid label `{}`", fields[0]),
        })?;
        let mut row = Vec::with_capacity(dim);
        for field in &fields[1..] {
            let v: f64 = field.parse().map_err(|_| Error::CsvParse {
                line: line_no,
                reason: format!("invalid number `{field}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvParse {
                    line: line_no,
                    reason: format!("non-finite feature `{field}`"),
                });
            }
            row.push(v);
        }
        features.push(row);
        labels.push(label);
    }
    if features.is_empty() {
        return Err(Error::EmptyInput("csv has no data rows"));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    Ok(LabeledDataset::new(name, num_classes, features, labels))
}

/// Synthetic mixture: class c's samples are isotropic Gaussians around a
/// class-specific center (on a circle of radius 2 in the first two feature
/// dimensions; equally spaced on a line when `input_dim == 1`).
pub fn gen_gaussian_mixture(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    spread: f64,
    rng: &mut RngStream,
) -> LabeledDataset {
    assert!(num_classes >= 2 && per_class >= 1 && input_dim >= 1);
    assert!(spread >= 0.0 && spread.is_finite());
    const RADIUS: f64 = 2.0;
    let mut features = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        let mut center = vec![0.0; input_dim];
        if input_dim == 1 {
            center[0] = RADIUS * (c as f64 - (num_classes as f64 - 1.0) / 2.0);
        } else {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
            center[0] = RADIUS * angle.cos();
            center[1] = RADIUS * angle.sin();
        }
        for _ in 0..per_class {
            let row = center
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + spread * z
                })
                .collect();
            features.push(row);
            labels.push(c);
        }
    }
    LabeledDataset::new("gaussian", num_classes, features, labels)
}

/// One client's slice of a session: indices into the parent dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub session: usize,
    pub indices: Vec<usize>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// How a session's sample pool is split across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Per-label Dirichlet(alpha) proportions across clients.
    Dirichlet { alpha: f64 },
    /// Every label is cut into equal shards; every client gets two shards of
    /// two different labels.
    TwoShard,
    /// Half the clients hold one half of the labels, the other half the rest.
    Half,
    /// Two label sets of `set_fraction` of the labels each, overlapping in
    /// `overlap_fraction` of the labels; one client half per set, overlap
    /// data split between the halves.
    PartialOverlap {
        set_fraction: f64,
        overlap_fraction: f64,
    },
    /// Each client holds a unique, disjoint label group.
    Distinct,
}

impl PartitionScheme {
    /// Partial overlap with the usual shape: 60% sets sharing 20% of labels.
    pub fn partial_overlap_default() -> Self {
        PartitionScheme::PartialOverlap {
            set_fraction: 0.6,
            overlap_fraction: 0.2,
        }
    }
}

/// Groups `pool` by label, ascending label order, ascending indices within.
fn pool_by_label(dataset: &LabeledDataset, pool: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        by_label.entry(dataset.label(i)).or_default().push(i);
    }
    by_label
}

/// Splits `n` into `parts` counts differing by at most one, larger counts first.
fn even_counts(n: usize, parts: usize) -> Vec<usize> {
    let base = n / parts;
    let rem = n % parts;
    (0..parts).map(|i| base + usize::from(i < rem)).collect()
}

fn finish_clients(mut assigned: Vec<Vec<usize>>, session: usize) -> Vec<ClientDataset> {
    for indices in &mut assigned {
        indices.sort_unstable();
    }
    assigned
        .into_iter()
        .enumerate()
        .map(|(client_id, indices)| ClientDataset {
            client_id,
            session,
            indices,
        })
        .collect()
}

/// Splits each label's samples across `num_clients` with Dirichlet(alpha)
/// proportions. Every client ends with at least one sample: as long as a
/// client is empty, one sample is moved from the currently largest client.
pub fn partition_dirichlet(
    dataset: &LabeledDataset,
    pool: &[usize],
    alpha: f64,
    num_clients: usize,
    session: usize,
    rng: &mut RngStream,
) -> Result<Vec<ClientDataset>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "dirichlet alpha must be positive and finite, got {alpha}"
        )));
    }
    if pool.len() < num_clients {
        return Err(Error::InfeasiblePartition(format!(
            "pool of {} samples cannot give {} clients one sample each",
            pool.len(),
            num_clients
        )));
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidConfig(format!("dirichlet alpha {alpha}: {e}")))?;
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (_, mut indices) in pool_by_label(dataset, pool) {
        indices.shuffle(rng);
        // Dirichlet draw via normalized Gammas; retry the (measure-zero,
        // but floating-point-possible) all-zero underflow case.
        let mut weights = vec![0.0; num_clients];
        for _ in 0..100 {
            for w in &mut weights {
                *w = gamma.sample(rng);
            }
            if weights.iter().sum::<f64>() > 0.0 {
                break;
            }
        }
        let total: f64 = weights.iter().sum();
        let proportions: Vec<f64> = if total > 0.0 {
            weights.iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / num_clients as f64; num_clients]
        };
        // Largest-remainder rounding of proportions to integer counts.
        let n = indices.len();
        let mut counts: Vec<usize> = proportions.iter().map(|p| (p * n as f64) as usize).collect();
        let leftover = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..num_clients).collect();
        order.sort_by(|&a, &b| {
            let fa = proportions[a] * n as f64 - counts[a] as f64;
            let fb = proportions[b] * n as f64 - counts[b] as f64;
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        // The floors lose less than one sample per client, so leftover < K.
        for &k in order.iter().take(leftover) {
            counts[k] += 1;
        }
        let mut cursor = 0;
        for (k, &count) in counts.iter().enumerate() {
            assigned[k].extend_from_slice(&indices[cursor..cursor + count]);
            cursor += count;
        }
    }
    // Repair: nobody may end up empty.
    loop {
        let Some(empty) = assigned.iter().position(|a| a.is_empty()) else {
            break;
        };
        let largest = (0..num_clients)
            .max_by_key(|&k| assigned[k].len())
            .expect("at least one client");
        let moved = assigned[largest].pop().expect("largest client nonempty");
        assigned[empty].push(moved);
    }
    Ok(finish_clients(assigned, session))
}

/// Label-sharding partitions. All schemes produce a true partition of `pool`
/// (disjoint, exhaustive, every client nonempty) or fail with the violated
/// constraint.
pub fn partition_named(
    dataset: &LabeledDataset,
    pool: &[usize],
    scheme: PartitionScheme,
    num_clients: usize,
    session: usize,
    rng: &mut RngStream,
) -> Result<Vec<ClientDataset>> {
    let by_label = pool_by_label(dataset, pool);
    let labels: Vec<usize> = by_label.keys().copied().collect();
    let num_labels = labels.len();
    let k = num_clients;
    if k == 0 {
        return Err(Error::InfeasiblePartition("zero clients".into()));
    }
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];

    // Distributes one label's samples evenly across a client group.
    let spread_label = |indices: &[usize], clients: &[usize], assigned: &mut Vec<Vec<usize>>| {
        let counts = even_counts(indices.len(), clients.len());
        let mut cursor = 0;
        for (&client, count) in clients.iter().zip(counts) {
            assigned[client].extend_from_slice(&indices[cursor..cursor + count]);
            cursor += count;
        }
    };

    match scheme {
        PartitionScheme::Dirichlet { alpha } => {
            return partition_dirichlet(dataset, pool, alpha, num_clients, session, rng);
        }
        PartitionScheme::Distinct => {
            if num_labels % k != 0 || num_labels < k {
                return Err(Error::InfeasiblePartition(format!(
                    "distinct needs the label count ({num_labels}) to be a positive multiple of the client count ({k})"
                )));
            }
            let per_client = num_labels / k;
            for (client, group) in labels.chunks(per_client).enumerate() {
                for label in group {
                    assigned[client].extend_from_slice(&by_label[label]);
                }
            }
        }
        PartitionScheme::Half => {
            if k % 2 != 0 {
                return Err(Error::InfeasiblePartition(format!(
                    "half needs an even client count, got {k}"
                )));
            }
            if num_labels < 2 {
                return Err(Error::InfeasiblePartition(
                    "half needs at least two labels".into(),
                ));
            }
            let first_labels = &labels[..num_labels.div_ceil(2)];
            let second_labels = &labels[num_labels.div_ceil(2)..];
            let first_clients: Vec<usize> = (0..k / 2).collect();
            let second_clients: Vec<usize> = (k / 2..k).collect();
            for label in first_labels {
                let mut indices = by_label[label].clone();
                indices.shuffle(rng);
                spread_label(&indices, &first_clients, &mut assigned);
            }
            for label in second_labels {
                let mut indices = by_label[label].clone();
                indices.shuffle(rng);
                spread_label(&indices, &second_clients, &mut assigned);
            }
        }
        PartitionScheme::PartialOverlap {
            set_fraction,
            overlap_fraction,
        } => {
            if k % 2 != 0 {
                return Err(Error::InfeasiblePartition(format!(
                    "partial_overlap needs an even client count, got {k}"
                )));
            }
            if !(0.0..=1.0).contains(&set_fraction) || !(0.0..=1.0).contains(&overlap_fraction) {
                return Err(Error::InfeasiblePartition(
                    "partial_overlap fractions must lie in [0, 1]".into(),
                ));
            }
            let n_set = (set_fraction * num_labels as f64).round() as usize;
            let n_shared = (overlap_fraction * num_labels as f64).round() as usize;
            // The two sets must cover every label exactly: sliding-window
            // construction set1 = labels[..n_set], set2 = labels[L−n_set..].
            if n_set == 0 || 2 * n_set < num_labels || 2 * n_set - n_shared != num_labels {
                return Err(Error::InfeasiblePartition(format!(
                    "partial_overlap needs 2·round(set_fraction·L) − round(overlap_fraction·L) = L; \
                     got sets of {n_set} and shared {n_shared} over {num_labels} labels"
                )));
            }
            let first_clients: Vec<usize> = (0..k / 2).collect();
            let second_clients: Vec<usize> = (k / 2..k).collect();
            let shared_start = num_labels - n_set;
            for (pos, label) in labels.iter().enumerate() {
                let mut indices = by_label[label].clone();
                indices.shuffle(rng);
                if pos < shared_start {
                    spread_label(&indices, &first_clients, &mut assigned);
                } else if pos >= n_set {
                    spread_label(&indices, &second_clients, &mut assigned);
                } else {
                    // Overlapping label: half the data to each client group.
                    let cut = indices.len() / 2;
                    spread_label(&indices[..cut], &first_clients, &mut assigned);
                    spread_label(&indices[cut..], &second_clients, &mut assigned);
                }
            }
        }
        PartitionScheme::TwoShard => {
            if num_labels < 2 {
                return Err(Error::InfeasiblePartition(
                    "two_shard needs at least two labels".into(),
                ));
            }
            let shards_per_label = (2 * k).div_ceil(num_labels).max(2);
            if num_labels * shards_per_label != 2 * k {
                return Err(Error::InfeasiblePartition(format!(
                    "two_shard needs num_labels · max(2, ⌈2K/num_labels⌉) = 2K so every shard is \
                     used exactly once; got {num_labels} labels · {shards_per_label} shards ≠ 2·{k}"
                )));
            }
            // Cut each label into equal shards.
            let mut shards: Vec<Vec<Vec<usize>>> = Vec::with_capacity(num_labels);
            for label in &labels {
                let mut indices = by_label[label].clone();
                indices.shuffle(rng);
                let counts = even_counts(indices.len(), shards_per_label);
                let mut label_shards = Vec::with_capacity(shards_per_label);
                let mut cursor = 0;
                for count in counts {
                    label_shards.push(indices[cursor..cursor + count].to_vec());
                    cursor += count;
                }
                shards.push(label_shards);
            }
            // Random per-label priority for tie-breaking, then give each
            // client one shard from each of the two most-loaded labels.
            // Always drawing from the two largest piles keeps every label
            // drainable and guarantees two distinct labels per client.
            let mut priority: Vec<usize> = (0..num_labels).collect();
            priority.shuffle(rng);
            let mut remaining: Vec<usize> = vec![shards_per_label; num_labels];
            for client in 0..k {
                let mut order: Vec<usize> = (0..num_labels).collect();
                order.sort_by(|&a, &b| {
                    remaining[b]
                        .cmp(&remaining[a])
                        .then(priority[a].cmp(&priority[b]))
                });
                let (first, second) = (order[0], order[1]);
                if remaining[first] == 0 || remaining[second] == 0 {
                    return Err(Error::InfeasiblePartition(format!(
                        "two_shard ran out of distinct labels at client {client}"
                    )));
                }
                for label_pos in [first, second] {
                    remaining[label_pos] -= 1;
                    let shard = shards[label_pos][remaining[label_pos]].clone();
                    assigned[client].extend_from_slice(&shard);
                }
            }
        }
    }

    if let Some(empty) = assigned.iter().position(|a| a.is_empty()) {
        return Err(Error::InfeasiblePartition(format!(
            "client {empty} received no samples (a label in its group has too little data)"
        )));
    }
    Ok(finish_clients(assigned, session))
}

/// Per-session plan: label set, client ids, and the partition to apply.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionPlan {
    pub index: usize,
    pub labels: Vec<usize>,
    pub clients: Vec<usize>,
    pub partition: PartitionScheme,
}

/// The full run schedule. `sessions.len() == num_sessions`, and consecutive
/// organically built sessions share exactly `round(overlap · labels_per_session)`
/// labels; sessions forced by the recurrence map reuse an earlier label set
/// verbatim instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSchedule {
    pub num_sessions: usize,
    pub pilot_sessions: usize,
    pub rounds_per_session: usize,
    pub labels_per_session: usize,
    pub overlap: f64,
    pub sessions: Vec<SessionPlan>,
}

impl SessionSchedule {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json_string()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Builds a schedule over `num_labels` total labels.
///
/// `recurrence` lists (target, source) pairs: session `target` reuses session
/// `source`'s label set verbatim (the mechanism behind A/B/A-style returns to
/// an earlier distribution). All other sessions draw `labels_per_session`
/// labels so that consecutive sessions share exactly
/// `round(overlap · labels_per_session)` labels.
#[allow(clippy::too_many_arguments)]
pub fn build_session_schedule(
    num_labels: usize,
    num_clients: usize,
    num_sessions: usize,
    pilot_sessions: usize,
    rounds_per_session: usize,
    overlap: f64,
    labels_per_session: usize,
    recurrence: &[(usize, usize)],
    partition: PartitionScheme,
    rng: &mut RngStream,
) -> Result<SessionSchedule> {
    if num_sessions < pilot_sessions || pilot_sessions < 1 {
        return Err(Error::InfeasibleSchedule(format!(
            "need num_sessions ≥ pilot_sessions ≥ 1, got {num_sessions} and {pilot_sessions}"
        )));
    }
    if rounds_per_session < 1 {
        return Err(Error::InfeasibleSchedule("need at least one round per session".into()));
    }
    if num_clients < 1 {
        return Err(Error::InfeasibleSchedule("need at least one client".into()));
    }
    if labels_per_session < 1 || labels_per_session > num_labels {
        return Err(Error::InfeasibleSchedule(format!(
            "labels_per_session must lie in 1..={num_labels}, got {labels_per_session}"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InfeasibleSchedule(format!(
            "overlap must lie in [0, 1), got {overlap}"
        )));
    }
    let shared = (overlap * labels_per_session as f64).round() as usize;
    let fresh = labels_per_session - shared;
    if num_sessions > 1 && fresh > num_labels - labels_per_session {
        return Err(Error::InfeasibleSchedule(format!(
            "cannot introduce {fresh} fresh labels per session with only \
             {} labels outside the previous set",
            num_labels - labels_per_session
        )));
    }
    let mut recurrence_map = BTreeMap::new();
    for &(target, source) in recurrence {
        if source >= target || target >= num_sessions {
            return Err(Error::InfeasibleSchedule(format!(
                "recurrence {target}→{source} must reference an earlier session within the run"
            )));
        }
        recurrence_map.insert(target, source);
    }

    let all_labels: Vec<usize> = (0..num_labels).collect();
    let mut sessions: Vec<SessionPlan> = Vec::with_capacity(num_sessions);
    for index in 0..num_sessions {
        let labels = if let Some(&source) = recurrence_map.get(&index) {
            sessions[source].labels.clone()
        } else if index == 0 {
            let mut pool = all_labels.clone();
            pool.shuffle(rng);
            let mut chosen = pool[..labels_per_session].to_vec();
            chosen.sort_unstable();
            chosen
        } else {
            let prev = &sessions[index - 1].labels;
            let mut keep = prev.clone();
            keep.shuffle(rng);
            let mut chosen = keep[..shared].to_vec();
            let mut outside: Vec<usize> = all_labels
                .iter()
                .copied()
                .filter(|l| !prev.contains(l))
                .collect();
            outside.shuffle(rng);
            chosen.extend_from_slice(&outside[..fresh]);
            chosen.sort_unstable();
            chosen
        };
        sessions.push(SessionPlan {
            index,
            labels,
            clients: (0..num_clients).collect(),
            partition,
        });
    }
    Ok(SessionSchedule {
        num_sessions,
        pilot_sessions,
        rounds_per_session,
        labels_per_session,
        overlap,
        sessions,
    })
}
