//! Synthetic data, task streams, client class assignment and exemplar memory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::{Batch, ModelParams};
use crate::rng::{standard_normal, substream, Purpose, SimRng};
use crate::tensor::{squared_distance, Tensor2};

/// Labelled samples, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub inputs: Tensor2,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(inputs: Tensor2, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(dim_err(format!("{} rows with {} labels", inputs.rows(), labels.len())));
        }
        Ok(Self { inputs, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self { inputs: Tensor2::zeros(0, dim), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        Samples {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows whose label passes `keep`.
    pub fn filter_classes(&self, keep: impl Fn(usize) -> bool) -> Samples {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn concat(&self, other: &Samples) -> Result<Samples> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(dim_err("concatenating samples of different widths"));
        }
        let dim = if self.is_empty() { other.dim() } else { self.dim() };
        let mut values = self.inputs.values().to_vec();
        values.extend_from_slice(other.inputs.values());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Samples::new(Tensor2::from_vec(labels.len(), dim, values)?, labels)
    }

    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone())
    }

    pub fn relabel(&self, map: &[usize]) -> Samples {
        Samples { inputs: self.inputs.clone(), labels: self.labels.iter().map(|&l| map[l]).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Samples,
    pub test: Samples,
    pub class_count: usize,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    fn validate(&self) -> Result<()> {
        for c in 0..self.class_count {
            if self.train.indices_of(c).is_empty() || self.test.indices_of(c).is_empty() {
                return Err(Error::Config(format!("class {c} lacks train or test samples")));
            }
        }
        if self.train.labels.iter().chain(&self.test.labels).any(|&l| l >= self.class_count) {
            return Err(Error::Config("labels are not dense in [0, classes)".into()));
        }
        Ok(())
    }

    /// Renames every label through `map` (a permutation of the class ids).
    pub fn relabel(&self, map: &[usize]) -> Dataset {
        Dataset { train: self.train.relabel(map), test: self.test.relabel(map), class_count: self.class_count }
    }
}

/// Parameters of the Gaussian-cluster image generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 10, dim: 64, train_per_class: 60, test_per_class: 20, noise_sigma: 0.15 }
    }
}

/// Every class gets a mean image drawn uniformly from `[0,1]^dim`; samples are
/// the mean plus isotropic Gaussian noise, clipped to `[0,1]`.
pub fn generate_synthetic(seed: u64, spec: &SyntheticSpec) -> Result<Dataset> {
    let side = (spec.dim as f64).sqrt().round() as usize;
    if spec.dim < 16 || side * side != spec.dim {
        return Err(Error::Config(format!("dim {} must be a perfect square ≥ 16", spec.dim)));
    }
    if spec.classes < 2 {
        return Err(Error::Config("at least two classes are required".into()));
    }
    if spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Config("every class needs train and test samples".into()));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
    }
    let mut rng = substream(seed, Purpose::Data, &[0]);
    let means: Vec<Vec<f64>> =
        (0..spec.classes).map(|_| (0..spec.dim).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let draw = |count: usize, rng: &mut SimRng| -> Samples {
        let mut values = Vec::with_capacity(count * spec.classes * spec.dim);
        let mut labels = Vec::with_capacity(count * spec.classes);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..count {
                for &m in mean {
                    let v = if spec.noise_sigma > 0.0 { m + spec.noise_sigma * standard_normal(rng) } else { m };
                    values.push(v.clamp(0.0, 1.0));
                }
                labels.push(c);
            }
        }
        Samples { inputs: Tensor2::from_vec(labels.len(), spec.dim, values).unwrap(), labels }
    };
    let train = draw(spec.train_per_class, &mut rng);
    let test = draw(spec.test_per_class, &mut rng);
    let ds = Dataset { train, test, class_count: spec.classes };
    ds.validate()?;
    Ok(ds)
}

/// Reads the flat import format: a header `count,dim,classes` followed by
/// `count` rows of `label,v1,...,v_dim` with values in `[0,1]`. The last
/// `test_fraction` of each class (at least one sample) becomes the test split.
pub fn import_flat(text: &str, test_fraction: f64) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Format("empty file".into()))?;
    let head: Vec<usize> = header
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("line 1: bad header: {e}")))?;
    let [count, dim, classes] = head[..] else {
        return Err(Error::Format("line 1: header must be count,dim,classes".into()));
    };
    let mut values = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for (lineno, line) in lines {
        let mut fields = line.split(',').map(str::trim);
        let label: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("line {}: bad label", lineno + 1)))?;
        if label >= classes {
            return Err(Error::Format(format!("line {}: label {label} ≥ {classes}", lineno + 1)));
        }
        let row: Vec<f64> = fields
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        if row.len() != dim || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format(format!("line {}: expected {dim} values in [0,1]", lineno + 1)));
        }
        values.extend(row);
        labels.push(label);
    }
    if labels.len() != count {
        return Err(Error::Format(format!("header promises {count} rows, found {}", labels.len())));
    }
    let all = Samples::new(Tensor2::from_vec(count, dim, values)?, labels)?;
    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let idx = all.indices_of(c);
        let n_test = ((idx.len() as f64 * test_fraction).ceil() as usize).clamp(1, idx.len().max(1));
        let split = idx.len().saturating_sub(n_test);
        train_idx.extend_from_slice(&idx[..split]);
        test_idx.extend_from_slice(&idx[split..]);
    }
    let ds = Dataset { train: all.subset(&train_idx), test: all.subset(&test_idx), class_count: classes };
    ds.validate()?;
    Ok(ds)
}

pub fn import_flat_file(path: impl AsRef<Path>, test_fraction: f64) -> Result<Dataset> {
    import_flat(&std::fs::read_to_string(path)?, test_fraction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based task index.
    pub task_id: usize,
    pub class_ids: Vec<usize>,
}

/// Ordered sequence of tasks with pairwise disjoint label spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskSpec>,
    /// `C^o(t)`: classes introduced before task t.
    pub old_counts: Vec<usize>,
    /// `C^t`: classes introduced by task t.
    pub new_counts: Vec<usize>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.new_counts.iter().sum()
    }

    /// Maps each original label to its position in stream order. Labels that
    /// never appear keep positions after all scheduled classes.
    pub fn label_map(&self, class_count: usize) -> Vec<usize> {
        let mut map = vec![usize::MAX; class_count];
        let mut next = 0;
        for task in &self.tasks {
            for &c in &task.class_ids {
                map[c] = next;
                next += 1;
            }
        }
        for m in map.iter_mut().filter(|m| **m == usize::MAX) {
            *m = next;
            next += 1;
        }
        map
    }

    /// The same stream expressed in positions, so task t owns `C^o(t)..C^o(t)+C^t`.
    pub fn ordered(&self) -> TaskStream {
        let tasks = self
            .tasks
            .iter()
            .zip(&self.old_counts)
            .map(|(t, &o)| TaskSpec { task_id: t.task_id, class_ids: (o..o + t.class_ids.len()).collect() })
            .collect();
        TaskStream { tasks, old_counts: self.old_counts.clone(), new_counts: self.new_counts.clone() }
    }

    /// 0-based index of the task that introduces `class`.
    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.class_ids.contains(&class))
    }
}

/// Splits `class_count` classes into `tasks` groups following a seeded order.
pub fn build_task_stream(class_count: usize, tasks: usize, classes_per_task: usize, seed: u64) -> Result<TaskStream> {
    if tasks == 0 || classes_per_task == 0 {
        return Err(Error::Config("tasks and classes_per_task must be positive".into()));
    }
    if tasks * classes_per_task > class_count {
        return Err(Error::Config(format!(
            "{tasks} tasks × {classes_per_task} classes exceed the {class_count} available"
        )));
    }
    let mut order: Vec<usize> = (0..class_count).collect();
    order.shuffle(&mut substream(seed, Purpose::ClassOrder, &[]));
    let specs: Vec<TaskSpec> = order
        .chunks(classes_per_task)
        .take(tasks)
        .enumerate()
        .map(|(i, c)| TaskSpec { task_id: i + 1, class_ids: c.to_vec() })
        .collect();
    let new_counts = vec![classes_per_task; tasks];
    let old_counts = (0..tasks).map(|t| t * classes_per_task).collect();
    Ok(TaskStream { tasks: specs, old_counts, new_counts })
}

/// Client role within one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// No new data this task.
    Old,
    /// Receives data of the current task.
    New,
    /// Joined in this task; no history.
    Added,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub role: Role,
    /// Local label space `Y_l^t`; empty for [`Role::Old`].
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAssignment {
    pub client_id: usize,
    /// 1-based task in which the client first appears.
    pub joined_at_task: usize,
    /// Indexed by 0-based task; `None` before the client joined.
    pub per_task: Vec<Option<TaskAssignment>>,
}

impl ClientAssignment {
    pub fn at(&self, task_index: usize) -> Option<&TaskAssignment> {
        self.per_task.get(task_index).and_then(Option::as_ref)
    }
}

/// Size of a client's share of a task label space.
pub fn subset_size(task_classes: usize, fraction: f64) -> usize {
    ((fraction * task_classes as f64).round() as usize).clamp(1, task_classes.max(1))
}

/// Assigns roles and Non-IID class subsets.
///
/// Task 1: every initial client is [`Role::New`]. Task t > 1: `added_per_task`
/// fresh [`Role::Added`] clients join and every earlier client is
/// independently [`Role::Old`] with probability `z_o_fraction`.
pub fn assign_clients(
    stream: &TaskStream,
    initial_clients: usize,
    added_per_task: usize,
    fraction: f64,
    z_o_fraction: f64,
    seed: u64,
) -> Result<Vec<ClientAssignment>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("assignment fraction {fraction} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&z_o_fraction) {
        return Err(Error::Config(format!("z_o_fraction {z_o_fraction} outside [0, 1]")));
    }
    let tasks = stream.len();
    let mut clients: Vec<ClientAssignment> = (0..initial_clients)
        .map(|id| ClientAssignment { client_id: id, joined_at_task: 1, per_task: vec![None; tasks] })
        .collect();
    for (t, spec) in stream.tasks.iter().enumerate() {
        if t > 0 {
            let start = clients.len();
            clients.extend((start..start + added_per_task).map(|id| ClientAssignment {
                client_id: id,
                joined_at_task: t + 1,
                per_task: vec![None; tasks],
            }));
        }
        let k = subset_size(spec.class_ids.len(), fraction);
        for client in clients.iter_mut() {
            let mut rng = substream(seed, Purpose::Assignment, &[client.client_id as u64, t as u64]);
            let role = if client.joined_at_task == t + 1 {
                if t == 0 { Role::New } else { Role::Added }
            } else if rng.random_bool(z_o_fraction) {
                Role::Old
            } else {
                Role::New
            };
            let classes = if role == Role::Old {
                Vec::new()
            } else {
                let mut picked: Vec<usize> =
                    index::sample(&mut rng, spec.class_ids.len(), k).into_iter().map(|i| spec.class_ids[i]).collect();
                picked.sort_unstable();
                picked
            };
            client.per_task[t] = Some(TaskAssignment { role, classes });
        }
    }
    Ok(clients)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub input: Vec<f64>,
    /// Row of the sample in the data it was selected from.
    pub source_index: usize,
}

/// Fixed-budget per-client store of representative samples per class.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExemplarMemory {
    pub budget: usize,
    pub classes: BTreeMap<usize, Vec<Exemplar>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryUpdate {
    pub memory: ExemplarMemory,
    pub warnings: Vec<String>,
}

impl ExemplarMemory {
    pub fn new(budget: usize) -> Self {
        Self { budget, classes: BTreeMap::new() }
    }

    pub fn total(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.classes.values().map(Vec::len).collect()
    }

    /// All exemplars as samples, ordered by class.
    pub fn as_samples(&self, dim: usize) -> Samples {
        let mut values = Vec::with_capacity(self.total() * dim);
        let mut labels = Vec::with_capacity(self.total());
        for (&c, list) in &self.classes {
            for e in list {
                values.extend_from_slice(&e.input);
                labels.push(c);
            }
        }
        Samples { inputs: Tensor2::from_vec(labels.len(), dim, values).expect("exemplar width"), labels }
    }

    /// Per-class quota `floor(budget / classes)`.
    pub fn quota(&self, class_count: usize) -> usize {
        if class_count == 0 { 0 } else { self.budget / class_count }
    }

    /// Re-selects exemplars for every stored class plus the classes in `seen`.
    ///
    /// For a class present in `seen` the candidates are those samples; for an
    /// older class they are its current exemplars. Each class keeps the
    /// `quota` candidates whose features lie nearest to the candidates' mean
    /// feature, ties going to the lower source index.
    pub fn update(&self, seen: &Samples, model: &ModelParams) -> Result<MemoryUpdate> {
        let mut warnings = Vec::new();
        let seen_classes: BTreeSet<usize> = seen.labels.iter().copied().collect();
        let mut all: BTreeSet<usize> = seen_classes.clone();
        for (&c, list) in &self.classes {
            if list.is_empty() && !seen_classes.contains(&c) {
                warnings.push(format!("class {c} has no samples; skipped"));
            } else {
                all.insert(c);
            }
        }
        let quota = self.quota(all.len());
        let mut classes = BTreeMap::new();
        for c in all {
            let candidates: Vec<Exemplar> = if seen_classes.contains(&c) {
                seen.indices_of(c)
                    .into_iter()
                    .map(|i| Exemplar { input: seen.inputs.row(i).to_vec(), source_index: i })
                    .collect()
            } else {
                self.classes[&c].clone()
            };
            let chosen = nearest_to_mean(&candidates, model, quota)?;
            classes.insert(c, chosen.into_iter().map(|i| candidates[i].clone()).collect());
        }
        Ok(MemoryUpdate { memory: ExemplarMemory { budget: self.budget, classes }, warnings })
    }
}

/// Indices (into `candidates`) of the `k` candidates nearest the mean feature.
fn nearest_to_mean(candidates: &[Exemplar], model: &ModelParams, k: usize) -> Result<Vec<usize>> {
    if candidates.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let rows: Vec<&[f64]> = candidates.iter().map(|e| e.input.as_slice()).collect();
    let feats = model.forward(&Tensor2::from_rows(&rows)?)?.features().clone();
    let ranking = rank_by_distance_to_mean(&feats, &candidates.iter().map(|e| e.source_index).collect::<Vec<_>>());
    Ok(ranking.into_iter().take(k).collect())
}

/// Row indices sorted by distance to the row mean, ties broken by `tiebreak`.
pub fn rank_by_distance_to_mean(features: &Tensor2, tiebreak: &[usize]) -> Vec<usize> {
    let n = features.rows();
    let mut mean = vec![0.0; features.cols()];
    for row in features.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let dist: Vec<f64> = features.iter_rows().map(|r| squared_distance(r, &mean)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(tiebreak[a].cmp(&tiebreak[b])));
    order
}

/// `T_l^t ∪ M_l`: task data plus exemplars of classes absent from it.
pub fn training_union(task_data: &Samples, memory: &ExemplarMemory, dim: usize) -> Result<Samples> {
    let current: BTreeSet<usize> = task_data.labels.iter().copied().collect();
    let old = memory.as_samples(dim).filter_classes(|c| !current.contains(&c));
    if task_data.is_empty() {
        return Ok(old);
    }
    task_data.concat(&old)
}

/// Uniform draw of `min(b, |union|)` distinct samples from the union.
pub fn sample_batch(task_data: &Samples, memory: &ExemplarMemory, b: usize, rng: &mut SimRng) -> Result<Batch> {
    let union = training_union(task_data, memory, task_data.dim())?;
    if union.is_empty() {
        return Err(Error::Contract("training union is empty".into()));
    }
    let take = b.min(union.len()).max(1);
    let idx: Vec<usize> = index::sample(rng, union.len(), take).into_vec();
    union.subset(&idx).to_batch()
}

/// One epoch of mini-batches: a seeded permutation split into chunks of `b`.
pub fn epoch_batches(n: usize, b: usize, rng: &mut SimRng) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm.chunks(b.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Dense};
    use crate::rng::seeded;

    fn identity_features(dim: usize) -> ModelParams {
        // a single linear layer: features are the raw inputs
        ModelParams::from_layers(vec![Dense::zeros(dim, 2)], Activation::Sigmoid).unwrap()
    }

    #[test]
    fn zero_noise_gives_class_means() {
        let spec = SyntheticSpec { noise_sigma: 0.0, ..Default::default() };
        let ds = generate_synthetic(1, &spec).unwrap();
        for c in 0..spec.classes {
            let idx = ds.train.indices_of(c);
            let first = ds.train.inputs.row(idx[0]).to_vec();
            for &i in &idx {
                assert_eq!(ds.train.inputs.row(i), &first[..]);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic(5, &spec).unwrap(), generate_synthetic(5, &spec).unwrap());
        assert_ne!(generate_synthetic(5, &spec).unwrap(), generate_synthetic(6, &spec).unwrap());
    }

    #[test]
    fn generation_validates_dim() {
        let bad = SyntheticSpec { dim: 20, ..Default::default() };
        assert!(generate_synthetic(1, &bad).is_err());
        let small = SyntheticSpec { dim: 9, ..Default::default() };
        assert!(generate_synthetic(1, &small).is_err());
    }

    #[test]
    fn stream_arithmetic() {
        let s = build_task_stream(10, 5, 2, 3).unwrap();
        assert_eq!(s.old_counts, vec![0, 2, 4, 6, 8]);
        assert!(s.tasks.iter().all(|t| t.class_ids.len() == 2));
        let one = build_task_stream(10, 1, 10, 3).unwrap();
        assert_eq!(one.old_counts, vec![0]);
        assert_eq!(one.tasks[0].class_ids.len(), 10);
        assert!(build_task_stream(10, 6, 2, 3).is_err());
    }

    #[test]
    fn ordered_stream_is_contiguous() {
        let s = build_task_stream(10, 5, 2, 9).unwrap();
        let map = s.label_map(10);
        let o = s.ordered();
        for (t, spec) in s.tasks.iter().enumerate() {
            for &c in &spec.class_ids {
                assert!(o.tasks[t].class_ids.contains(&map[c]));
            }
        }
        assert_eq!(o.tasks[2].class_ids, vec![4, 5]);
        assert_eq!(o.task_of(5), Some(2));
    }

    #[test]
    fn full_fraction_sees_everything() {
        let s = build_task_stream(10, 5, 2, 1).unwrap();
        let clients = assign_clients(&s, 4, 2, 1.0, 0.0, 7).unwrap();
        assert_eq!(clients.len(), 4 + 4 * 2);
        for c in &clients {
            for t in (c.joined_at_task - 1)..5 {
                let a = c.at(t).unwrap();
                assert_ne!(a.role, Role::Old);
                let mut want = s.tasks[t].class_ids.clone();
                want.sort_unstable();
                assert_eq!(a.classes, want);
            }
        }
    }

    #[test]
    fn roles_follow_schedule() {
        let s = build_task_stream(10, 5, 2, 1).unwrap();
        let clients = assign_clients(&s, 6, 3, 0.6, 0.5, 11).unwrap();
        for c in &clients {
            for t in 0..5 {
                match c.at(t) {
                    None => assert!(t + 1 < c.joined_at_task),
                    Some(a) => {
                        if t == 0 {
                            assert_eq!(a.role, Role::New);
                        } else if t + 1 == c.joined_at_task {
                            assert_eq!(a.role, Role::Added);
                        } else {
                            assert_ne!(a.role, Role::Added);
                        }
                        if a.role == Role::Old {
                            assert!(a.classes.is_empty());
                        } else {
                            assert_eq!(a.classes.len(), 1);
                        }
                    }
                }
            }
        }
        let no_old = assign_clients(&s, 6, 3, 0.6, 0.0, 11).unwrap();
        assert!(no_old.iter().flat_map(|c| c.per_task.iter().flatten()).all(|a| a.role != Role::Old));
        assert!(assign_clients(&s, 6, 3, 0.0, 0.0, 11).is_err());
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let seen = Samples::new(Tensor2::from_rows(&[[0.0, 0.0], [2.0, 2.0]]).unwrap(), vec![0, 0]).unwrap();
        let mem = ExemplarMemory::new(1).update(&seen, &identity_features(2)).unwrap().memory;
        assert_eq!(mem.classes[&0].len(), 1);
        assert_eq!(mem.classes[&0][0].source_index, 0);
    }

    #[test]
    fn large_budget_keeps_everything() {
        let seen = Samples::new(Tensor2::from_rows(&[[0.1, 0.0], [0.3, 0.2], [0.9, 0.4]]).unwrap(), vec![0, 1, 0])
            .unwrap();
        let mem = ExemplarMemory::new(100).update(&seen, &identity_features(2)).unwrap().memory;
        assert_eq!(mem.total(), 3);
    }

    #[test]
    fn old_quotas_shrink_when_classes_arrive() {
        let mut rng = seeded(4);
        let model = identity_features(3);
        let mk = |classes: &[usize], rng: &mut SimRng| {
            let rows: Vec<Vec<f64>> = (0..classes.len() * 10).map(|_| (0..3).map(|_| rng.random()).collect()).collect();
            let labels = classes.iter().flat_map(|&c| std::iter::repeat_n(c, 10)).collect();
            Samples::new(Tensor2::from_rows(&rows).unwrap(), labels).unwrap()
        };
        let m1 = ExemplarMemory::new(12).update(&mk(&[0, 1], &mut rng), &model).unwrap().memory;
        assert_eq!(m1.counts(), vec![6, 6]);
        let m2 = m1.update(&mk(&[2, 3], &mut rng), &model).unwrap().memory;
        assert_eq!(m2.counts(), vec![3, 3, 3, 3]);
        // shrinking keeps a subset of what was there
        for c in [0, 1] {
            for e in &m2.classes[&c] {
                assert!(m1.classes[&c].contains(e));
            }
        }
    }

    #[test]
    fn batch_clamps_to_union() {
        let data = Samples::new(Tensor2::from_rows(&[[0.0], [1.0], [2.0]]).unwrap(), vec![0, 0, 1]).unwrap();
        let b = sample_batch(&data, &ExemplarMemory::new(0), 8, &mut seeded(1)).unwrap();
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn union_skips_exemplars_of_current_classes() {
        let data = Samples::new(Tensor2::from_rows(&[[0.0], [1.0]]).unwrap(), vec![2, 2]).unwrap();
        let mut mem = ExemplarMemory::new(4);
        mem.classes.insert(0, vec![Exemplar { input: vec![5.0], source_index: 0 }]);
        mem.classes.insert(2, vec![Exemplar { input: vec![1.0], source_index: 1 }]);
        let u = training_union(&data, &mem, 1).unwrap();
        assert_eq!(u.labels, vec![2, 2, 0]);
    }

    #[test]
    fn import_roundtrip() {
        let text = "4,2,2\n0,0.1,0.2\n0,0.3,0.4\n1,0.5,0.6\n1,0.7,0.8\n";
        let ds = import_flat(text, 0.5).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.test.labels, vec![0, 1]);
        assert!(import_flat("4,2,2\n0,0.1\n", 0.5).is_err());
        assert!(import_flat("1,2,2\n0,0.1,1.5\n", 0.5).is_err());
    }
}
