//! Global server and simulation loop: selection, aggregation, per-round
//! orchestration of clients and proxy, evaluation and traffic accounting.

use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::client::{
    detect_transition, encode_prototype_gradients, feature_variance, local_train, perturb_prototype, select_prototype,
    ClientState, LocalHyperparams, TaskLedger,
};
use crate::config::SimConfig;
use crate::data::{assign_clients, build_task_stream, generate_synthetic, import_flat_file, ClientAssignment, Dataset, Role, Samples, TaskStream};
use crate::error::{Error, Result};
use crate::model::{Activation, ModelParams};
use crate::proxy::{argmax, AugmentationState, PrototypeUpload, ProxyServer};
use crate::rng::{substream, Purpose};

/// Evaluation of a model on the seen classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_recall: f64,
    pub per_task_accuracy: Vec<f64>,
}

/// Metrics from predictions over classes `0..seen`; `task_of[c]` groups classes
/// into the first `tasks` tasks.
pub fn metrics_from_predictions(predictions: &[usize], labels: &[usize], seen: usize, task_of: &[usize], tasks: usize) -> Metrics {
    let mut tp = vec![0usize; seen];
    let mut support = vec![0usize; seen];
    let mut predicted = vec![0usize; seen];
    let mut task_hits = vec![0usize; tasks];
    let mut task_total = vec![0usize; tasks];
    for (&p, &y) in predictions.iter().zip(labels) {
        support[y] += 1;
        if p < seen {
            predicted[p] += 1;
        }
        let k = task_of[y];
        task_total[k] += 1;
        if p == y {
            tp[y] += 1;
            task_hits[k] += 1;
        }
    }
    let present: Vec<usize> = (0..seen).filter(|&c| support[c] > 0).collect();
    let n = present.len().max(1) as f64;
    let mut f1 = 0.0;
    let mut recall = 0.0;
    for &c in &present {
        let r = tp[c] as f64 / support[c] as f64;
        let p = if predicted[c] > 0 { tp[c] as f64 / predicted[c] as f64 } else { 0.0 };
        recall += r;
        if p + r > 0.0 {
            f1 += 2.0 * p * r / (p + r);
        }
    }
    let correct: usize = tp.iter().sum();
    Metrics {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        macro_f1: f1 / n,
        macro_recall: recall / n,
        per_task_accuracy: task_hits
            .iter()
            .zip(&task_total)
            .map(|(&h, &t)| if t > 0 { h as f64 / t as f64 } else { 0.0 })
            .collect(),
    }
}

/// Predicts over every seen class the model has an output for and scores
/// the test samples of classes `0..seen`.
pub fn evaluate_global(model: &ModelParams, test: &Samples, seen: usize, ledger: &TaskLedger, tasks: usize) -> Result<Metrics> {
    if seen == 0 {
        return Err(Error::Contract("evaluation needs at least one seen class".into()));
    }
    let subset = test.filter_classes(|c| c < seen);
    if subset.is_empty() {
        return Err(Error::Contract("no test samples for the seen classes".into()));
    }
    let width = model.class_count().min(seen);
    let logits = model.forward(&subset.inputs)?.logits;
    let predictions: Vec<usize> = logits.iter_rows().map(|r| argmax(&r[..width]).unwrap_or(0)).collect();
    Ok(metrics_from_predictions(&predictions, &subset.labels, seen, &ledger.task_of_class, tasks))
}

/// Uniform draw of `n` distinct ids, returned in ascending order.
pub fn select_clients(active: &[usize], n: usize, seed: u64, task: usize, round: usize) -> Result<Vec<usize>> {
    if n > active.len() {
        return Err(Error::Config(format!("cannot select {n} of {} active clients", active.len())));
    }
    let mut rng = substream(seed, Purpose::Selection, &[task as u64, round as u64]);
    let mut chosen: Vec<usize> = index::sample(&mut rng, active.len(), n).into_iter().map(|i| active[i]).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Sample-count weighted mean of the participants, summed in the given order.
/// Returns `None` when nobody participates.
pub fn aggregate(participants: &[(&ModelParams, usize)]) -> Result<Option<ModelParams>> {
    let participants: Vec<&(&ModelParams, usize)> = participants.iter().filter(|(_, n)| *n > 0).collect();
    let Some(&&(first, _)) = participants.first() else {
        return Ok(None);
    };
    if participants.iter().any(|(m, _)| !m.shape_matches(first)) {
        return Err(Error::Dimension("aggregating models of different shapes".into()));
    }
    if participants.iter().all(|(m, _)| *m == first) {
        return Ok(Some(first.clone()));
    }
    let total: usize = participants.iter().map(|(_, n)| n).sum();
    let mut acc = vec![0.0; first.param_count()];
    for (m, n) in &participants {
        for (a, v) in acc.iter_mut().zip(m.flatten()) {
            *a += *n as f64 * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total as f64);
    Ok(Some(first.with_flat(&acc)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenderRecord {
    pub client: usize,
    pub classes: Vec<usize>,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub task: usize,
    pub round: usize,
    /// Last round of the task: the boundary measurement.
    pub boundary: bool,
    pub class_count: usize,
    pub selected: Vec<usize>,
    pub participants: usize,
    pub accuracy_seen: f64,
    pub macro_f1: f64,
    pub macro_recall: f64,
    pub per_task_accuracy: Vec<f64>,
    pub bytes_sent_models: u64,
    pub bytes_sent_prototype_grads: u64,
    pub transitions: Vec<usize>,
    pub prototype_senders: Vec<SenderRecord>,
    /// Size of one encoded prototype gradient; zero without a proxy.
    pub prototype_grad_bytes_each: u64,
    pub prototypes_reconstructed: usize,
    pub omega: f64,
    pub best_score: Option<f64>,
    pub errors: Vec<String>,
}

/// Per-task boundary table and its average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Seen-class accuracy at the end of each task.
    pub boundary_accuracy: Vec<f64>,
    /// Per-task accuracies at each boundary (row t has t entries).
    pub per_task_table: Vec<Vec<f64>>,
    pub average: f64,
    pub final_accuracy: f64,
    pub final_macro_f1: f64,
    pub final_macro_recall: f64,
    pub bytes_models: u64,
    pub bytes_prototype_grads: u64,
}

impl Summary {
    pub fn from_reports(reports: &[RoundReport]) -> Result<Summary> {
        let boundaries: Vec<&RoundReport> = reports.iter().filter(|r| r.boundary).collect();
        let last = boundaries.last().ok_or_else(|| Error::Format("no boundary rounds in report stream".into()))?;
        let boundary_accuracy: Vec<f64> = boundaries.iter().map(|r| r.accuracy_seen).collect();
        Ok(Summary {
            average: boundary_accuracy.iter().sum::<f64>() / boundary_accuracy.len() as f64,
            per_task_table: boundaries.iter().map(|r| r.per_task_accuracy.clone()).collect(),
            final_accuracy: last.accuracy_seen,
            final_macro_f1: last.macro_f1,
            final_macro_recall: last.macro_recall,
            bytes_models: reports.iter().map(|r| r.bytes_sent_models).sum(),
            bytes_prototype_grads: reports.iter().map(|r| r.bytes_sent_prototype_grads).sum(),
            boundary_accuracy,
        })
    }

    /// Plain-text table: one row per task boundary, accuracies in percent, then `Avg.`.
    pub fn table(&self) -> String {
        let mut out = String::from("task  accuracy  per-task\n");
        for (t, (acc, row)) in self.boundary_accuracy.iter().zip(&self.per_task_table).enumerate() {
            let cells: Vec<String> = row.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
            out.push_str(&format!("{:>4}  {:>8.1}  {}\n", t + 1, 100.0 * acc, cells.join(" ")));
        }
        out.push_str(&format!("Avg.  {:>8.1}\n", 100.0 * self.average));
        out
    }

    pub fn prototype_share(&self) -> f64 {
        if self.bytes_models == 0 { 0.0 } else { self.bytes_prototype_grads as f64 / self.bytes_models as f64 }
    }
}

/// Whole simulation state, owned by the coordinator.
#[derive(Debug, Clone)]
pub struct World {
    pub config: SimConfig,
    pub hyper: LocalHyperparams,
    /// Data relabelled so task t owns a contiguous class range.
    pub dataset: Dataset,
    pub stream: TaskStream,
    pub ledger: TaskLedger,
    pub assignments: Vec<ClientAssignment>,
    pub clients: Vec<ClientState>,
    pub global: Option<ModelParams>,
    pub proxy: Option<ProxyServer>,
    pub boundary_models: Vec<ModelParams>,
}

impl World {
    pub fn new(config: &SimConfig) -> Result<World> {
        config.validate()?;
        let seed = config.seed;
        let raw = match &config.data.import {
            Some(path) => import_flat_file(path, config.data.test_fraction)?,
            None => generate_synthetic(seed, &config.data.synthetic_spec())?,
        };
        let stream = build_task_stream(raw.class_count, config.tasks, config.classes_per_task, seed)?;
        let dataset = raw.relabel(&stream.label_map(raw.class_count));
        let stream = stream.ordered();
        let ledger = TaskLedger::from_ordered(&stream);
        let c = &config.clients;
        let assignments = assign_clients(&stream, c.initial, c.added_per_task, config.rho, c.z_o_fraction, seed)?;
        let dim = dataset.dim();
        let clients = assignments.iter().map(|a| ClientState::new(a.client_id, config.memory.budget, dim)).collect();
        let proxy = if config.variant.proxy() {
            let h = &config.proxy.encoder_hidden;
            let dims = [dim, h[0], h[1], h[2], stream.total_classes()];
            let encoder = ModelParams::new_random(&dims, Activation::Sigmoid, &mut substream(seed, Purpose::Encoder, &[]))?;
            let aug = AugmentationState::new(config.proxy.xi, config.proxy.upsilon)?;
            Some(ProxyServer::new(encoder, aug, config.reconstruction_params()))
        } else {
            None
        };
        Ok(World {
            hyper: config.local_hyperparams(),
            config: config.clone(),
            dataset,
            stream,
            ledger,
            assignments,
            clients,
            global: None,
            proxy,
            boundary_models: Vec::new(),
        })
    }

    /// Ids of clients that have joined by task `t` (1-based).
    pub fn active_clients(&self, t: usize) -> Vec<usize> {
        self.assignments.iter().filter(|a| a.joined_at_task <= t).map(|a| a.client_id).collect()
    }

    /// Number of classes introduced up to and including task `t`.
    pub fn seen_classes(&self, t: usize) -> usize {
        self.stream.old_counts[t - 1] + self.stream.new_counts[t - 1]
    }

    fn draw_task_data(&self, client: usize, t: usize, classes: &[usize]) -> Samples {
        let mut rng = substream(self.config.seed, Purpose::ClientData, &[client as u64, t as u64]);
        let train = &self.dataset.train;
        let mut picked = Vec::new();
        for &c in classes {
            let idx = train.indices_of(c);
            let take = self.config.clients.samples_per_class.min(idx.len());
            picked.extend(index::sample(&mut rng, idx.len(), take).into_iter().map(|i| idx[i]));
        }
        train.subset(&picked)
    }

    fn start_task(&mut self, t: usize) {
        let dim = self.dataset.dim();
        let data: Vec<Option<Samples>> = self
            .assignments
            .iter()
            .map(|a| {
                a.at(t - 1).map(|ta| match ta.role {
                    Role::Old => Samples::empty(dim),
                    Role::New | Role::Added => self.draw_task_data(a.client_id, t, &ta.classes),
                })
            })
            .collect();
        for (state, d) in self.clients.iter_mut().zip(data) {
            if let Some(d) = d {
                state.task_data = d;
                state.refresh_counts();
            }
        }
    }

    fn model_bytes(model: &ModelParams) -> u64 {
        checkpoint::encoded_len(model) as u64
    }

    /// Executes round `r` of task `t` (both 1-based).
    pub fn run_round(&mut self, t: usize, r: usize) -> Result<RoundReport> {
        let seed = self.config.seed;
        let coords = [t as u64, r as u64];
        let mut errors = Vec::new();
        if r == 1 {
            self.start_task(t);
        }
        let active = self.active_clients(t);
        let selected = select_clients(&active, self.config.clients.selected, seed, t, r)?;

        // Widen (or create) the global model to cover every label the selected clients train on.
        let needed = selected
            .iter()
            .map(|&id| self.clients[id].training_union().map(|u| u.labels.iter().max().map_or(0, |m| m + 1)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        match &self.global {
            None => {
                let mut dims = vec![self.dataset.dim()];
                dims.extend(&self.config.model.hidden);
                dims.push(needed.max(1));
                let mut rng = substream(seed, Purpose::ModelInit, &[]);
                self.global = Some(ModelParams::new_classifier(&dims, self.config.model.activation, &mut rng)?);
            }
            Some(g) if needed > g.class_count() => {
                let mut rng = substream(seed, Purpose::Widen, &coords);
                self.global = Some(g.widen(needed, &mut rng)?);
            }
            Some(_) => {}
        }
        let global = self.global.clone().expect("global model initialised above");

        // Entropy test and memory refresh on every active client.
        let r_e = self.hyper.r_e;
        let outcomes: Vec<Result<bool>> = self
            .clients
            .par_iter_mut()
            .filter(|c| active.contains(&c.client_id))
            .map(|state| {
                let fresh = state.prev_entropy.is_none() && !state.task_data.is_empty();
                let detection = detect_transition(state, &global, r_e)?;
                let transitioned = detection.is_some_and(|d| d.transitioned);
                if (transitioned || fresh) && state.last_prototype_task != Some(t) {
                    state.owes_prototypes = true;
                }
                let update = state.memory.update(&state.task_data, &global)?;
                state.memory = update.memory;
                state.refresh_counts();
                Ok(transitioned)
            })
            .collect();
        let mut transitions = Vec::new();
        for (id, res) in active.iter().zip(outcomes) {
            match res {
                Ok(true) => transitions.push(*id),
                Ok(false) => {}
                Err(e) => errors.push(format!("client {id}: {e}")),
            }
        }

        // Local training of the selected clients.
        let proxy_on = self.proxy.is_some();
        let (teacher_prev, teacher_cur) = match &self.proxy {
            Some(p) => (p.tracker.best_prev.clone(), p.tracker.best_current.clone()),
            None => (None, None),
        };
        let hyper = self.hyper;
        let ledger = &self.ledger;
        let encoder = self.proxy.as_ref().map(|p| p.encoder.clone());
        let trained: Vec<(usize, Result<(ModelParams, usize, Vec<PrototypeUpload>, Option<SenderRecord>)>)> = self
            .clients
            .par_iter_mut()
            .filter(|c| selected.contains(&c.client_id))
            .map(|state| {
                let id = state.client_id;
                let res = (|| {
                    state.old_model = if state.transition_flag { teacher_cur.clone() } else { teacher_prev.clone() };
                    let mut rng = substream(seed, Purpose::LocalTraining, &[id as u64, t as u64, r as u64]);
                    let outcome = local_train(state, &hyper, &global, ledger, &mut rng)?;
                    let mut uploads = Vec::new();
                    let mut sender = None;
                    if let (true, Some(enc)) = (state.owes_prototypes && !state.task_data.is_empty(), encoder.as_ref()) {
                        let classes = state.task_data.classes();
                        for &c in &classes {
                            let rows = state.task_data.inputs.select_rows(&state.task_data.indices_of(c));
                            let pick = select_prototype(&rows, &outcome.model)?;
                            let var = feature_variance(&outcome.model, &rows)?;
                            let mut prng = substream(seed, Purpose::Perturbation, &[id as u64, t as u64, r as u64, c as u64]);
                            let x = perturb_prototype(
                                rows.row(pick),
                                c,
                                &outcome.model,
                                &var,
                                hyper.epsilon,
                                hyper.perturb_lr,
                                hyper.perturb_steps,
                                &mut prng,
                            )?;
                            uploads.push(PrototypeUpload { client_id: id, gradient: encode_prototype_gradients(&x, c, enc)? });
                        }
                        state.owes_prototypes = false;
                        state.last_prototype_task = Some(t);
                        sender = Some(SenderRecord { client: id, classes });
                    }
                    let weight = if outcome.no_data { 0 } else { outcome.sample_count };
                    Ok((outcome.model, weight, uploads, sender))
                })();
                (id, res)
            })
            .collect();

        let mut participants = Vec::new();
        let mut uploads = Vec::new();
        let mut senders = Vec::new();
        for (id, res) in trained {
            match res {
                Ok((model, weight, ups, sender)) => {
                    participants.push((model, weight));
                    uploads.extend(ups);
                    senders.extend(sender);
                }
                Err(e) => errors.push(format!("client {id}: {e}")),
            }
        }
        let proto_bytes_each = encoder.as_ref().map_or(0, |e| (e.param_count() * 8) as u64);
        let bytes_protos: u64 = uploads.iter().map(|u| u.gradient.byte_size() as u64).sum();

        // Aggregation.
        let refs: Vec<(&ModelParams, usize)> = participants.iter().map(|(m, n)| (m, *n)).collect();
        let participant_count = refs.iter().filter(|(_, n)| *n > 0).count();
        match aggregate(&refs)? {
            Some(m) => self.global = Some(m),
            None => errors.push("no participants; global model kept".into()),
        }
        let new_global = self.global.clone().expect("global model exists");

        // Traffic: download + upload of the global model, plus the best-model pair.
        let n_sel = selected.len() as u64;
        let mut bytes_models = 2 * n_sel * Self::model_bytes(&global);
        if proxy_on {
            let pair: u64 = [&teacher_prev, &teacher_cur].iter().filter_map(|m| m.as_ref()).map(Self::model_bytes).sum();
            bytes_models += n_sel * pair;
        }

        // Proxy: reconstruct, roll the tracker at the first round of a new task, score the new global model.
        let mut reconstructed = 0;
        let mut best_score = None;
        let mut omega = 0.0;
        if let Some(proxy) = self.proxy.as_mut() {
            let out = proxy.receive(uploads, seed, coords)?;
            reconstructed = out.reconstructed;
            if r == 1 && t >= 2 {
                proxy.tracker.rollover();
            }
            proxy.score(&new_global, seed, coords)?;
            best_score = proxy.tracker.best_score.is_finite().then_some(proxy.tracker.best_score);
            omega = proxy.augmentation.omega;
        }

        let seen = self.seen_classes(t);
        let metrics = evaluate_global(&new_global, &self.dataset.test, seen, &self.ledger, t)?;
        let boundary = r == self.config.rounds_per_task;
        if boundary {
            self.boundary_models.push(new_global.clone());
        }
        Ok(RoundReport {
            task: t,
            round: r,
            boundary,
            class_count: new_global.class_count(),
            selected,
            participants: participant_count,
            accuracy_seen: metrics.accuracy,
            macro_f1: metrics.macro_f1,
            macro_recall: metrics.macro_recall,
            per_task_accuracy: metrics.per_task_accuracy,
            bytes_sent_models: bytes_models,
            bytes_sent_prototype_grads: bytes_protos,
            transitions,
            prototype_senders: senders,
            prototype_grad_bytes_each: proto_bytes_each,
            prototypes_reconstructed: reconstructed,
            omega,
            best_score,
            errors,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
    pub final_model: ModelParams,
    /// Global model at the end of each task.
    pub boundary_models: Vec<ModelParams>,
}

/// Runs every task and round. `on_round` sees each report as it is produced.
pub fn run_simulation_with(config: &SimConfig, mut on_round: impl FnMut(&RoundReport)) -> Result<SimOutcome> {
    let mut world = World::new(config)?;
    let mut reports = Vec::new();
    for t in 1..=config.tasks {
        for r in 1..=config.rounds_per_task {
            let report = world.run_round(t, r)?;
            on_round(&report);
            reports.push(report);
        }
    }
    let summary = Summary::from_reports(&reports)?;
    Ok(SimOutcome {
        summary,
        final_model: world.global.expect("at least one round ran"),
        boundary_models: world.boundary_models,
        reports,
    })
}

pub fn run_simulation(config: &SimConfig) -> Result<SimOutcome> {
    run_simulation_with(config, |_| {})
}

/// One JSON object per line.
pub fn metrics_jsonl(reports: &[RoundReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<RoundReport>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Writes `metrics.jsonl`, `summary.json`, `summary.txt` and `checkpoints/` under `dir`.
pub fn write_outputs(outcome: &SimOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    std::fs::write(dir.join("metrics.jsonl"), metrics_jsonl(&outcome.reports)?)?;
    let summary = serde_json::to_string_pretty(&outcome.summary).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("summary.json"), summary + "\n")?;
    std::fs::write(dir.join("summary.txt"), outcome.summary.table())?;
    for (t, m) in outcome.boundary_models.iter().enumerate() {
        checkpoint::write_file(m, dir.join("checkpoints").join(format!("task_{}.lgam", t + 1)))?;
    }
    checkpoint::write_file(&outcome.final_model, dir.join("checkpoints").join("final.lgam"))?;
    Ok(())
}
