//! Source, perturbed and reconstructed prototype triplets: what a client
//! holds, what it encodes, and what the proxy server recovers.

use serde::{Deserialize, Serialize};

use crate::client::{
    detect_transition, encode_prototype_gradients, feature_variance, local_train, perturb_prototype, select_prototype,
    ClientState, TaskLedger,
};
use crate::config::SimConfig;
use crate::data::{build_task_stream, epoch_batches, generate_synthetic};
use crate::error::Result;
use crate::model::{sgd_update, Activation, Batch, LossSpec, ModelParams};
use crate::proxy::{infer_label, reconstruct_prototype};
use crate::rng::{substream, Purpose};
use crate::tensor::cosine_similarity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub index: usize,
    pub label: usize,
    pub inferred_label: usize,
    pub source: Vec<f64>,
    pub perturbed: Vec<f64>,
    pub reconstructed: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_taken: usize,
    pub cos_to_perturbed: f64,
    pub cos_to_source: f64,
}

impl Triplet {
    pub fn loss_ratio(&self) -> f64 {
        if self.initial_loss == 0.0 {
            0.0
        } else {
            self.final_loss / self.initial_loss
        }
    }
}

/// Trains a plain CE model on the configured dataset, then for `count`
/// prototypes (classes visited round-robin) perturbs, encodes, infers the
/// label and reconstructs. Everything derives from `seed`.
pub fn privacy_triplets(config: &SimConfig, seed: u64, count: usize, train_epochs: usize) -> Result<Vec<Triplet>> {
    config.validate()?;
    let data = generate_synthetic(seed, &config.data.synthetic_spec())?;
    let classes = data.class_count;
    let mut dims = vec![data.dim()];
    dims.extend(&config.model.hidden);
    dims.push(classes);
    let mut model = ModelParams::new_classifier(&dims, config.model.activation, &mut substream(seed, Purpose::ModelInit, &[]))?;
    let mut rng = substream(seed, Purpose::LocalTraining, &[]);
    let train = &data.train;
    for _ in 0..train_epochs {
        for idx in epoch_batches(train.len(), config.local.batch, &mut rng) {
            let batch = Batch::new(train.inputs.select_rows(&idx), idx.iter().map(|&i| train.labels[i]).collect())?;
            let (_, g) = model.loss_and_grad(&batch, &vec![1.0; batch.len()], LossSpec::CrossEntropy)?;
            model = sgd_update(&model, &g, config.local.lr)?;
        }
    }

    let mut enc_dims = vec![data.dim()];
    enc_dims.extend(&config.proxy.encoder_hidden);
    enc_dims.push(classes);
    let encoder = ModelParams::new_random(&enc_dims, Activation::Sigmoid, &mut substream(seed, Purpose::Encoder, &[]))?;
    let hyper = config.local_hyperparams();
    let params = config.reconstruction_params();

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        let rows = train.inputs.select_rows(&train.indices_of(label));
        let mut prng = substream(seed, Purpose::Perturbation, &[i as u64]);
        // later visits of a class take a different member so triplets differ
        let pick = (select_prototype(&rows, &model)? + i / classes) % rows.rows();
        let source = rows.row(pick).to_vec();
        let var = feature_variance(&model, &rows)?;
        let perturbed =
            perturb_prototype(&source, label, &model, &var, hyper.epsilon, hyper.perturb_lr, hyper.perturb_steps, &mut prng)?;
        let grad = encode_prototype_gradients(&perturbed, label, &encoder)?;
        let inferred_label = infer_label(&grad)?;
        let rec = reconstruct_prototype(
            &grad,
            inferred_label,
            &encoder,
            &params,
            &mut substream(seed, Purpose::Reconstruction, &[i as u64]),
        )?;
        out.push(Triplet {
            index: i,
            label,
            inferred_label,
            cos_to_perturbed: cosine_similarity(&rec.image, &perturbed),
            cos_to_source: cosine_similarity(&rec.image, &source),
            source,
            perturbed,
            reconstructed: rec.image,
            initial_loss: rec.initial_loss,
            final_loss: rec.final_loss,
            steps_taken: rec.steps_taken,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub round: usize,
    pub entropy: f64,
    pub fired: bool,
}

/// One client trains plain CE on classes {0, 1}; at `switch` its data becomes
/// classes {2, 3} and the classifier is widened. Returns the entropy seen by
/// the transition test at the start of every round.
pub fn entropy_trace(config: &SimConfig, seed: u64, switch: usize, rounds: usize) -> Result<Vec<TracePoint>> {
    config.validate()?;
    let spec = config.data.synthetic_spec();
    if spec.classes < 4 {
        return Err(crate::error::Error::Config("the trace needs at least four classes".into()));
    }
    let data = generate_synthetic(seed, &spec)?;
    let ledger = TaskLedger::from_ordered(&build_task_stream(4, 2, 2, seed)?.ordered());
    let hyper = crate::client::LocalHyperparams { balance: false, distill: false, ..config.local_hyperparams() };
    let mut dims = vec![data.dim()];
    dims.extend(&config.model.hidden);
    dims.push(2);
    let mut model = ModelParams::new_classifier(&dims, config.model.activation, &mut substream(seed, Purpose::ModelInit, &[]))?;
    let mut rng = substream(seed, Purpose::LocalTraining, &[]);
    let mut state = ClientState::new(0, config.memory.budget, data.dim());
    let mut out = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        if round == 1 {
            state.task_data = data.train.filter_classes(|c| c < 2);
        }
        if round == switch {
            state.task_data = data.train.filter_classes(|c| (2..4).contains(&c));
            model = model.widen(4, &mut substream(seed, Purpose::Widen, &[round as u64]))?;
        }
        let d = detect_transition(&mut state, &model, config.local.r_e)?.expect("task data is never empty");
        out.push(TracePoint { round, entropy: d.entropy, fired: d.transitioned });
        state.refresh_counts();
        model = local_train(&mut state, &hyper, &model, &ledger, &mut rng)?.model;
        state.memory = state.memory.update(&state.task_data, &model)?.memory;
    }
    Ok(out)
}
