//! WebAssembly bindings for the demo page in `www/`. Each export returns a
//! JSON string so the page needs no generated type glue beyond wasm-bindgen.

use lga_core::config::SimConfig;
use lga_core::demo::{entropy_trace, privacy_triplets};
use lga_core::proxy::bounded_noise;
use lga_core::rng::{substream, Purpose};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct NoiseBall {
    radius: f64,
    points: Vec<[f64; 2]>,
}

fn json<T: Serialize>(value: lga_core::Result<T>) -> Result<String, String> {
    let v = value.map_err(|e| e.to_string())?;
    serde_json::to_string(&v).map_err(|e| e.to_string())
}

/// Desk preset with a configurable reconstruction budget.
fn desk(seed: u64, recon_steps: usize) -> SimConfig {
    let mut cfg = SimConfig::desk(seed);
    cfg.proxy.recon_steps = recon_steps;
    cfg
}

pub fn triplets_json(seed: u64, count: usize, recon_steps: usize) -> Result<String, String> {
    json(privacy_triplets(&desk(seed, recon_steps), seed, count, 10))
}

pub fn trace_json(seed: u64, switch: usize, rounds: usize, r_e: f64) -> Result<String, String> {
    let mut cfg = desk(seed, 300);
    cfg.local.r_e = r_e;
    // plain CE on one client is stable at the method's default rate
    cfg.local.lr = lga_core::client::LocalHyperparams::default().lr;
    json(entropy_trace(&cfg, seed, switch, rounds))
}

/// 2-D slice of the augmentation noise: unit variances, scale `omega`, bound `xi`.
pub fn noise_ball(seed: u64, omega: f64, xi: f64, n: usize) -> (f64, Vec<[f64; 2]>) {
    let variance = [1.0, 1.0];
    let mut rng = substream(seed, Purpose::Augmentation, &[]);
    let points = (0..n)
        .map(|_| {
            let v = bounded_noise(&variance, omega, xi, &mut rng);
            [v[0], v[1]]
        })
        .collect();
    ((xi * 2.0).sqrt(), points)
}

/// Source, perturbed and reconstructed 8x8 images plus cosines and loss ratios.
#[wasm_bindgen]
pub fn reconstruction_triplets(seed: u32, count: u32, recon_steps: u32) -> Result<String, JsValue> {
    triplets_json(seed as u64, count as usize, recon_steps as usize).map_err(|e| JsValue::from_str(&e))
}

/// Per-round entropy seen by the transition test around a label-space switch.
#[wasm_bindgen]
pub fn transition_trace(seed: u32, switch: u32, rounds: u32, r_e: f64) -> Result<String, JsValue> {
    trace_json(seed as u64, switch as usize, rounds as usize, r_e).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn augmentation_noise(seed: u32, omega: f64, xi: f64, n: u32) -> Result<String, JsValue> {
    let (radius, points) = noise_ball(seed as u64, omega, xi, n as usize);
    json(Ok(NoiseBall { radius, points })).map_err(|e| JsValue::from_str(&e))
}
