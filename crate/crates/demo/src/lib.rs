//! Browser front end for three operations of `gres2net`: the step-decay
//! learning-rate curve, a gated vs plain training race on the synthetic
//! cross-channel task, and the gate activations of the gated model.
//!
//! Every export has a plain Rust counterpart returning `Result<_, String>`
//! so the logic runs under native tests; the `#[wasm_bindgen]` layer only
//! converts errors.

use gres2net::data::{make_synthetic_with, DatasetSplit, SynthSpec, SynthTask};
use gres2net::model::{BlockPlan, Model, ModelKind, ModelSpec};
use gres2net::res2net::Gating;
use gres2net::train::{lr_at_epoch, EpochRecord, TrainConfig, TrainState, Trainer};
use gres2net::GradTape;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Learning rate at each epoch in `0..epochs`.
pub fn schedule(lr0: f64, decay_factor: f64, decay_every: usize, epochs: usize) -> Result<Vec<f64>, String> {
    let config = TrainConfig { lr0, decay_factor, decay_every, epochs, ..Default::default() };
    config.validate().map_err(|e| e.to_string())?;
    Ok((0..epochs).map(|e| lr_at_epoch(&config, e)).collect())
}

#[wasm_bindgen]
pub fn lr_schedule(lr0: f64, decay_factor: f64, decay_every: usize, epochs: usize) -> Result<Vec<f64>, JsError> {
    schedule(lr0, decay_factor, decay_every, epochs).map_err(|e| JsError::new(&e))
}

struct Lane {
    kind: ModelKind,
    model: Model,
    state: TrainState,
    last: Option<EpochRecord>,
}

#[derive(Serialize)]
struct LaneReport {
    model: &'static str,
    epoch: usize,
    lr: f64,
    train_loss: f64,
    train_accuracy: f64,
    val_loss: f64,
    val_accuracy: f64,
    best_epoch: Option<usize>,
    best_val_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct GateMap {
    /// Input series, channel-major.
    input: Vec<Vec<f64>>,
    /// Index `i` of each gate `g_i`.
    gates: Vec<usize>,
    /// Per gate, per time step: mean of `g_i` over the group's channels.
    mean: Vec<Vec<f64>>,
    label: usize,
}

/// Two models with identical initialization, one gated and one plain,
/// trained epoch by epoch on the same data and seed.
#[wasm_bindgen]
pub struct Race {
    data: DatasetSplit,
    config: TrainConfig,
    lanes: Vec<Lane>,
}

impl Race {
    pub fn create(seed: u64, groups: usize, group_width: usize) -> Result<Race, String> {
        let spec = SynthSpec { length: 24, ..SynthSpec::new(SynthTask::Classification, 24) };
        let data = make_synthetic_with(&spec, seed)
            .and_then(|s| s.split()?.normalize())
            .map_err(|e| e.to_string())?;
        let plan = BlockPlan { blocks: 1, groups, group_width, out_channels: 16, ..Default::default() };
        let config = TrainConfig { seed, batch_size: Some(16), ..Default::default() };
        let mut lanes = Vec::new();
        for kind in [ModelKind::Gres2net, ModelKind::Res2net] {
            let mut spec = ModelSpec::new(kind, data.task, data.channels, &plan, seed);
            spec.head_hidden = 16;
            let model = Model::new(spec).map_err(|e| e.to_string())?;
            let state = Trainer::new(model.clone(), &data, config.clone()).map_err(|e| e.to_string())?.state();
            lanes.push(Lane { kind, model, state, last: None });
        }
        Ok(Race { data, config, lanes })
    }

    /// One epoch for each lane; JSON array of [`LaneReport`].
    pub fn advance(&mut self) -> Result<String, String> {
        for lane in &mut self.lanes {
            let mut trainer = Trainer::resume(lane.model.clone(), &self.data, self.config.clone(), lane.state.clone())
                .map_err(|e| e.to_string())?;
            lane.last = Some(trainer.run_epoch().map_err(|e| e.to_string())?);
            lane.state = trainer.state();
        }
        let reports: Vec<LaneReport> = self
            .lanes
            .iter()
            .map(|l| {
                let r = l.last.expect("just ran");
                LaneReport {
                    model: l.kind.name(),
                    epoch: r.epoch,
                    lr: r.lr,
                    train_loss: r.train_loss,
                    train_accuracy: r.train_metric,
                    val_loss: r.val_loss,
                    val_accuracy: r.val_metric,
                    best_epoch: l.state.best.as_ref().map(|b| b.epoch),
                    best_val_accuracy: l.state.best.as_ref().map(|b| b.metric),
                }
            })
            .collect();
        serde_json::to_string(&reports).map_err(|e| e.to_string())
    }

    /// Gate activations of the gated lane's block on validation sample
    /// `index` (wrapped), with its current weights. JSON [`GateMap`].
    pub fn gate_map(&self, index: usize) -> Result<String, String> {
        let lane = &self.lanes[0];
        let mut model = lane.model.clone();
        model.load_params(lane.state.current.clone()).map_err(|e| e.to_string())?;
        let sample = &self.data.validation[index % self.data.validation.len()];
        let block = &model.backbone().ok_or("no backbone")?.stages()[0].0;
        let mut tape = GradTape::new();
        let bound = model.params().bind(&mut tape);
        let x = tape.leaf(sample.x.clone());
        let trace = block.forward_traced(&mut tape, &bound, x, Gating::Gated).map_err(|e| e.to_string())?;
        let mean = trace
            .gates
            .iter()
            .map(|&g| {
                let v = tape.value(g);
                (0..v.time()).map(|t| (0..v.channels()).map(|c| v.at(0, c, t)).sum::<f64>() / v.channels() as f64).collect()
            })
            .collect();
        let input = (0..sample.x.channels()).map(|c| sample.x.row(0, c).to_vec()).collect();
        let label = match sample.target {
            gres2net::data::Target::Class(c) => c,
            gres2net::data::Target::Values(_) => 0,
        };
        let map = GateMap { input, gates: (3..=block.config.groups).collect(), mean, label };
        serde_json::to_string(&map).map_err(|e| e.to_string())
    }
}

#[wasm_bindgen]
impl Race {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, groups: usize, group_width: usize) -> Result<Race, JsError> {
        Race::create(seed as u64, groups, group_width).map_err(|e| JsError::new(&e))
    }

    pub fn step(&mut self) -> Result<String, JsError> {
        self.advance().map_err(|e| JsError::new(&e))
    }

    pub fn gates(&self, index: usize) -> Result<String, JsError> {
        self.gate_map(index).map_err(|e| JsError::new(&e))
    }

    pub fn epoch(&self) -> usize {
        self.lanes[0].state.epoch
    }

    #[wasm_bindgen(js_name = validationSize)]
    pub fn validation_size(&self) -> usize {
        self.data.validation.len()
    }
}
