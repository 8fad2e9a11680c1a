use crate::data::EventInstance;
use crate::error::Result;
use crate::model::{forward, init_params, ModelConfig, ModelInput};
use crate::numerics::{grad_check, GradCheckReport, ParamStore, SeededRng, Tensor};

use super::{assign_targets, loss_sums, weighted_loss, PyramidGrid, TrainConfig};

/// Finite-difference check of the full training loss on the tiny model.
///
/// One video of 8 steps (7 valid) with two events of different classes, so
/// both loss terms and every module contribute. The step starts at `h`.
pub fn end_to_end_grad_check(h: f64, coords_per_param: Option<usize>, seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny();
    let store: ParamStore<f64> = init_params(&cfg, 11)?.cast();
    let len = cfg.max_len;
    let mut rng = SeededRng::new(12);
    let mut stream = |d: usize| Tensor::new(vec![len, d], (0..len * d).map(|_| rng.normal()).collect());
    let input = ModelInput {
        audio: stream(cfg.audio_dim)?,
        visual: stream(cfg.visual_dim)?,
        mask: (0..len).map(|i| if i + 1 < len { 1.0 } else { 0.0 }).collect(),
    };
    let grid = PyramidGrid::new(&cfg, len, len - 1, 1.0, 0.0);
    let tcfg = TrainConfig::default();
    let events = [
        EventInstance { label_id: 0, start_s: 0.2, end_s: 3.7 },
        EventInstance { label_id: 2, start_s: 2.0, end_s: 6.5 },
    ];
    let targets = assign_targets(&events, &grid, &tcfg)?;
    grad_check(&store, h, coords_per_param, seed, |s| {
        let out = forward(s, &cfg, &input)?;
        let sums = loss_sums(&mut s.graph, &out, &targets, &tcfg)?;
        weighted_loss(&mut s.graph, sums, targets.valid_steps() as f64, targets.num_positives(), tcfg.lambda)
    })
}
