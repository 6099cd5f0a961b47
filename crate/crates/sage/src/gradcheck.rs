//! Full-model gradient verification: analytic gradients against central
//! finite differences on a 4x4 single-sample batch, with every layer's
//! top-K selection frozen to the baseline decision so the probe never
//! crosses a selection boundary. Noise is off (eval mode); the loss is
//! the full hybrid objective, balance term included.

use std::time::{Duration, Instant};

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::par;
use crate::params::{Gradients, ParamGroup, ParamId};
use crate::rng::Rng;
use crate::routing::Mode;
use crate::tensor::{Tape, Tensor};
use crate::train::{batch_assignment_fractions, total_loss, LossWeights};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Floor in the relative-error denominator; differences below
/// `FD_TOLERANCE * FD_FLOOR` count as zero regardless of gradient size,
/// which keeps finite-difference roundoff on near-zero gradients from
/// reading as failures.
pub const FD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub scalars: usize,
    pub max_rel: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel: f64,
    pub passed: bool,
    pub runtime: Duration,
    pub scalars: usize,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            out.push_str(&format!(
                "{:<16} {:>7} params  max rel err {:.3e}  {}\n",
                g.group.label(),
                g.scalars,
                g.max_rel,
                if g.max_rel < FD_TOLERANCE { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "overall: max rel err {:.3e} over {} params in {:.2}s -> {}\n",
            self.max_rel,
            self.scalars,
            self.runtime.as_secs_f64(),
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Shrink a run configuration to the gradient-oracle geometry.
pub fn oracle_config(base: &ModelConfig) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.height = 4;
    cfg.width = 4;
    cfg
}

/// Run the frozen-selection finite-difference suite. `corrupt` scales one
/// analytic gradient entry, a negative control that must turn the report
/// red.
pub fn run(config: &ModelConfig, corrupt: bool) -> Result<GradCheckReport> {
    let start = Instant::now();
    let cfg = oracle_config(config);
    let model = Model::build(cfg.clone())?;

    // Fixed input and target.
    let mut rng = Rng::derive(cfg.seed, &[0x6763]);
    let n = cfg.in_channels * cfg.height * cfg.width;
    let image = Tensor::new(
        vec![cfg.in_channels, cfg.height, cfg.width],
        (0..n).map(|_| rng.uniform()).collect(),
    )?;
    let target: Vec<u8> = (0..cfg.height * cfg.width)
        .map(|_| (rng.below(2)) as u8)
        .collect();
    let weights = LossWeights::default();

    // Baseline: freeze every layer's selection, fix f, take analytic grads.
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &image, Mode::Eval, None, None)?;
    let frozen: Vec<Vec<usize>> = pass.decisions.iter().map(|d| d.topk_indices.clone()).collect();
    let f = batch_assignment_fractions(&[&pass], model.pool.size(), model.config.top_k);

    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &image, Mode::Eval, None, Some(&frozen))?;
    let loss = total_loss(&mut tape, &pass, &target, &weights, &f)?;
    tape.backward(loss.total)?;
    let mut analytic = Gradients::zeros_like(&model.store);
    tape.accumulate_param_grads(&mut analytic);

    if corrupt {
        // Harness hook: break one gradient on purpose.
        let id = model.store.iter().next().expect("model has parameters").0;
        let g = analytic.get(id)[0];
        let bent = if g == 0.0 { 1.0 } else { g * 1.5 };
        let mut delta = vec![0.0; analytic.get(id).len()];
        delta[0] = bent - g;
        analytic.add(id, &delta);
    }

    let loss_with = |id: ParamId, index: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::new();
        tape.set_param_override(id, index, delta);
        let pass = model.forward(&mut tape, &image, Mode::Eval, None, Some(&frozen))?;
        let l = total_loss(&mut tape, &pass, &target, &weights, &f)?;
        Ok(tape.scalar_value(l.total))
    };

    // Probe every scalar, parallel across parameters.
    let jobs: Vec<(ParamId, usize)> = model
        .store
        .iter()
        .flat_map(|(id, p)| (0..p.tensor.values.len()).map(move |i| (id, i)))
        .collect();
    let rels: Vec<Result<(ParamId, f64)>> = par::map_indexed(&jobs, |_, &(id, i)| {
        let plus = loss_with(id, i, FD_STEP)?;
        let minus = loss_with(id, i, -FD_STEP)?;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic.get(id)[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        Ok((id, rel))
    });

    let mut per_group: Vec<(usize, f64)> = vec![(0, 0.0); ParamGroup::ALL.len()];
    for r in rels {
        let (id, rel) = r?;
        let group = model.store.get(id).group;
        let slot = ParamGroup::ALL.iter().position(|g| *g == group).expect("known group");
        per_group[slot].0 += 1;
        if rel > per_group[slot].1 {
            per_group[slot].1 = rel;
        }
    }

    let groups: Vec<GroupReport> = ParamGroup::ALL
        .iter()
        .zip(&per_group)
        .map(|(&group, &(scalars, max_rel))| GroupReport { group, scalars, max_rel })
        .collect();
    let max_rel = groups.iter().map(|g| g.max_rel).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel < FD_TOLERANCE,
        max_rel,
        scalars: jobs.len(),
        groups,
        runtime: start.elapsed(),
    })
}
