//! Routing observability: per-(layer, expert) affinity means, top-K
//! activation bitmap, shared-gate trajectories, and load-balance
//! accumulators, exported as CSV plus a PGM rendering.

use std::fs;
use std::path::Path;

use crate::block::LayerKind;
use crate::error::{Result, SageError};
use crate::routing::{LoadBalanceStats, RoutingDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapKind {
    Affinity,
    Activation,
}

/// One finished per-epoch, per-layer gate summary.
#[derive(Debug, Clone)]
pub struct GsPoint {
    pub epoch: usize,
    pub layer: usize,
    pub kind: LayerKind,
    pub mean: f64,
    pub std: f64,
}

/// Accumulated routing statistics. `record` is O(M) per decision and
/// commutative, so logs from parallel shards merge in any order.
#[derive(Debug)]
pub struct TelemetryLog {
    layers: usize,
    experts: usize,
    kinds: Vec<LayerKind>,
    // Within-epoch accumulators.
    affinity_sums: Vec<Vec<f64>>,
    activation: Vec<Vec<bool>>,
    decision_counts: Vec<usize>,
    gs_sum: Vec<f64>,
    gs_sq_sum: Vec<f64>,
    balance: Vec<LoadBalanceStats>,
    epoch: usize,
    // Finished per-epoch series.
    gs_series: Vec<GsPoint>,
    // Snapshot of the last closed epoch, used by exports once the live
    // window has been reset.
    finished_affinity: Option<Vec<Vec<f64>>>,
    finished_activation: Option<Vec<Vec<bool>>>,
}

impl TelemetryLog {
    pub fn new(kinds: Vec<LayerKind>, experts: usize, top_k: usize) -> Self {
        let layers = kinds.len();
        TelemetryLog {
            layers,
            experts,
            kinds,
            affinity_sums: vec![vec![0.0; experts]; layers],
            activation: vec![vec![false; experts]; layers],
            decision_counts: vec![0; layers],
            gs_sum: vec![0.0; layers],
            gs_sq_sum: vec![0.0; layers],
            balance: (0..layers).map(|_| LoadBalanceStats::new(experts, top_k)).collect(),
            epoch: 0,
            gs_series: Vec::new(),
            finished_affinity: None,
            finished_activation: None,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    /// Fold one routing decision into the accumulators.
    pub fn record(&mut self, layer: usize, decision: &RoutingDecision) -> Result<()> {
        if layer >= self.layers {
            return Err(SageError::contract(format!("telemetry: layer {layer} out of range")));
        }
        let probs = decision.full_probs();
        for (s, p) in self.affinity_sums[layer].iter_mut().zip(&probs) {
            *s += p;
        }
        for &j in &decision.topk_indices {
            self.activation[layer][j] = true;
        }
        self.decision_counts[layer] += 1;
        self.gs_sum[layer] += decision.gs;
        self.gs_sq_sum[layer] += decision.gs * decision.gs;
        self.balance[layer].record(decision);
        Ok(())
    }

    /// Merge a shard recorded over the same epoch window.
    pub fn merge(&mut self, other: &TelemetryLog) {
        for l in 0..self.layers {
            for e in 0..self.experts {
                self.affinity_sums[l][e] += other.affinity_sums[l][e];
                self.activation[l][e] |= other.activation[l][e];
            }
            self.decision_counts[l] += other.decision_counts[l];
            self.gs_sum[l] += other.gs_sum[l];
            self.gs_sq_sum[l] += other.gs_sq_sum[l];
            self.balance[l].merge(&other.balance[l]);
        }
    }

    /// Close the current epoch: push gate statistics into the series,
    /// snapshot the heatmaps, and reset the within-epoch accumulators.
    pub fn end_epoch(&mut self) {
        for l in 0..self.layers {
            let n = self.decision_counts[l].max(1) as f64;
            let mean = self.gs_sum[l] / n;
            let var = (self.gs_sq_sum[l] / n - mean * mean).max(0.0);
            self.gs_series.push(GsPoint {
                epoch: self.epoch,
                layer: l,
                kind: self.kinds[l],
                mean,
                std: var.sqrt(),
            });
        }
        if self.decision_counts.iter().any(|&c| c > 0) {
            self.finished_affinity = Some(self.affinity_matrix());
            self.finished_activation = Some(self.activation.clone());
        }
        self.epoch += 1;
        for l in 0..self.layers {
            self.affinity_sums[l].iter_mut().for_each(|v| *v = 0.0);
            self.activation[l].iter_mut().for_each(|v| *v = false);
            self.decision_counts[l] = 0;
            self.gs_sum[l] = 0.0;
            self.gs_sq_sum[l] = 0.0;
        }
        let (m, k) = (self.experts, self.balance[0].top_k());
        self.balance = (0..self.layers).map(|_| LoadBalanceStats::new(m, k)).collect();
    }

    /// Mean full-softmax probability per (layer, expert); rows sum to 1.
    pub fn affinity_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.layers)
            .map(|l| {
                let n = self.decision_counts[l].max(1) as f64;
                self.affinity_sums[l].iter().map(|s| s / n).collect()
            })
            .collect()
    }

    /// Experts selected at least once per layer, since the epoch started.
    pub fn activation_matrix(&self) -> Vec<Vec<bool>> {
        self.activation.clone()
    }

    /// Experts never selected in any layer this epoch.
    pub fn unused_experts(&self) -> Vec<usize> {
        (0..self.experts)
            .filter(|&e| (0..self.layers).all(|l| !self.activation[l][e]))
            .collect()
    }

    /// Unused experts in the last closed epoch (reported, not asserted).
    pub fn unused_experts_last_epoch(&self) -> Vec<usize> {
        match &self.finished_activation {
            Some(act) => (0..self.experts)
                .filter(|&e| (0..self.layers).all(|l| !act[l][e]))
                .collect(),
            None => self.unused_experts(),
        }
    }

    pub fn gs_series(&self) -> &[GsPoint] {
        &self.gs_series
    }

    pub fn balance_stats(&self, layer: usize) -> &LoadBalanceStats {
        &self.balance[layer]
    }

    // ── Exports ─────────────────────────────────────────────────────

    /// Export view of the affinity matrix: the live window if it has
    /// decisions, otherwise the last closed epoch.
    fn export_affinity(&self) -> Result<Vec<Vec<f64>>> {
        if self.decision_counts.iter().any(|&c| c > 0) {
            Ok(self.affinity_matrix())
        } else {
            self.finished_affinity
                .clone()
                .ok_or_else(|| SageError::contract("export_heatmap: nothing recorded"))
        }
    }

    fn export_activation(&self) -> Result<Vec<Vec<bool>>> {
        if self.decision_counts.iter().any(|&c| c > 0) {
            Ok(self.activation.clone())
        } else {
            self.finished_activation
                .clone()
                .ok_or_else(|| SageError::contract("export_heatmap: nothing recorded"))
        }
    }

    pub fn heatmap_csv(&self, kind: HeatmapKind) -> Result<String> {
        let mut out = String::from("layer,expert,value\n");
        match kind {
            HeatmapKind::Affinity => {
                for (l, row) in self.export_affinity()?.iter().enumerate() {
                    for (e, v) in row.iter().enumerate() {
                        out.push_str(&format!("{l},{e},{v}\n"));
                    }
                }
            }
            HeatmapKind::Activation => {
                for (l, row) in self.export_activation()?.iter().enumerate() {
                    for (e, v) in row.iter().enumerate() {
                        out.push_str(&format!("{l},{e},{}\n", *v as u8));
                    }
                }
            }
        }
        Ok(out)
    }

    /// CSV plus a PGM rendering (value scaled by 255) next to it.
    pub fn export_heatmap(&self, kind: HeatmapKind, csv_path: &Path) -> Result<()> {
        fs::write(csv_path, self.heatmap_csv(kind)?)?;
        let pgm_path = csv_path.with_extension("pgm");
        let mut bytes = Vec::with_capacity(self.layers * self.experts);
        match kind {
            HeatmapKind::Affinity => {
                for row in self.export_affinity()? {
                    for v in row {
                        bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            HeatmapKind::Activation => {
                for row in self.export_activation()? {
                    for v in row {
                        bytes.push(if v { 255 } else { 0 });
                    }
                }
            }
        }
        crate::data::save_pgm(&pgm_path, &bytes, self.layers, self.experts)?;
        Ok(())
    }

    pub fn gs_csv(&self) -> String {
        let mut out = String::from("epoch,layer,kind,mean_gs,std_gs\n");
        for p in &self.gs_series {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.epoch,
                p.layer,
                p.kind.label(),
                p.mean,
                p.std
            ));
        }
        out
    }

    pub fn export_gs(&self, path: &Path) -> Result<()> {
        if self.gs_series.is_empty() {
            return Err(SageError::contract("export_gs: no finished epoch"));
        }
        fs::write(path, self.gs_csv())?;
        Ok(())
    }
}

/// Parse a heatmap CSV back into a dense matrix (round-trip check).
pub fn parse_heatmap_csv(text: &str, layers: usize, experts: usize) -> Result<Vec<Vec<f64>>> {
    let mut matrix = vec![vec![0.0; experts]; layers];
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "layer,expert,value" {
                return Err(SageError::config("heatmap csv: bad header".to_string()));
            }
            continue;
        }
        let mut parts = line.split(',');
        let l: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| SageError::config(format!("heatmap csv line {}", i + 1)))?;
        let e: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| SageError::config(format!("heatmap csv line {}", i + 1)))?;
        let v: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| SageError::config(format!("heatmap csv line {}", i + 1)))?;
        matrix[l][e] = v;
    }
    Ok(matrix)
}
