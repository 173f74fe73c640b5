//! Analytic multiply-accumulate counts per operator, for batch size 1.

use serde::Serialize;

use super::{plan_stages, ModelConfig, StagePlan, Variant, STAGES};
use crate::blocks::FusionMode;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsEntry {
    pub stage: String,
    pub op: String,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub entries: Vec<FlopsEntry>,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    /// `(stage, subtotal)` in first-appearance order.
    pub fn stage_totals(&self) -> Vec<(String, u64)> {
        let mut totals: Vec<(String, u64)> = Vec::new();
        for e in &self.entries {
            match totals.iter_mut().find(|(s, _)| *s == e.stage) {
                Some((_, t)) => *t += e.macs,
                None => totals.push((e.stage.clone(), e.macs)),
            }
        }
        totals
    }
}

struct Counter<'a> {
    stage: &'a str,
    entries: &'a mut Vec<FlopsEntry>,
}

impl Counter<'_> {
    fn add(&mut self, op: &str, macs: usize) {
        self.entries.push(FlopsEntry { stage: self.stage.to_string(), op: op.to_string(), macs: macs as u64 });
    }

    fn graph_conv(&mut self, prefix: &str, ci: usize, co: usize, t: usize, n: usize) {
        self.add(&format!("{prefix}conv1x1"), ci * co * t * n);
        self.add(&format!("{prefix}adjacency"), co * t * n * n);
    }

    fn gcn_block(&mut self, prefix: &str, ci: usize, co: usize, k: usize, t: usize, n: usize) {
        self.graph_conv(prefix, ci, co, t, n);
        self.add(&format!("{prefix}batch_norm"), 2 * co * t * n);
        self.add(&format!("{prefix}temporal_conv"), co * co * k * t * n);
    }

    fn pooling(&mut self, prefix: &str, config: &ModelConfig, c: usize, t: usize, n: usize, m: usize) {
        if config.adaptive {
            let w = c / config.reduction;
            self.add(&format!("{prefix}projections"), 2 * c * w * t * n);
            self.add(&format!("{prefix}correlation"), 2 * w * t * n);
            self.add(&format!("{prefix}reweight"), c * t * n);
        }
        self.add(&format!("{prefix}assignment"), c * t * n * m);
        self.add(&format!("{prefix}temporal_pool"), c * t.div_ceil(2) * m);
    }

    fn fusion(&mut self, config: &ModelConfig, c: usize, positions: usize) {
        match config.fusion_mode {
            FusionMode::Sum => self.add("fusion", 2 * c * positions),
            FusionMode::Concat => self.add("fusion", 2 * c * c * positions),
        }
    }
}

fn count_stage(config: &ModelConfig, plan: &StagePlan, last: bool, counter: &mut Counter<'_>) {
    let k = config.temporal_kernel;
    let (ci, co) = (plan.c_in, plan.c_out);
    match (plan.assignment.is_some(), config.variant) {
        (false, _) => counter.gcn_block("", ci, co, k, plan.t_in, plan.n_in),
        (true, Variant::Light) => {
            counter.pooling("pool.", config, ci, plan.t_in, plan.n_in, plan.n_out);
            counter.gcn_block("", ci, co, k, plan.t_out, plan.n_out);
        }
        (true, Variant::Heavy) => {
            counter.pooling("coarse.pool.", config, ci, plan.t_in, plan.n_in, plan.n_out);
            counter.gcn_block("coarse.", ci, co, k, plan.t_out, plan.n_out);
            counter.gcn_block("fine.", ci, co, k, plan.t_in, plan.n_in);
            counter.pooling("fine.pool.", config, co, plan.t_in, plan.n_in, plan.n_out);
            if last {
                counter.add("global_pool", 2 * co * plan.t_out * plan.n_out);
                counter.fusion(config, co, 1);
            } else {
                counter.fusion(config, co, plan.t_out * plan.n_out);
            }
        }
    }
}

/// Counts multiply-accumulates of every operator; elementwise activations are free.
pub fn count_flops(config: &ModelConfig) -> Result<FlopsReport> {
    let topology = config.topology.resolve()?;
    let plans = plan_stages(config, &topology)?;
    let (n, t) = (topology.node_count, config.frames);
    let mut entries = Vec::new();
    let mut stem = Counter { stage: "stem", entries: &mut entries };
    if config.ism {
        let w = config.ism_width;
        stem.add("bones", 3 * t * n * n);
        for stream in ["bone.", "joint."] {
            if config.ism_norm {
                stem.add(&format!("{stream}batch_norm"), 3 * t * n);
            }
            stem.graph_conv(&format!("{stream}gconv1."), 3, w, t, n);
            stem.graph_conv(&format!("{stream}gconv2."), w, w, t, n);
        }
    } else {
        stem.add("batch_norm", 3 * t * n);
        stem.graph_conv("", 3, config.stem_width(), t, n);
    }
    for (i, plan) in plans.iter().enumerate() {
        let name = format!("stage{}", i + 1);
        let mut counter = Counter { stage: &name, entries: &mut entries };
        count_stage(config, plan, i == STAGES - 1, &mut counter);
    }
    let last = &plans[STAGES - 1];
    let heavy_tail = config.variant == Variant::Heavy && last.assignment.is_some();
    let mut head = Counter { stage: "head", entries: &mut entries };
    if !heavy_tail {
        head.add("global_pool", last.c_out * last.t_out * last.n_out);
    }
    head.add("fc", last.c_out * config.classes);
    Ok(FlopsReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::TopologyRef;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig { variant, classes: 60, ..ModelConfig::default() }
    }

    #[test]
    fn total_is_sum_of_stage_totals() {
        let report = count_flops(&cfg(Variant::Heavy)).unwrap();
        let stages: u64 = report.stage_totals().iter().map(|(_, t)| t).sum();
        assert_eq!(stages, report.total());
        assert_eq!(report.stage_totals().len(), 5);
    }

    #[test]
    fn doubling_frames_doubles_stage_counts() {
        let base = count_flops(&ModelConfig { frames: 32, ..cfg(Variant::Light) }).unwrap();
        let double = count_flops(&ModelConfig { frames: 64, ..cfg(Variant::Light) }).unwrap();
        for ((s, a), (_, b)) in base.stage_totals().iter().zip(double.stage_totals()) {
            if s.starts_with("stage") || s == "stem" {
                assert_eq!(2 * a, b, "{s}");
            }
        }
    }

    #[test]
    fn graph_conv_counts_match_closed_form() {
        // plain stem on ntu25: 3 T N (norm) + 3 * 64 * T * N + 64 * T * N^2
        let c = ModelConfig { ism: false, frames: 10, ..cfg(Variant::Light) };
        let report = count_flops(&c).unwrap();
        let (t, n) = (10u64, 25u64);
        assert_eq!(report.stage_totals()[0], ("stem".into(), 3 * t * n + 3 * 64 * t * n + 64 * t * n * n));
    }

    #[test]
    fn pooling_reduces_and_heavy_exceeds_light() {
        for topology in ["ntu25", "uwa15"] {
            let light = ModelConfig { topology: TopologyRef::Name(topology.into()), ..cfg(Variant::Light) };
            let heavy = ModelConfig { variant: Variant::Heavy, ..light.clone() };
            let control = count_flops(&light.no_pooling_control()).unwrap().total();
            let (l, h) = (count_flops(&light).unwrap().total(), count_flops(&heavy).unwrap().total());
            assert!(control > l);
            assert!((l as f64) <= 0.45 * control as f64);
            assert!(h > l);
        }
    }

    #[test]
    fn removing_a_pooling_location_never_lowers_the_count() {
        let full = cfg(Variant::Light);
        let base = count_flops(&full).unwrap().total();
        for drop in 1..=3 {
            let locations: Vec<usize> = (1..=3).filter(|&l| l != drop).collect();
            let fewer = ModelConfig { pooling_locations: locations, ..full.clone() };
            assert!(count_flops(&fewer).unwrap().total() >= base);
        }
    }
}
