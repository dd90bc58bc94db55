//! Parameter and FLOP accounting per module.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GtrsError, Result};
use crate::model::GtrsModel;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const FLOP_CONVENTION: &str = "1 multiply-add = 2 FLOPs (matmul m×k·k×n = 2mkn); \
elementwise add/sub/mul/div/scale/abs/GELU/sigmoid = 1 FLOP per element; \
softmax = 5 FLOPs per element; layer norm = 8 FLOPs per element; \
reductions = 1 FLOP per input element (row norm 2); concat/slice/gather = 0";

/// Upper bounds checked by `profile --assert-budget`.
pub const PARAM_BUDGET: u64 = 9_000_000;
pub const FLOP_BUDGET: u64 = 250_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub modules: Vec<ModuleCost>,
    pub total_params: u64,
    pub total_flops: u64,
    pub convention: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

impl FromStr for ReportFormat {
    type Err = GtrsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            other => Err(GtrsError::Config(format!(
                "unknown report format {other:?} (expected table or json)"
            ))),
        }
    }
}

/// `pam.block3.gcn.weight` → `pam.block3`.
pub fn module_of(param_name: &str) -> &str {
    match param_name.match_indices('.').nth(1) {
        Some((i, _)) => &param_name[..i],
        None => param_name,
    }
}

/// Trainable scalars per module, in declaration order. Frozen tensors
/// (fixed adjacencies) are not counted.
pub fn count_params(store: &ParamStore) -> Vec<(String, u64)> {
    let mut out: Vec<(String, u64)> = Vec::new();
    for (_, p) in store.iter() {
        let module = module_of(&p.name);
        let n = if p.trainable { p.value.numel() as u64 } else { 0 };
        match out.iter_mut().find(|(m, _)| m == module) {
            Some((_, total)) => *total += n,
            None => out.push((module.to_string(), n)),
        }
    }
    out
}

/// FLOPs of one forward pass per module scope.
pub fn count_flops(model: &GtrsModel) -> Result<Vec<(String, u64)>> {
    let c = &model.config;
    let pose = Tensor::zeros(&[c.joints, 2]);
    let template = Tensor::zeros(&[c.vertices, 3]);
    let tape = Tape::new();
    model.forward(&tape, &pose, &template)?;
    Ok(tape.flops_by_scope().into_iter().filter(|(_, f)| *f > 0).collect())
}

pub fn profile(model: &GtrsModel) -> Result<CostReport> {
    let params = count_params(&model.store);
    let flops = count_flops(model)?;
    let mut modules: Vec<ModuleCost> = params
        .iter()
        .map(|(name, p)| ModuleCost {
            name: name.clone(),
            params: *p,
            flops: 0,
        })
        .collect();
    for (scope, f) in flops {
        let name = if scope.is_empty() { "other".to_string() } else { scope };
        match modules.iter_mut().find(|m| m.name == name) {
            Some(m) => m.flops += f,
            None => modules.push(ModuleCost {
                name,
                params: 0,
                flops: f,
            }),
        }
    }
    Ok(CostReport {
        total_params: modules.iter().map(|m| m.params).sum(),
        total_flops: modules.iter().map(|m| m.flops).sum(),
        modules,
        convention: FLOP_CONVENTION.to_string(),
    })
}

impl CostReport {
    /// Human-readable budget violations; empty when within budget.
    pub fn budget_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.total_params > PARAM_BUDGET {
            out.push(format!("{} trainable params exceed {PARAM_BUDGET}", self.total_params));
        }
        if self.total_flops > FLOP_BUDGET {
            out.push(format!("{} forward FLOPs exceed {FLOP_BUDGET}", self.total_flops));
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => Ok(serde_json::to_string_pretty(self)? + "\n"),
            ReportFormat::Table => Ok(self.table()),
        }
    }

    fn table(&self) -> String {
        let width = self
            .modules
            .iter()
            .map(|m| m.name.len())
            .chain(["module".len(), "total".len()])
            .max()
            .unwrap_or(0);
        let mut s = String::new();
        let _ = writeln!(s, "# FLOP convention: {}", self.convention);
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>14}", "module", "params", "flops");
        for m in &self.modules {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>14}", m.name, m.params, m.flops);
        }
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>14}", "total", self.total_params, self.total_flops);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::skeleton::SkeletonGraph;

    fn tiny_model() -> GtrsModel {
        let config = ModelConfig {
            dim: 16,
            template_tokens: 4,
            mrm_blocks: 2,
            vertices: 30,
            fixed_blocks: 1,
            learnable_blocks: 2,
            ..ModelConfig::default()
        };
        GtrsModel::new(config, SkeletonGraph::h36m(), 0).unwrap()
    }

    #[test]
    fn module_names() {
        assert_eq!(module_of("pam.block3.gcn.weight"), "pam.block3");
        assert_eq!(module_of("pam.pose_head.weight"), "pam.pose_head");
        assert_eq!(module_of("solo"), "solo");
    }

    #[test]
    fn totals_equal_row_sums_and_exclude_fixed_adjacency() {
        let model = tiny_model();
        let report = profile(&model).unwrap();
        assert_eq!(report.total_params, model.store.trainable_scalars() as u64);
        assert_eq!(report.total_params, report.modules.iter().map(|m| m.params).sum::<u64>());
        assert_eq!(report.total_flops, report.modules.iter().map(|m| m.flops).sum::<u64>());
        let names: Vec<&str> = report.modules.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "pam.embed",
                "pam.block0",
                "pam.block1",
                "pam.block2",
                "pam.fusion",
                "pam.pose_head",
                "mrm.template_embed",
                "mrm.block0",
                "mrm.block1",
                "mrm.head"
            ]
        );
        assert!(report.modules.iter().all(|m| m.flops > 0));
        // the fixed block owns exactly one J×J adjacency fewer than a learnable one
        assert_eq!(report.modules[2].params - report.modules[1].params, 17 * 17);
    }

    #[test]
    fn json_round_trip_and_table_totals() {
        let report = profile(&tiny_model()).unwrap();
        let json = report.render(ReportFormat::Json).unwrap();
        let back: CostReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        let table = report.render(ReportFormat::Table).unwrap();
        let last = table.lines().last().unwrap();
        assert!(last.starts_with("total"));
        assert!(last.contains(&report.total_params.to_string()));
        assert!("yaml".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn report_is_deterministic() {
        assert_eq!(profile(&tiny_model()).unwrap(), profile(&tiny_model()).unwrap());
    }
}
