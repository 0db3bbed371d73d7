//! Module discovery: rank modules by learned σ², select task-specific
//! modules, and evaluate adaptation restricted to a selection.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_with, AdaptOptions, InnerConfig};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::models::TaskModel;
use crate::params::{MetaParams, ModulePartition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleRank {
    pub module: usize,
    pub name: String,
    pub sigma2: f64,
    /// 1 for the largest σ².
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "value")]
pub enum SelectionRule {
    TopK(usize),
    /// Strictly above the threshold.
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub rule: SelectionRule,
    pub modules: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEval {
    pub modules: Vec<usize>,
    pub mean_val_loss: f64,
    pub per_task: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    /// Sorted by rank.
    pub ranking: Vec<ModuleRank>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evaluations: Vec<SelectionEval>,
}

/// Ranks modules by σ² descending; ties keep partition order.
pub fn rank_modules(meta: &MetaParams, partition: &ModulePartition) -> Result<DiscoveryReport> {
    meta.check(partition)?;
    let sigma2 = meta.sigma2_vec();
    let mut order: Vec<usize> = (0..partition.len()).collect();
    // stable sort keeps partition order among equal values
    order.sort_by(|&a, &b| sigma2[b].total_cmp(&sigma2[a]));
    let ranking = order
        .into_iter()
        .enumerate()
        .map(|(i, m)| ModuleRank {
            module: m,
            name: partition.modules()[m].name.clone(),
            sigma2: sigma2[m],
            rank: i + 1,
        })
        .collect();
    Ok(DiscoveryReport {
        ranking,
        selection: None,
        evaluations: Vec::new(),
    })
}

impl DiscoveryReport {
    /// Applies a selection rule; the chosen modules are listed in rank order.
    pub fn select(&mut self, rule: SelectionRule) -> &Selection {
        let modules = match rule {
            SelectionRule::TopK(k) => self.ranking.iter().take(k).map(|r| r.module).collect(),
            SelectionRule::Threshold(t) => self
                .ranking
                .iter()
                .filter(|r| r.sigma2 > t)
                .map(|r| r.module)
                .collect(),
        };
        self.selection.insert(Selection { rule, modules })
    }

    pub fn is_selected(&self, module: usize) -> bool {
        self.selection
            .as_ref()
            .is_some_and(|s| s.modules.contains(&module))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `module,name,sigma2,rank,selected` rows in partition order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut rows: Vec<&ModuleRank> = self.ranking.iter().collect();
        rows.sort_by_key(|r| r.module);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["module", "name", "sigma2", "rank", "selected"])?;
        for r in rows {
            w.write_record([
                r.module.to_string(),
                r.name.clone(),
                r.sigma2.to_string(),
                r.rank.to_string(),
                self.is_selected(r.module).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Adapts only the modules in `mask`, each with its learned σ², while every
/// other coordinate stays exactly at `φ`. Returns the validation loss per
/// task.
pub fn eval_masked_adaptation(
    model: &dyn TaskModel,
    tasks: &[TaskData],
    meta: &MetaParams,
    partition: &ModulePartition,
    mask: &[usize],
    inner: &InnerConfig,
) -> Result<Vec<f64>> {
    meta.check(partition)?;
    if let Some(&bad) = mask.iter().find(|&&m| m >= partition.len()) {
        return Err(Error::Contract(format!(
            "module {bad} is outside the partition of {} modules",
            partition.len()
        )));
    }
    let keep = partition.coordinate_mask(mask);
    let frozen: Vec<bool> = keep.iter().map(|k| !k).collect();
    let lambda = meta.precisions();
    tasks
        .par_iter()
        .map(|task| {
            let opts = AdaptOptions {
                frozen: Some(&frozen),
                ..Default::default()
            };
            let a = adapt_with(model, &task.train, &meta.phi, &lambda, partition, inner, opts)?;
            model.loss(&a.theta_hat, &task.val)
        })
        .collect()
}

/// Mean validation loss of a masked evaluation, recorded in the report.
pub fn evaluate_selection(
    report: &mut DiscoveryReport,
    model: &dyn TaskModel,
    tasks: &[TaskData],
    meta: &MetaParams,
    partition: &ModulePartition,
    modules: &[usize],
    inner: &InnerConfig,
) -> Result<f64> {
    let per_task = eval_masked_adaptation(model, tasks, meta, partition, modules, inner)?;
    let mean = per_task.iter().sum::<f64>() / per_task.len().max(1) as f64;
    report.evaluations.push(SelectionEval {
        modules: modules.to_vec(),
        mean_val_loss: mean,
        per_task,
    });
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::adapt;
    use crate::data::Batch;
    use crate::models::GaussianObsModel;
    use proptest::prelude::*;

    fn partition3() -> ModulePartition {
        ModulePartition::from_sizes(&[("m1", 1), ("m2", 2), ("m3", 1)]).unwrap()
    }

    #[test]
    fn ties_keep_partition_order() {
        let meta = MetaParams::uniform(vec![0.0; 4], 0.5, 3);
        let r = rank_modules(&meta, &partition3()).unwrap();
        let order: Vec<usize> = r.ranking.iter().map(|x| x.module).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn ranking_example() {
        let meta = MetaParams::from_sigma2(vec![0.0; 4], &[1e-4, 3.0, 1e-5]);
        let r = rank_modules(&meta, &partition3()).unwrap();
        let names: Vec<&str> = r.ranking.iter().map(|x| x.name.as_str()).collect();
        assert_eq!(names, ["m2", "m1", "m3"]);
        assert_eq!(r.ranking[0].sigma2, meta.sigma2(1));
    }

    #[test]
    fn threshold_selects_strictly_above() {
        let sig = [0.5, 3.0, 3.5, 7.2, 1.0, 3.0001, 0.01];
        let p = ModulePartition::per_coordinate(sig.len()).unwrap();
        let meta = MetaParams::from_sigma2(vec![0.0; sig.len()], &sig);
        let mut r = rank_modules(&meta, &p).unwrap();
        let chosen = r.select(SelectionRule::Threshold(meta.sigma2(1))).modules.clone();
        let mut chosen_sorted = chosen.clone();
        chosen_sorted.sort();
        assert_eq!(chosen_sorted, vec![2, 3, 5]);
        let top = r.select(SelectionRule::TopK(2)).modules.clone();
        assert_eq!(top, vec![3, 2]);
    }

    #[test]
    fn report_json_and_csv() {
        let meta = MetaParams::from_sigma2(vec![0.0; 4], &[1e-4, 3.0, 1e-5]);
        let mut r = rank_modules(&meta, &partition3()).unwrap();
        r.select(SelectionRule::TopK(1));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "module,name,sigma2,rank,selected");
        assert!(lines[2].starts_with("1,m2,") && lines[2].ends_with(",1,true"));
        assert!(lines[1].ends_with(",2,false"));
        let back: DiscoveryReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn toy() -> (GaussianObsModel, Vec<TaskData>, MetaParams) {
        let m = GaussianObsModel::identity(3, 1.0).unwrap();
        let tasks = vec![
            TaskData::new(
                Batch::unlabelled(vec![vec![1.0, 2.0, 3.0], vec![0.0, 1.0, -1.0]]),
                Batch::unlabelled(vec![vec![0.5, 1.0, 1.0]]),
            ),
            TaskData::new(
                Batch::unlabelled(vec![vec![-1.0, 0.0, 2.0]]),
                Batch::unlabelled(vec![vec![0.0, 0.0, 0.0]]),
            ),
        ];
        let meta = MetaParams::from_sigma2(vec![0.1, 0.2, 0.3], &[0.5, 2.0, 1.0]);
        (m, tasks, meta)
    }

    #[test]
    fn empty_mask_evaluates_phi() {
        let (m, tasks, meta) = toy();
        let p = m.default_partition();
        let out = eval_masked_adaptation(&m, &tasks, &meta, &p, &[], &InnerConfig::gd(0.1, 20)).unwrap();
        for (l, t) in out.iter().zip(&tasks) {
            assert_eq!(*l, m.loss(&meta.phi, &t.val).unwrap());
        }
    }

    #[test]
    fn full_mask_is_ordinary_adaptation() {
        let (m, tasks, meta) = toy();
        let p = m.default_partition();
        let inner = InnerConfig::gd(0.1, 20);
        let out = eval_masked_adaptation(&m, &tasks, &meta, &p, &[0, 1, 2], &inner).unwrap();
        for (l, t) in out.iter().zip(&tasks) {
            let a = adapt(&m, &t.train, &meta, &p, &inner).unwrap();
            assert_eq!(*l, m.loss(&a.theta_hat, &t.val).unwrap());
        }
        assert!(eval_masked_adaptation(&m, &tasks, &meta, &p, &[3], &inner).is_err());
    }

    #[test]
    fn selection_evaluation_is_recorded() {
        let (m, tasks, meta) = toy();
        let p = m.default_partition();
        let mut r = rank_modules(&meta, &p).unwrap();
        let mean = evaluate_selection(&mut r, &m, &tasks, &meta, &p, &[1], &InnerConfig::gd(0.1, 5)).unwrap();
        assert_eq!(r.evaluations.len(), 1);
        assert_eq!(r.evaluations[0].mean_val_loss, mean);
    }

    proptest! {
        #[test]
        fn ranking_invariant_under_monotone_transform(ls in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
            let p = ModulePartition::per_coordinate(ls.len()).unwrap();
            let a = MetaParams::new(vec![0.0; ls.len()], ls.clone());
            // log σ² → 3 log σ² + 1 is strictly increasing in σ²
            let b = MetaParams::new(vec![0.0; ls.len()], ls.iter().map(|v| 3.0 * v + 1.0).collect());
            let ra: Vec<usize> = rank_modules(&a, &p).unwrap().ranking.iter().map(|r| r.module).collect();
            let rb: Vec<usize> = rank_modules(&b, &p).unwrap().ranking.iter().map(|r| r.module).collect();
            prop_assert_eq!(ra.clone(), rb);
            let mut sorted = ra;
            sorted.sort();
            prop_assert_eq!(sorted, (0..ls.len()).collect::<Vec<_>>());
        }
    }
}
