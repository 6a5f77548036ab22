use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMode {
    Sequential,
    Multitask,
}

/// `(task, start %, end %)` of total training steps.
pub type ObjectiveEntry = (Task, f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSchedule {
    pub mode: ObjectiveMode,
    pub entries: Vec<ObjectiveEntry>,
}

impl Default for ObjectiveSchedule {
    fn default() -> Self {
        Self::mlm_only()
    }
}

impl ObjectiveSchedule {
    pub fn new(mode: ObjectiveMode, entries: Vec<ObjectiveEntry>) -> Result<Self> {
        let s = Self { mode, entries };
        s.validate()?;
        Ok(s)
    }

    pub fn mlm_only() -> Self {
        Self {
            mode: ObjectiveMode::Sequential,
            entries: vec![(Task::Mlm, 0.0, 100.0)],
        }
    }

    /// Word classes first, then MLM.
    pub fn sequential_two_task() -> Self {
        Self {
            mode: ObjectiveMode::Sequential,
            entries: vec![(Task::Pos10, 0.0, 12.5), (Task::Mlm, 12.5, 100.0)],
        }
    }

    pub fn sequential_three_task() -> Self {
        Self {
            mode: ObjectiveMode::Sequential,
            entries: vec![
                (Task::Pos3, 0.0, 6.25),
                (Task::Pos10, 6.25, 12.5),
                (Task::Mlm, 12.5, 100.0),
            ],
        }
    }

    /// The seven task-duration rows compared for the objective curriculum.
    pub fn presets() -> Vec<(&'static str, Self)> {
        use ObjectiveMode::Multitask as M;
        let mt = |entries| Self { mode: M, entries };
        vec![
            ("sequential-2", Self::sequential_two_task()),
            (
                "multitask-pos10-then-mlm",
                mt(vec![(Task::Pos10, 0.0, 100.0), (Task::Mlm, 12.5, 100.0)]),
            ),
            (
                "multitask-pos10-mlm",
                mt(vec![(Task::Pos10, 0.0, 100.0), (Task::Mlm, 0.0, 100.0)]),
            ),
            ("sequential-3", Self::sequential_three_task()),
            (
                "multitask-pos3-pos10-then-mlm",
                mt(vec![
                    (Task::Pos3, 0.0, 6.25),
                    (Task::Pos10, 6.25, 100.0),
                    (Task::Mlm, 12.5, 100.0),
                ]),
            ),
            (
                "multitask-pos3-pos10-mlm",
                mt(vec![
                    (Task::Pos3, 0.0, 6.25),
                    (Task::Pos10, 6.25, 100.0),
                    (Task::Mlm, 0.0, 100.0),
                ]),
            ),
            (
                "multitask-pos3-mlm",
                mt(vec![(Task::Pos3, 0.0, 100.0), (Task::Mlm, 0.0, 100.0)]),
            ),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::config("objective schedule has no entries"));
        }
        let mut seen = BTreeSet::new();
        for &(task, start, end) in &self.entries {
            if !(0.0 <= start && start < end && end <= 100.0) {
                return Err(Error::config(format!(
                    "{task} interval {start}-{end} must satisfy 0 <= start < end <= 100"
                )));
            }
            if !seen.insert(task) {
                return Err(Error::config(format!("{task} appears twice in the objective schedule")));
            }
        }
        let mut sorted = self.entries.clone();
        sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
        if self.mode == ObjectiveMode::Sequential {
            for w in sorted.windows(2) {
                if w[1].1 < w[0].2 {
                    return Err(Error::config(format!(
                        "sequential tasks {} and {} overlap",
                        w[0].0, w[1].0
                    )));
                }
            }
        }
        let mut covered = 0.0f64;
        for &(task, start, end) in &sorted {
            if start > covered {
                return Err(Error::config(format!(
                    "no task is active between {covered}% and {start}% (before {task})"
                )));
            }
            covered = covered.max(end);
        }
        if covered < 100.0 {
            return Err(Error::config(format!("no task is active after {covered}%")));
        }
        if !self.entries.iter().any(|&(t, _, end)| t == Task::Mlm && end == 100.0) {
            return Err(Error::config("MLM must be active at the end of training"));
        }
        Ok(())
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.entries
            .iter()
            .map(|e| e.0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// First step at which `pct` percent of training has elapsed.
    pub fn boundary(pct: f64, max_steps: u64) -> u64 {
        (pct / 100.0 * max_steps as f64).round() as u64
    }

    /// Tasks active at `step`, in application order. An entry covers
    /// `[start, end)`, with an end of 100% inclusive.
    pub fn active_tasks(&self, step: u64, max_steps: u64) -> Vec<Task> {
        let mut active: Vec<Task> = self
            .entries
            .iter()
            .filter(|&&(_, start, end)| {
                Self::boundary(start, max_steps) <= step && (end >= 100.0 || step < Self::boundary(end, max_steps))
            })
            .map(|e| e.0)
            .collect();
        active.sort();
        active
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows_are_valid() {
        for (name, s) in ObjectiveSchedule::presets() {
            s.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn active_sets() {
        let two = ObjectiveSchedule::sequential_two_task();
        assert_eq!(two.active_tasks(5_000, 100_000), vec![Task::Pos10]);
        assert_eq!(two.active_tasks(12_500, 100_000), vec![Task::Mlm]);
        let three = ObjectiveSchedule::sequential_three_task();
        assert_eq!(three.active_tasks(8_000, 100_000), vec![Task::Pos10]);
        assert_eq!(three.active_tasks(1, 100_000), vec![Task::Pos3]);
        let (_, mt) = &ObjectiveSchedule::presets()[2];
        assert_eq!(mt.active_tasks(50_000, 100_000), vec![Task::Pos10, Task::Mlm]);
        assert_eq!(mt.active_tasks(100_000, 100_000), vec![Task::Pos10, Task::Mlm]);
    }

    #[test]
    fn gaps_and_overlaps_are_rejected() {
        let gap = ObjectiveSchedule::new(
            ObjectiveMode::Sequential,
            vec![(Task::Pos10, 0.0, 10.0), (Task::Mlm, 12.5, 100.0)],
        );
        assert!(gap.is_err());
        let overlap = ObjectiveSchedule::new(
            ObjectiveMode::Sequential,
            vec![(Task::Pos10, 0.0, 20.0), (Task::Mlm, 12.5, 100.0)],
        );
        assert!(overlap.is_err());
        let no_mlm = ObjectiveSchedule::new(ObjectiveMode::Multitask, vec![(Task::Pos10, 0.0, 100.0)]);
        assert!(no_mlm.is_err());
    }

    #[test]
    fn json_shape() {
        let s: ObjectiveSchedule =
            serde_json::from_str(r#"{"mode":"sequential","entries":[["POS10",0,12.5],["MLM",12.5,100]]}"#).unwrap();
        assert_eq!(s, ObjectiveSchedule::sequential_two_task());
    }
}
