use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{split_sizes, Partition, VerticalDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskMode {
    /// Class-incremental: each task introduces new classes.
    #[serde(rename = "CIL")]
    Cil,
    /// Feature-incremental: each task widens every party's feature view.
    #[serde(rename = "FIL")]
    Fil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub task_id: usize,
    pub mode: TaskMode,
    /// Classes whose samples this task exposes.
    pub class_set: Vec<usize>,
    /// Per-party visible columns (global column indices, a prefix of the
    /// party's block).
    pub feature_view: Vec<Vec<usize>>,
    pub epochs: usize,
    pub batch_size: usize,
}

impl TaskDescriptor {
    pub fn has_class(&self, c: usize) -> bool {
        self.class_set.binary_search(&c).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    tasks: Vec<TaskDescriptor>,
}

impl TaskSchedule {
    pub fn new(tasks: Vec<TaskDescriptor>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::config("n_tasks", "schedule has no tasks"));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.task_id != i {
                return Err(Error::config("schedule", format!("task {i} has id {}", t.task_id)));
            }
            if t.epochs == 0 || t.batch_size == 0 {
                return Err(Error::config("schedule", format!("task {i} has zero epochs or batch size")));
            }
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[TaskDescriptor] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes seen in tasks `0..=t`, ascending.
    pub fn classes_up_to(&self, t: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.tasks[..=t]
            .iter()
            .flat_map(|d| d.class_set.iter().copied())
            .collect();
        set.into_iter().collect()
    }
}

/// Splits `n_classes` into `n_tasks` contiguous groups (ceiling sizes first).
pub fn make_cil_schedule(
    n_classes: usize,
    n_tasks: usize,
    partition: &Partition,
    plan: TrainingPlan,
) -> Result<TaskSchedule> {
    if n_tasks == 0 {
        return Err(Error::config("n_tasks", "must be at least 1"));
    }
    if n_tasks > n_classes {
        return Err(Error::config(
            "n_tasks",
            format!("{n_tasks} CIL tasks need at least as many classes, got {n_classes}"),
        ));
    }
    let mut start = 0;
    let tasks = split_sizes(n_classes, n_tasks)
        .into_iter()
        .enumerate()
        .map(|(task_id, size)| {
            let class_set = (start..start + size).collect();
            start += size;
            TaskDescriptor {
                task_id,
                mode: TaskMode::Cil,
                class_set,
                feature_view: partition.blocks().to_vec(),
                epochs: plan.epochs,
                batch_size: plan.batch_size,
            }
        })
        .collect();
    TaskSchedule::new(tasks)
}

/// Number of columns visible at task `t` out of `n_columns`: `⌈(t+1)·n/T⌉`.
pub fn fil_view_size(n_columns: usize, t: usize, n_tasks: usize) -> usize {
    ((t + 1) * n_columns).div_ceil(n_tasks)
}

/// Every task sees all classes; each party's view grows cumulatively.
pub fn make_fil_schedule(
    partition: &Partition,
    n_classes: usize,
    n_tasks: usize,
    plan: TrainingPlan,
) -> Result<TaskSchedule> {
    if n_tasks == 0 {
        return Err(Error::config("n_tasks", "must be at least 1"));
    }
    let tasks = (0..n_tasks)
        .map(|task_id| TaskDescriptor {
            task_id,
            mode: TaskMode::Fil,
            class_set: (0..n_classes).collect(),
            feature_view: partition
                .blocks()
                .iter()
                .map(|b| b[..fil_view_size(b.len(), task_id, n_tasks)].to_vec())
                .collect(),
            epochs: plan.epochs,
            batch_size: plan.batch_size,
        })
        .collect();
    TaskSchedule::new(tasks)
}

/// Stratified held-out split: per class, `round(test_fraction · count)`
/// samples go to test (at least one when the class has two or more).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    is_test: Vec<bool>,
}

impl DataSplit {
    pub fn stratified<R: Rng + ?Sized>(
        labels: &[usize],
        n_classes: usize,
        test_fraction: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::config("test_fraction", "must lie in [0, 1)"));
        }
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut is_test = vec![false; labels.len()];
        for members in &mut by_class {
            members.shuffle(rng);
            let mut n_test = (test_fraction * members.len() as f64).round() as usize;
            if test_fraction > 0.0 && members.len() >= 2 {
                n_test = n_test.clamp(1, members.len() - 1);
            }
            for &i in &members[..n_test] {
                is_test[i] = true;
            }
        }
        Ok(Self { is_test })
    }

    pub fn is_test(&self, i: usize) -> bool {
        self.is_test[i]
    }
}

/// The only route by which training code reaches samples of a task: rows
/// restricted to the task's classes and split, columns to its feature view.
#[derive(Debug, Clone)]
pub struct TaskView<'a> {
    dataset: &'a VerticalDataset,
    task: &'a TaskDescriptor,
    train_rows: Vec<usize>,
    test_rows: Vec<usize>,
}

impl<'a> TaskView<'a> {
    pub fn new(
        dataset: &'a VerticalDataset,
        split: &DataSplit,
        task: &'a TaskDescriptor,
    ) -> Result<Self> {
        if task.feature_view.len() != dataset.partition().n_parties() {
            return Err(Error::config(
                "schedule",
                format!(
                    "task {} has views for {} parties, dataset has {}",
                    task.task_id,
                    task.feature_view.len(),
                    dataset.partition().n_parties()
                ),
            ));
        }
        for (k, view) in task.feature_view.iter().enumerate() {
            let block = dataset.partition().block(k);
            if view.is_empty() || view.iter().any(|c| !block.contains(c)) {
                return Err(Error::config(
                    "schedule",
                    format!("task {} view for party {k} is not inside its block", task.task_id),
                ));
            }
        }
        let labels = dataset.label_view();
        let (mut train_rows, mut test_rows) = (Vec::new(), Vec::new());
        for (i, &y) in labels.all().iter().enumerate() {
            if !task.has_class(y) {
                continue;
            }
            if split.is_test(i) {
                test_rows.push(i);
            } else {
                train_rows.push(i);
            }
        }
        Ok(Self {
            dataset,
            task,
            train_rows,
            test_rows,
        })
    }

    pub fn task(&self) -> &TaskDescriptor {
        self.task
    }

    pub fn dataset(&self) -> &VerticalDataset {
        self.dataset
    }

    pub fn train_rows(&self) -> &[usize] {
        &self.train_rows
    }

    pub fn test_rows(&self) -> &[usize] {
        &self.test_rows
    }

    pub fn view(&self, party: usize) -> &[usize] {
        &self.task.feature_view[party]
    }

    /// Shuffled training mini-batches for one epoch.
    pub fn epoch_batches<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let mut rows = self.train_rows.clone();
        rows.shuffle(rng);
        rows.chunks(self.task.batch_size).map(<[usize]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::partition_vertically;

    const PLAN: TrainingPlan = TrainingPlan {
        epochs: 1,
        batch_size: 4,
    };

    fn classes(s: &TaskSchedule) -> Vec<Vec<usize>> {
        s.tasks().iter().map(|t| t.class_set.clone()).collect()
    }

    #[test]
    fn cil_ten_classes_four_tasks() {
        let p = partition_vertically(4, 2).unwrap();
        let s = make_cil_schedule(10, 4, &p, PLAN).unwrap();
        assert_eq!(
            classes(&s),
            vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7], vec![8, 9]]
        );
        assert_eq!(s.classes_up_to(1), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn cil_degenerate_cases() {
        let p = partition_vertically(4, 2).unwrap();
        let s = make_cil_schedule(4, 4, &p, PLAN).unwrap();
        assert_eq!(classes(&s), vec![vec![0], vec![1], vec![2], vec![3]]);
        let s = make_cil_schedule(2, 1, &p, PLAN).unwrap();
        assert_eq!(classes(&s), vec![vec![0, 1]]);
        assert!(matches!(make_cil_schedule(3, 4, &p, PLAN), Err(Error::Config { .. })));
    }

    #[test]
    fn fil_view_sizes() {
        let sizes = |n| (0..4).map(|t| fil_view_size(n, t, 4)).collect::<Vec<_>>();
        assert_eq!(sizes(4), vec![1, 2, 3, 4]);
        assert_eq!(sizes(6), vec![2, 3, 5, 6]);
        assert_eq!(fil_view_size(5, 0, 1), 5);
        // fewer columns than tasks still yields a non-empty view
        assert_eq!(sizes(2), vec![1, 1, 2, 2]);
    }

    #[test]
    fn fil_schedule_is_cumulative() {
        let p = partition_vertically(10, 2).unwrap();
        let s = make_fil_schedule(&p, 3, 4, PLAN).unwrap();
        for pair in s.tasks().windows(2) {
            for k in 0..2 {
                let (a, b) = (&pair[0].feature_view[k], &pair[1].feature_view[k]);
                assert!(a.len() <= b.len());
                assert_eq!(&b[..a.len()], &a[..]);
            }
        }
        assert_eq!(s.tasks()[3].feature_view, p.blocks().to_vec());
        assert!(s.tasks().iter().all(|t| t.class_set == vec![0, 1, 2]));
    }

    #[test]
    fn stratified_split_takes_a_fifth_per_class() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let mut rng = crate::rng::stream_rng(1, crate::rng::Stream::Split, 0);
        let split = DataSplit::stratified(&labels, 4, 0.2, &mut rng).unwrap();
        for c in 0..4 {
            let n = (0..100).filter(|&i| labels[i] == c && split.is_test(i)).count();
            assert_eq!(n, 5);
        }
    }
}
