//! Vertically partitioned datasets and continual task schedules.

mod csv_io;
mod dataset;
mod schedule;
mod synthetic;

pub use csv_io::{load_csv, write_csv, PartitionSpec};
pub use dataset::{partition_vertically, LabelView, Partition, PartyFeatures, VerticalDataset};
pub use schedule::{
    fil_view_size, make_cil_schedule, make_fil_schedule, DataSplit, TaskDescriptor, TaskMode,
    TaskSchedule, TaskView, TrainingPlan,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};
