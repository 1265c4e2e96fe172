//! Synthetic "aging anatomy" populations.
//!
//! Each subject is a disc-shaped brain with a cortical ring, a central
//! ventricle that grows with age, two hippocampus blobs that shrink with
//! age and a midline bar. Sex scales every structure. A random smooth
//! diffeomorphism gives each subject its own shape; labels are evaluated
//! exactly by pulling the analytic shape back through that map.

mod dataset;
mod shapes;

pub use dataset::{load_dataset, save_dataset, split, Dataset, Split, Subject, SubjectMeta};
pub use shapes::{
    closed_loop_population, generate_population, generate_subject, generate_subject_at, ClosedLoop, PopulationSpec,
    Shape,
};

/// Label vocabulary of the generated populations.
pub const LABEL_NAMES: [&str; 5] = ["background", "cortex", "ventricle", "hippocampus", "midline"];
pub const VENTRICLE: usize = 2;
pub const HIPPOCAMPUS: usize = 3;

#[cfg(test)]
mod tests;
