use serde::{Deserialize, Serialize};

use super::dataset::DatasetManifest;
use super::OrchestratorError;
use crate::hashing::task_seed;

/// One augmented output to produce: replica `replica_idx` of `image_id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugTask {
    pub image_id: String,
    pub replica_idx: u32,
    pub task_seed: u64,
}

/// `k` tasks per dataset entry, ordered by image id then replica index.
pub fn plan(
    dataset: &DatasetManifest,
    k: u32,
    global_seed: u64,
) -> Result<Vec<AugTask>, OrchestratorError> {
    if k == 0 {
        return Err(OrchestratorError::ZeroScale);
    }
    dataset.validate()?;
    let mut ids: Vec<&str> = dataset
        .entries
        .iter()
        .map(|e| e.image_id.as_str())
        .collect();
    ids.sort_unstable();
    let mut tasks = Vec::with_capacity(ids.len() * k as usize);
    for id in ids {
        for replica_idx in 0..k {
            tasks.push(AugTask {
                image_id: id.to_owned(),
                replica_idx,
                task_seed: task_seed(global_seed, id, replica_idx),
            });
        }
    }
    Ok(tasks)
}
