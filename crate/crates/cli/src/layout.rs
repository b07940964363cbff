//! Fixed file layout of a pipeline workspace.

use std::path::{Path, PathBuf};

use memmcl_core::TaskGroup;

use crate::error::CliError;

pub const DATASETS: &str = "datasets";
pub const EXPERTS: &str = "experts";
pub const WEAK: &str = "weak";
pub const MERGED: &str = "merged";
pub const CURRICULUM: &str = "curriculum";
pub const REPORTS: &str = "reports";

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn at(&self, dir: &str, file: impl AsRef<Path>) -> PathBuf {
        self.root.join(dir).join(file)
    }

    /// Creates `dir` under the root if needed.
    pub fn ensure(&self, dir: &str) -> Result<PathBuf, CliError> {
        let path = self.root.join(dir);
        std::fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn registry(&self) -> PathBuf {
        self.at(DATASETS, "registry.json")
    }

    pub fn train_split(&self, task: &str) -> PathBuf {
        self.at(DATASETS, format!("{task}.train.jsonl"))
    }

    pub fn test_split(&self, task: &str) -> PathBuf {
        self.at(DATASETS, format!("{task}.test.jsonl"))
    }

    pub fn base_model(&self) -> PathBuf {
        self.at(EXPERTS, "base.emcp")
    }

    pub fn adapter(&self, task: &str) -> PathBuf {
        self.at(EXPERTS, format!("{task}.adapter.emcp"))
    }

    pub fn expert(&self, task: &str) -> PathBuf {
        self.at(EXPERTS, format!("{task}.expert.emcp"))
    }

    /// Expert path relative to the root, as written into merge recipes.
    pub fn expert_rel(task: &str) -> PathBuf {
        Path::new(EXPERTS).join(format!("{task}.expert.emcp"))
    }

    pub fn loss_history(&self, task: &str) -> PathBuf {
        self.at(EXPERTS, format!("{task}.loss.csv"))
    }

    pub fn training_summary(&self) -> PathBuf {
        self.at(EXPERTS, "summary.csv")
    }

    pub fn weak_set(&self, task: &str) -> PathBuf {
        self.at(WEAK, format!("{task}.jsonl"))
    }

    pub fn weak_fallback(&self, task: &str) -> PathBuf {
        self.at(WEAK, format!("{task}.fallback.jsonl"))
    }

    pub fn weak_summary(&self) -> PathBuf {
        self.at(WEAK, "summary.csv")
    }

    pub fn group_model(&self, group: TaskGroup) -> PathBuf {
        self.at(MERGED, format!("{group}.emcp"))
    }

    pub fn group_model_rel(group: TaskGroup) -> PathBuf {
        Path::new(MERGED).join(format!("{group}.emcp"))
    }

    pub fn final_model(&self) -> PathBuf {
        self.at(MERGED, "final.emcp")
    }

    pub fn merge_history(&self) -> PathBuf {
        self.at(MERGED, "history.csv")
    }

    /// `merged/{name}.recipe.json`.
    pub fn recipe(&self, name: &str) -> PathBuf {
        self.at(MERGED, format!("{name}.recipe.json"))
    }

    pub fn fitness(&self) -> PathBuf {
        self.at(MERGED, "fitness.csv")
    }

    pub fn plan(&self) -> PathBuf {
        self.at(CURRICULUM, "plan.csv")
    }

    pub fn exemplars(&self) -> PathBuf {
        self.at(CURRICULUM, "exemplars.txt")
    }

    pub fn evaluation(&self) -> PathBuf {
        self.at(REPORTS, "eval.csv")
    }

    pub fn comparison(&self) -> PathBuf {
        self.at(REPORTS, "comparison.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.at(REPORTS, "summary.txt")
    }
}

/// Fails with [`CliError::MissingInput`] unless `path` exists.
pub fn require(path: &Path) -> Result<&Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}
