pub mod analysis;
pub mod data;
pub mod explain;
pub mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use yieldxai::data::{read_dataset, Dataset, PixelSample, Split, SplitAssignment};
use yieldxai::model::MultimodalModel;
use yieldxai::training::normalize_for;
use yieldxai::xai::Baseline;

use crate::error::CliError;

pub const MODEL_FILE: &str = "model.ymck";
pub const SPLIT_FILE: &str = "split.json";
pub const DEFAULT_DATA_DIR: &str = "data";
pub const DEFAULT_TRAIN_DIR: &str = "runs/train";

pub fn default_model() -> PathBuf {
    Path::new(DEFAULT_TRAIN_DIR).join(MODEL_FILE)
}

/// Samples a command reads from the split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
    /// Test, or validation when the split holds no test fields.
    #[default]
    Heldout,
    All,
}

/// A checkpoint, the dataset it is applied to and the split it was trained on.
pub struct Inputs {
    pub model: MultimodalModel,
    pub dataset: Dataset,
    pub split: SplitAssignment,
}

/// Split stored next to `model` unless given explicitly.
pub fn split_path(split: Option<&Path>, model: &Path) -> PathBuf {
    split.map(Path::to_path_buf).unwrap_or_else(|| model.with_file_name(SPLIT_FILE))
}

pub fn load_split(path: &Path) -> Result<SplitAssignment, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("missing file: {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("malformed split {}: {e}", path.display())))
}

impl Inputs {
    pub fn load(model: &Path, data: &Path, split: &Path) -> Result<Self, CliError> {
        let model = MultimodalModel::load(model)?;
        let split = load_split(split)?;
        let dataset = read_dataset(data)?;
        Ok(Self { model, dataset, split })
    }

    /// Raw samples of `which`; never empty.
    pub fn subset(&self, which: Subset) -> Result<Vec<&PixelSample>, CliError> {
        let pick = |s: Split| self.dataset.subset(&self.split, s);
        let out = match which {
            Subset::Train => pick(Split::Train),
            Subset::Val => pick(Split::Val),
            Subset::Test => pick(Split::Test),
            Subset::Heldout => {
                let test = pick(Split::Test);
                if test.is_empty() {
                    pick(Split::Val)
                } else {
                    test
                }
            }
            Subset::All => self.dataset.samples.iter().collect(),
        };
        if out.is_empty() {
            return Err(CliError::Data(format!("the {which:?} subset of the split is empty")));
        }
        Ok(out)
    }

    pub fn normalize(&self, samples: &[&PixelSample]) -> Vec<PixelSample> {
        normalize_for(&self.model, samples)
    }

    /// Per-channel means of the normalized training split.
    pub fn baseline(&self) -> Result<Baseline, CliError> {
        let train = self.normalize(&self.subset(Subset::Train)?);
        Ok(Baseline::from_samples(&train)?)
    }
}
