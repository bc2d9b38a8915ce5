//! The `explore` configuration file. See `explore.example.toml` at the
//! repository root for an annotated example. Relative paths are resolved
//! against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use cnn_dse::dataset::{load_idx, load_matrix_text, take, Dataset};
use cnn_dse::explorer::{Boundaries, Datasets, PipelineConfig};
use cnn_dse::{Error, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreFile {
    #[serde(default = "one")]
    pub workers: usize,
    pub data: DataSection,
    #[serde(default)]
    pub boundaries: Boundaries,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub cost: CostSection,
}

fn one() -> usize {
    1
}

fn default_matrix_side() -> usize {
    16
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `[images, labels]` IDX pair or a single text matrix.
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub secondary: Option<Vec<PathBuf>>,
    #[serde(default = "default_matrix_side")]
    pub matrix_side: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub secondary_limit: Option<usize>,
    #[serde(default = "one_u64")]
    pub subset_seed: u64,
}

fn one_u64() -> u64 {
    1
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    /// Calibration CSV; the bundled measurements are used when absent.
    pub calibration: Option<PathBuf>,
}

impl ExploreFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut cfg: ExploreFile = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let d = &mut cfg.data;
        for p in d
            .train
            .iter_mut()
            .chain(d.test.iter_mut())
            .chain(d.secondary.iter_mut().flatten())
        {
            *p = base.join(&*p);
        }
        if let Some(c) = &mut cfg.cost.calibration {
            *c = base.join(&*c);
        }
        cfg.pipeline.train.validate()?;
        Ok(cfg)
    }
}

impl DataSection {
    fn load_one(&self, paths: &[PathBuf], limit: Option<usize>) -> Result<Dataset> {
        let data = match paths {
            [images, labels] => load_idx(images, labels)?,
            [matrix] => load_matrix_text(matrix, self.matrix_side)?,
            _ => {
                return Err(Error::Argument(format!(
                    "a dataset is one text matrix or an [images, labels] pair, got {} paths",
                    paths.len()
                )))
            }
        };
        match limit {
            Some(n) if n < data.len() => take(&data, n, self.subset_seed),
            _ => Ok(data),
        }
    }

    pub fn load(&self) -> Result<Datasets> {
        let train = self.load_one(&self.train, self.train_limit)?;
        let test = self.load_one(&self.test, self.test_limit)?;
        train.ensure_non_empty()?;
        test.ensure_non_empty()?;
        let secondary = self
            .secondary
            .as_deref()
            .map(|p| self.load_one(p, self.secondary_limit))
            .transpose()?;
        Ok(Datasets { train, test, secondary })
    }
}

/// Placeholder datasets for a space with no points; nothing reads them.
pub fn empty_datasets() -> Datasets {
    let empty = || Dataset {
        name: String::new(),
        side: cnn_dse::model::DEFAULT_INPUT_SIDE,
        images: Vec::new(),
    };
    Datasets {
        train: empty(),
        test: empty(),
        secondary: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotated_example_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../explore.example.toml");
        let cfg = ExploreFile::load(&path).unwrap();
        assert_eq!(cfg.boundaries, Boundaries::default());
        assert_eq!(cfg.pipeline, PipelineConfig::default());
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.data.train.len(), 2);
        assert!(cfg.data.train[0].ends_with("data/mnist/train-images-idx3-ubyte"));
        assert_eq!((cfg.data.train_limit, cfg.data.test_limit), (Some(10_000), Some(1_000)));
    }
}
