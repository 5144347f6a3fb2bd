use ndarray::{Array2, ArrayView2, ShapeBuilder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LobsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Probe,
}

/// Labelled samples stored one per column (`dim x len`, column-major).
#[derive(Clone, Debug)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.ncols() == 0 {
            return Err(LobsError::Precondition("dataset must contain at least one sample".into()));
        }
        if inputs.ncols() != labels.len() {
            return Err(LobsError::Precondition(format!(
                "{} input columns but {} labels",
                inputs.ncols(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(LobsError::Precondition(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        // Column-major so each sample is contiguous.
        let inputs = if inputs.t().is_standard_layout() {
            inputs
        } else {
            let mut f = Array2::zeros(inputs.raw_dim().f());
            f.assign(&inputs);
            f
        };
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers the given sample columns into a fresh `dim x indices.len()` batch.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let d = self.dim();
        let src = self.inputs.as_slice_memory_order().expect("column-major storage");
        let mut data = Vec::with_capacity(d * indices.len());
        for &j in indices {
            data.extend_from_slice(&src[j * d..(j + 1) * d]);
        }
        let batch = Array2::from_shape_vec((d, indices.len()).f(), data).expect("batch shape");
        (batch, indices.iter().map(|&j| self.labels[j]).collect())
    }

    /// Subset at `indices` with a new split tag.
    pub fn select(&self, indices: &[usize], split: Split) -> Dataset {
        let (inputs, labels) = self.gather(indices);
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
            split,
        }
    }

    /// First `count` samples (all of them if `count >= len`).
    pub fn head(&self, count: usize) -> Dataset {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        self.select(&idx, self.split)
    }

    /// Seeded uniform subsample without replacement, tagged as a probe set.
    pub fn probe(&self, count: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(count.min(self.len()));
        idx.sort_unstable();
        self.select(&idx, Split::Probe)
    }
}
