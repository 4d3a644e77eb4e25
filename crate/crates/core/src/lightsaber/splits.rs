use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("{split} split would hold no {class} members")]
    DegenerateSplit {
        split: &'static str,
        class: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitOptions {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratify: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            ratios: [0.7, 0.15, 0.15],
            seed: 0,
            stratify: true,
        }
    }
}

/// Disjoint train/validation/test row indices covering `0..N`, each list ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

/// Largest-remainder apportionment of `total` by `weights` (ties go to the earlier slot).
fn apportion(total: usize, weights: [f64; 3]) -> [usize; 3] {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out = [0usize; 3];
    for i in 0..3 {
        out[i] = exact[i].floor() as usize;
    }
    let mut left = total - out.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

impl DatasetSplits {
    pub fn new(labels: &[u8], options: &SplitOptions) -> Result<Self, SplitError> {
        let ratios = options.ratios;
        if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SplitError::InvalidRatios(ratios));
        }
        let n = labels.len();
        let sizes = apportion(n, ratios);
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut parts: [Vec<usize>; 3] = Default::default();

        if options.stratify {
            let mut positives: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
            let mut negatives: Vec<usize> = (0..n).filter(|&i| labels[i] != 1).collect();
            let pos_quota = apportion(positives.len(), sizes.map(|s| s as f64));
            const NAMES: [&str; 3] = ["train", "validation", "test"];
            for s in 0..3 {
                if pos_quota[s] == 0 {
                    return Err(SplitError::DegenerateSplit {
                        split: NAMES[s],
                        class: "positive",
                    });
                }
                if sizes[s] - pos_quota[s] == 0 {
                    return Err(SplitError::DegenerateSplit {
                        split: NAMES[s],
                        class: "negative",
                    });
                }
            }
            positives.shuffle(&mut rng);
            negatives.shuffle(&mut rng);
            let (mut p, mut q) = (positives.into_iter(), negatives.into_iter());
            for s in 0..3 {
                parts[s].extend(p.by_ref().take(pos_quota[s]));
                parts[s].extend(q.by_ref().take(sizes[s] - pos_quota[s]));
            }
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            let mut it = all.into_iter();
            for s in 0..3 {
                parts[s].extend(it.by_ref().take(sizes[s]));
            }
        }
        for part in &mut parts {
            part.sort_unstable();
        }
        let [train, validation, test] = parts;
        Ok(Self {
            train,
            validation,
            test,
            seed: options.seed,
            ratios,
        })
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_rows_eighty_ten_ten() {
        let labels = [0, 1, 0, 0, 1, 0, 0, 1, 0, 0];
        let opts = SplitOptions {
            ratios: [0.8, 0.1, 0.1],
            seed: 1,
            stratify: false,
        };
        let s = DatasetSplits::new(&labels, &opts).unwrap();
        assert_eq!(s.sizes(), (8, 1, 1));
        assert_eq!(s, DatasetSplits::new(&labels, &opts).unwrap());
        let mut all: Vec<usize> = [s.train, s.validation, s.test].concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn stratification_needs_both_classes_everywhere() {
        let labels = [0, 1, 0, 0, 1, 0, 0, 1, 0, 0];
        let opts = SplitOptions {
            ratios: [0.8, 0.1, 0.1],
            seed: 1,
            stratify: true,
        };
        assert!(matches!(
            DatasetSplits::new(&labels, &opts),
            Err(SplitError::DegenerateSplit { .. })
        ));
    }

    #[test]
    fn rejects_bad_ratios() {
        let opts = SplitOptions {
            ratios: [0.5, 0.5, 0.5],
            ..Default::default()
        };
        assert!(matches!(
            DatasetSplits::new(&[0, 1], &opts),
            Err(SplitError::InvalidRatios(_))
        ));
    }

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(apportion(7, [1.0, 1.0, 1.0]), [3, 2, 2]);
        assert_eq!(apportion(0, [0.7, 0.15, 0.15]), [0, 0, 0]);
    }
}
