//! Sliding-window perplexity and multiple-choice log-likelihood accuracy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::McItem;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_WINDOW: usize = 1024;
pub const DEFAULT_STRIDE: usize = 512;

/// Anything that maps a token sequence to `[T × V]` next-token logits.
pub trait LogitModel {
    fn vocab_size(&self) -> usize;

    fn logits(&self, ids: &[u32]) -> Result<Tensor<f64>>;
}

impl<T: Scalar> LogitModel for Model<'_, T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn logits(&self, ids: &[u32]) -> Result<Tensor<f64>> {
        let out = Model::logits(self, ids)?;
        Ok(out.cast())
    }
}

fn log_prob(row: &[f64], target: u32) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target as usize] - lse
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Perplexity,
    McAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Sum of continuation log-probabilities.
    #[default]
    Sum,
    /// Mean log-probability per continuation token.
    PerToken,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Sum => "sum",
            Normalization::PerToken => "per_token",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Normalization::Sum),
            "per_token" => Ok(Normalization::PerToken),
            other => Err(Error::Input(format!("unknown normalization `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub metric: MetricKind,
    pub value: f64,
    /// Scored tokens (perplexity) or scored items (accuracy).
    pub count: usize,
    #[serde(default)]
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    /// Index, reason for every skipped item.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub item_errors: Vec<(usize, String)>,
}

/// Half-open input spans `[begin, end)` and the first target each one
/// scores. Window `i` starts at `i·stride`; its last row predicts token
/// `end`, and only targets not scored by an earlier window count, so every
/// position `1..n` is scored exactly once.
pub fn perplexity_windows(n: usize, window: usize, stride: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut next = 1;
    let mut begin = 0;
    while next < n {
        let end = (begin + window).min(n - 1);
        if end + 1 > next {
            out.push((begin, end, next));
            next = end + 1;
        }
        begin += stride;
    }
    out
}

/// Perplexity of `stream` under `model`.
pub fn perplexity(
    model: &impl LogitModel,
    dataset: &str,
    stream: &[u32],
    window: usize,
    stride: usize,
) -> Result<EvalReport> {
    if stream.len() < 2 {
        return Err(Error::Input(format!(
            "perplexity needs at least 2 tokens, got {}",
            stream.len()
        )));
    }
    if window < 2 || stride == 0 || stride > window {
        return Err(Error::Input(format!(
            "need window >= 2 and 1 <= stride <= window, got window {window}, stride {stride}"
        )));
    }
    let mut nll = 0.0;
    let mut scored = 0usize;
    for (begin, end, first) in perplexity_windows(stream.len(), window, stride) {
        let logits = model.logits(&stream[begin..end])?;
        for target in first..=end {
            nll -= log_prob(logits.row(target - 1 - begin), stream[target]);
            scored += 1;
        }
    }
    debug_assert_eq!(scored, stream.len() - 1);
    Ok(EvalReport {
        dataset: dataset.to_string(),
        metric: MetricKind::Perplexity,
        value: (nll / scored as f64).exp(),
        count: scored,
        skipped: 0,
        window: Some(window),
        stride: Some(stride),
        normalization: None,
        item_errors: Vec::new(),
    })
}

/// Option scores for one item. Unscorable items give an input error.
pub fn score_options(model: &impl LogitModel, item: &McItem, norm: Normalization) -> Result<Vec<f64>> {
    if item.context.is_empty() {
        return Err(Error::Input("item has an empty context".into()));
    }
    if item.options.len() < 2 {
        return Err(Error::Input("item needs at least two options".into()));
    }
    let mut scores = Vec::with_capacity(item.options.len());
    for (o, cont) in item.options.iter().enumerate() {
        if cont.is_empty() {
            return Err(Error::Input(format!("option {o} has an empty continuation")));
        }
        let ids: Vec<u32> = item.context.iter().chain(cont).copied().collect();
        let logits = model.logits(&ids[..ids.len() - 1])?;
        let c = item.context.len();
        let total: f64 = cont
            .iter()
            .enumerate()
            .map(|(j, &t)| log_prob(logits.row(c + j - 1), t))
            .sum();
        scores.push(match norm {
            Normalization::Sum => total,
            Normalization::PerToken => total / cont.len() as f64,
        });
    }
    Ok(scores)
}

/// Argmax with ties resolved to the lowest index.
pub fn predict(scores: &[f64]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s > scores[best] { i } else { best })
}

pub fn mc_accuracy(
    model: &impl LogitModel,
    dataset: &str,
    items: &[McItem],
    norm: Normalization,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Input("no multiple-choice items".into()));
    }
    let mut correct = 0usize;
    let mut scored = 0usize;
    let mut item_errors = Vec::new();
    for (i, item) in items.iter().enumerate() {
        match score_options(model, item, norm) {
            Ok(scores) => {
                scored += 1;
                if predict(&scores) == item.gold {
                    correct += 1;
                }
            }
            Err(e @ Error::Input(_)) => item_errors.push((i, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        dataset: dataset.to_string(),
        metric: MetricKind::McAccuracy,
        value: if scored == 0 {
            0.0
        } else {
            correct as f64 / scored as f64
        },
        count: scored,
        skipped: item_errors.len(),
        window: None,
        stride: None,
        normalization: Some(norm),
        item_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParameterStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Logits from a fixed function of `(position, previous token)`.
    struct TableModel<F: Fn(usize, u32) -> Vec<f64>> {
        vocab: usize,
        f: F,
    }

    impl<F: Fn(usize, u32) -> Vec<f64>> LogitModel for TableModel<F> {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn logits(&self, ids: &[u32]) -> Result<Tensor<f64>> {
            let data = ids.iter().enumerate().flat_map(|(i, &t)| (self.f)(i, t)).collect();
            Ok(Tensor::matrix(ids.len(), self.vocab, data))
        }
    }

    struct Shifted<'a, M>(&'a M, f64);

    impl<M: LogitModel> LogitModel for Shifted<'_, M> {
        fn vocab_size(&self) -> usize {
            self.0.vocab_size()
        }

        fn logits(&self, ids: &[u32]) -> Result<Tensor<f64>> {
            Ok(self.0.logits(ids)?.map(|v| v + self.1))
        }
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let m = TableModel {
            vocab: 33,
            f: |_, _| vec![0.0; 33],
        };
        let stream: Vec<u32> = (0..100).map(|i| i % 33).collect();
        let r = perplexity(&m, "u", &stream, 16, 8).unwrap();
        assert!((r.value - 33.0).abs() < 1e-3);
        assert_eq!(r.count, 99);
    }

    #[test]
    fn windows_score_each_target_once() {
        for n in [2usize, 3, 10, 37] {
            for w in 2..12 {
                for s in 1..=w {
                    let mut hits = vec![0; n];
                    for (begin, end, first) in perplexity_windows(n, w, s) {
                        assert!(end - begin <= w && first > begin);
                        for t in first..=end {
                            hits[t] += 1;
                        }
                    }
                    assert_eq!(hits[0], 0);
                    assert!(hits[1..].iter().all(|&h| h == 1), "n={n} w={w} s={s}");
                }
            }
        }
    }

    #[test]
    fn stride_invariant_when_window_covers_stream() {
        let c = ModelConfig::toy(33, 16, 24, 2, 2);
        let p = ParameterStore::<f64>::random(&c, 3, 0.2).unwrap();
        let m = Model::new(&c, &p);
        let stream: Vec<u32> = (0..40).map(|i| (i * 7 % 33) as u32).collect();
        let a = perplexity(&m, "s", &stream, 64, 1).unwrap().value;
        let b = perplexity(&m, "s", &stream, 64, 64).unwrap().value;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = TableModel {
            vocab: 4,
            f: |_, _| vec![0.0; 4],
        };
        assert!(perplexity(&m, "x", &[1], 8, 4).is_err());
        assert!(perplexity(&m, "x", &[1, 2], 1, 1).is_err());
        assert!(perplexity(&m, "x", &[1, 2], 4, 5).is_err());
        assert!(mc_accuracy(&m, "x", &[], Normalization::Sum).is_err());
    }

    #[test]
    fn identical_options_tie_to_first() {
        let m = TableModel {
            vocab: 5,
            f: |i, t| (0..5).map(|v| ((i + t as usize + v) % 3) as f64).collect(),
        };
        let item = McItem {
            context: vec![1, 2],
            options: vec![vec![3, 4], vec![3, 4]],
            gold: 1,
        };
        let r = mc_accuracy(&m, "tie", &[item], Normalization::Sum).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn next_token_table_gets_everything_right() {
        // Always prefers (prev + 1) mod V.
        let m = TableModel {
            vocab: 7,
            f: |_, t| (0..7).map(|v| if v == (t + 1) % 7 { 5.0 } else { 0.0 }).collect(),
        };
        let items: Vec<McItem> = (0..7)
            .map(|s| McItem {
                context: vec![s],
                options: vec![vec![(s + 3) % 7, (s + 4) % 7], vec![(s + 1) % 7, (s + 2) % 7]],
                gold: 1,
            })
            .collect();
        for norm in [Normalization::Sum, Normalization::PerToken] {
            assert_eq!(mc_accuracy(&m, "chain", &items, norm).unwrap().value, 1.0);
        }
    }

    #[test]
    fn empty_option_skips_item() {
        let m = TableModel {
            vocab: 4,
            f: |_, _| vec![0.0; 4],
        };
        let items = vec![
            McItem {
                context: vec![1],
                options: vec![vec![], vec![2]],
                gold: 0,
            },
            McItem {
                context: vec![1],
                options: vec![vec![2], vec![3]],
                gold: 0,
            },
        ];
        let r = mc_accuracy(&m, "e", &items, Normalization::Sum).unwrap();
        assert_eq!((r.count, r.skipped), (1, 1));
        assert_eq!(r.item_errors[0].0, 0);
    }

    #[test]
    fn logit_shift_changes_nothing() {
        let c = ModelConfig::toy(33, 16, 24, 2, 2);
        let p = ParameterStore::<f64>::random(&c, 4, 0.3).unwrap();
        let m = Model::new(&c, &p);
        let shifted = Shifted(&m, 17.5);
        let stream: Vec<u32> = (0..30).map(|i| (i * 5 % 33) as u32).collect();
        let a = perplexity(&m, "s", &stream, 8, 4).unwrap().value;
        let b = perplexity(&shifted, "s", &stream, 8, 4).unwrap().value;
        assert!((a - b).abs() < 1e-9 * a);
        let items: Vec<McItem> = (0..10)
            .map(|i| McItem {
                context: vec![32, i],
                options: vec![vec![i + 1], vec![i + 2, 3], vec![i + 3]],
                gold: 0,
            })
            .collect();
        for item in &items {
            let sa = score_options(&m, item, Normalization::PerToken).unwrap();
            let sb = score_options(&shifted, item, Normalization::PerToken).unwrap();
            assert_eq!(predict(&sa), predict(&sb));
        }
    }

    #[test]
    fn random_logits_are_near_chance() {
        let m = TableModel {
            vocab: 50,
            f: |i, t| {
                let mut rng = ChaCha8Rng::seed_from_u64((i as u64) << 32 | t as u64);
                (0..50).map(|_| rng.gen::<f64>() * 4.0).collect()
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let items: Vec<McItem> = (0..200)
            .map(|_| McItem {
                context: vec![rng.gen_range(0..50)],
                options: vec![vec![rng.gen_range(0..50)], vec![rng.gen_range(0..50)]],
                gold: rng.gen_range(0..2),
            })
            .collect();
        let acc = mc_accuracy(&m, "rand", &items, Normalization::Sum).unwrap().value;
        assert!((acc - 0.5).abs() <= 0.1, "{acc}");
    }
}
