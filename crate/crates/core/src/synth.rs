//! Seeded rule-based synthetic datasets for desk-scale training and tests.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::DatasetTable;
use crate::error::{FlatError, Result};
use crate::numkernel::Tensor;
use crate::rng::{stream, FlatRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleFamily {
    /// `x_a > x_b` on two random columns.
    PairCompare,
    /// Sign of one column against a cut point.
    Threshold,
    /// Sign of a random linear combination of 2 or 3 columns.
    Linear,
    /// Exclusive-or of two thresholded columns.
    Xor,
}

impl RuleFamily {
    pub const ALL: [RuleFamily; 4] = [RuleFamily::PairCompare, RuleFamily::Threshold, RuleFamily::Linear, RuleFamily::Xor];

    pub fn name(self) -> &'static str {
        match self {
            RuleFamily::PairCompare => "pair-compare",
            RuleFamily::Threshold => "threshold",
            RuleFamily::Linear => "linear",
            RuleFamily::Xor => "xor",
        }
    }
}

impl fmt::Display for RuleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RuleFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        RuleFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown rule family {s:?}; expected one of pair-compare, threshold, linear, xor"))
    }
}

/// A concrete labeling rule over raw feature values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rule {
    PairCompare { a: usize, b: usize },
    Threshold { column: usize, cut: f64, above: bool },
    Linear { weights: Vec<(usize, f64)>, bias: f64 },
    Xor { a: usize, cut_a: f64, b: usize, cut_b: f64 },
}

impl Rule {
    pub fn label(&self, row: &[f64]) -> usize {
        let positive = match self {
            Rule::PairCompare { a, b } => row[*a] > row[*b],
            Rule::Threshold { column, cut, above } => (row[*column] > *cut) == *above,
            Rule::Linear { weights, bias } => weights.iter().map(|(j, w)| w * row[*j]).sum::<f64>() + bias > 0.0,
            Rule::Xor { a, cut_a, b, cut_b } => (row[*a] > *cut_a) != (row[*b] > *cut_b),
        };
        positive as usize
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub table: DatasetTable,
    pub family: RuleFamily,
    pub rule: Rule,
}

/// Columns are `offset + scale * N(0, 1)`; cut points refer to the unit scale.
fn draw_rule(family: RuleFamily, n_cols: usize, rng: &mut FlatRng) -> Rule {
    let pair = sample(rng, n_cols, 2).into_vec();
    match family {
        RuleFamily::PairCompare => Rule::PairCompare { a: pair[0], b: pair[1] },
        RuleFamily::Threshold => Rule::Threshold { column: pair[0], cut: rng.gen_range(-0.5..0.5), above: rng.gen() },
        RuleFamily::Linear => {
            let k = if n_cols >= 3 { rng.gen_range(2..=3) } else { 2 };
            let cols = sample(rng, n_cols, k).into_vec();
            let weights = cols
                .into_iter()
                .map(|j| {
                    let mag: f64 = rng.gen_range(0.5..1.5);
                    (j, if rng.gen() { mag } else { -mag })
                })
                .collect();
            Rule::Linear { weights, bias: rng.gen_range(-0.3..0.3) }
        }
        RuleFamily::Xor => Rule::Xor { a: pair[0], cut_a: 0.0, b: pair[1], cut_b: 0.0 },
    }
}

/// One dataset of `n_rows` standard-normal rows labeled by a fresh rule of `family`.
/// Rules are drawn on the unit scale, then each column gets a random affine
/// rescaling so the raw values differ in location and spread.
pub fn generate(name: &str, family: RuleFamily, n_rows: usize, n_cols: usize, rng: &mut FlatRng) -> Result<SynthDataset> {
    if n_cols < 2 {
        return Err(FlatError::Config(format!("synthetic datasets need at least 2 columns, got {n_cols}")));
    }
    let rule = draw_rule(family, n_cols, rng);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let offsets: Vec<f64> = (0..n_cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let scales: Vec<f64> = (0..n_cols).map(|_| rng.gen_range(0.5..4.0)).collect();
    let mut data = Vec::with_capacity(n_rows * n_cols);
    let mut labels = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let z: Vec<f64> = (0..n_cols).map(|_| normal.sample(rng)).collect();
        labels.push(rule.label(&z));
        data.extend(z.iter().zip(&offsets).zip(&scales).map(|((v, o), s)| o + s * v));
    }
    let rule = rescale_rule(rule, &offsets, &scales);
    let table = DatasetTable::new(name, Tensor::matrix(n_rows, n_cols, data), labels)?;
    Ok(SynthDataset { table, family, rule })
}

/// Expresses a unit-scale rule in terms of the rescaled column values.
fn rescale_rule(rule: Rule, offsets: &[f64], scales: &[f64]) -> Rule {
    let to_raw = |j: usize, cut: f64| offsets[j] + scales[j] * cut;
    match rule {
        Rule::PairCompare { a, b } => Rule::Linear {
            weights: vec![(a, 1.0 / scales[a]), (b, -1.0 / scales[b])],
            bias: -offsets[a] / scales[a] + offsets[b] / scales[b],
        },
        Rule::Threshold { column, cut, above } => Rule::Threshold { column, cut: to_raw(column, cut), above },
        Rule::Linear { weights, bias } => {
            let shift: f64 = weights.iter().map(|(j, w)| w * offsets[*j] / scales[*j]).sum();
            Rule::Linear { weights: weights.iter().map(|(j, w)| (*j, w / scales[*j])).collect(), bias: bias - shift }
        }
        Rule::Xor { a, cut_a, b, cut_b } => Rule::Xor { a, cut_a: to_raw(a, cut_a), b, cut_b: to_raw(b, cut_b) },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_datasets: usize,
    pub min_rows: usize,
    pub max_rows: usize,
    pub min_cols: usize,
    pub max_cols: usize,
    /// Families assigned round-robin in this order.
    pub families: Vec<RuleFamily>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        use RuleFamily::*;
        Self {
            n_datasets: 40,
            min_rows: 200,
            max_rows: 500,
            min_cols: 2,
            max_cols: 6,
            families: vec![PairCompare, Threshold, Linear, PairCompare, Threshold, Linear, PairCompare, Threshold, Linear, Xor],
            seed: 0,
        }
    }
}

/// Datasets named `{prefix}{index:03}-{family}`; each draws from its own stream.
pub fn synth_corpus(prefix: &str, config: &CorpusConfig) -> Result<Vec<SynthDataset>> {
    if config.families.is_empty() {
        return Err(FlatError::Config("no rule families selected".into()));
    }
    if config.min_cols < 2 || config.min_cols > config.max_cols || config.min_rows == 0 || config.min_rows > config.max_rows {
        return Err(FlatError::Config("invalid row or column range for the synthetic corpus".into()));
    }
    (0..config.n_datasets)
        .map(|i| {
            let family = config.families[i % config.families.len()];
            let name = format!("{prefix}{i:03}-{family}");
            let mut rng = stream(config.seed, &format!("synth/{name}"));
            let rows = rng.gen_range(config.min_rows..=config.max_rows);
            let cols = rng.gen_range(config.min_cols..=config.max_cols);
            generate(&name, family, rows, cols, &mut rng)
        })
        .collect()
}

/// Sixteen points on a jittered 4x4 grid in [-1.5, 1.5]^2, labeled `x1 > x2`.
pub fn perturbed_grid(rng: &mut FlatRng) -> (Tensor, Vec<usize>) {
    let mut data = Vec::with_capacity(32);
    let mut labels = Vec::with_capacity(16);
    let ticks = [-1.5, -0.5, 0.5, 1.5];
    for &a in &ticks {
        for &b in &ticks {
            let x1 = a + rng.gen_range(-0.3..0.3);
            let mut x2 = b + rng.gen_range(-0.3..0.3);
            if x1 == x2 {
                x2 += 1e-3;
            }
            labels.push((x1 > x2) as usize);
            data.extend([x1, x2]);
        }
    }
    (Tensor::matrix(16, 2, data), labels)
}

/// Writes features then the label in the last column, with a header row.
pub fn write_csv(table: &DatasetTable, path: &Path) -> Result<()> {
    let io = |e: &dyn fmt::Display| FlatError::Io { path: path.display().to_string(), reason: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    let mut header: Vec<String> = (0..table.n_cols()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| io(&e))?;
    for i in 0..table.n_rows() {
        let mut rec: Vec<String> = table.features().row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(table.labels()[i].to_string());
        w.write_record(&rec).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}
